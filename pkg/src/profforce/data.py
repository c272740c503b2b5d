"""Character corpora and the two synthetic symbol tasks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

__all__ = [
    "CharCorpus",
    "SequenceDataset",
    "RasterSequence",
    "load_corpus",
    "chunk_sequences",
    "make_batches",
    "synth_copy_task",
    "synth_raster_task",
    "raster_dataset",
]


@dataclass
class CharCorpus:
    """A character stream mapped to dense ids with contiguous splits."""

    vocab: list[str]
    train_ids: np.ndarray
    valid_ids: np.ndarray
    test_ids: np.ndarray

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def decode(self, ids) -> str:
        return "".join(self.vocab[int(i)] for i in np.asarray(ids).reshape(-1))


def load_corpus(path, fractions: tuple[float, float, float] = (0.9, 0.05, 0.05)) -> CharCorpus:
    """Read a text file, build a sorted character vocabulary, split 0.9/0.05/0.05.

    Splits are contiguous spans of the id stream, in file order.
    """
    raw = Path(path).read_bytes()
    if not raw:
        raise ValueError(f"corpus file {path} is empty")
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        text = raw.decode("latin-1")
    vocab = sorted(set(text))
    index = {ch: i for i, ch in enumerate(vocab)}
    ids = np.fromiter((index[ch] for ch in text), dtype=np.int64, count=len(text))
    n = len(ids)
    n_train = int(n * fractions[0])
    n_valid = int(n * fractions[1])
    return CharCorpus(vocab=vocab,
                      train_ids=ids[:n_train],
                      valid_ids=ids[n_train:n_train + n_valid],
                      test_ids=ids[n_train + n_valid:])


@dataclass
class SequenceDataset:
    """Fixed-length symbol sequences, one row each."""

    sequences: np.ndarray  # [N, L] int64
    vocab_size: int

    def __post_init__(self):
        self.sequences = np.asarray(self.sequences, dtype=np.int64)
        if self.sequences.ndim != 2:
            raise ValueError("sequences must be a 2D [N, L] array")

    def __len__(self) -> int:
        return self.sequences.shape[0]

    @property
    def length(self) -> int:
        return self.sequences.shape[1]


def chunk_sequences(ids, length: int, vocab_size: int) -> SequenceDataset:
    """Cut a flat id stream into floor(n/length) non-overlapping chunks.

    The remainder after the last full chunk is dropped.
    """
    if length < 1:
        raise ValueError("chunk length must be positive")
    ids = np.asarray(ids, dtype=np.int64)
    n = ids.shape[0] // length
    return SequenceDataset(ids[:n * length].reshape(n, length), vocab_size)


def make_batches(ds: SequenceDataset, batch_size: int,
                 rng: np.random.Generator) -> Iterator[np.ndarray]:
    """One epoch of batches in a freshly shuffled order.

    Every sequence appears exactly once; a short final batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    n = len(ds)
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield ds.sequences[order[start:start + batch_size]]


def synth_copy_task(vocab_size: int, pattern_len: int, seq_len: int, count: int,
                    rng: np.random.Generator) -> SequenceDataset:
    """Random patterns tiled out to seq_len, e.g. [2, 7] -> [2, 7, 2, 7, 2, 7].

    Everything after the first period is predictable by copying the
    symbol pattern_len steps back, so an ideal infinite-data model
    approaches (pattern_len / seq_len) * ln(vocab_size) nats per step.
    """
    if not 1 <= pattern_len <= seq_len:
        raise ValueError("need 1 <= pattern_len <= seq_len")
    if vocab_size < 2:
        raise ValueError("copy task needs at least two symbols")
    reps = math.ceil(seq_len / pattern_len)
    rows = np.empty((count, seq_len), dtype=np.int64)
    for i in range(count):
        pattern = rng.integers(0, vocab_size, size=pattern_len)
        rows[i] = np.tile(pattern, reps)[:seq_len]
    return SequenceDataset(rows, vocab_size)


@dataclass
class RasterSequence:
    """A binary image flattened in row-major scan order."""

    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.int64)
        if self.bits.ndim != 1 or not np.isin(self.bits, (0, 1)).all():
            raise ValueError("bits must be a flat 0/1 array")


def synth_raster_task(width: int, height: int, shape_family: str, count: int,
                      rng: np.random.Generator) -> list[RasterSequence]:
    """Simple shapes drawn onto a width x height grid.

    Families: "rect" (filled axis-aligned rectangle), "cross" (one full
    row plus one full column), "blank" (all background).
    """
    if width < 4 or height < 4:
        raise ValueError("grid must be at least 4 x 4")
    out = []
    for _ in range(count):
        grid = np.zeros((height, width), dtype=np.int64)
        if shape_family == "rect":
            y0, y1 = sorted(rng.integers(0, height, size=2))
            x0, x1 = sorted(rng.integers(0, width, size=2))
            grid[y0:y1 + 1, x0:x1 + 1] = 1
        elif shape_family == "cross":
            grid[rng.integers(0, height)] = 1
            grid[:, rng.integers(0, width)] = 1
        elif shape_family == "blank":
            pass
        else:
            raise ValueError(f"unknown shape family {shape_family!r}")
        out.append(RasterSequence(grid.reshape(-1)))
    return out


def raster_dataset(rasters: list[RasterSequence]) -> SequenceDataset:
    """Stack rasters into a binary-vocabulary sequence dataset."""
    if not rasters:
        raise ValueError("no rasters given")
    return SequenceDataset(np.stack([r.bits for r in rasters]), vocab_size=2)
