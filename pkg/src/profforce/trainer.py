"""The training loop shared by all three modes.

The modes differ only in the per-step settings handed to the engine:
teacher forcing is professor forcing with a zero adversarial weight and
a frozen discriminator, and scheduled sampling additionally ramps the
feed-own-sample probability linearly over the run.

Determinism contract: given one config (seed included), the metrics
rows, final parameters and checkpoints are bit-identical between runs,
except for the wallclock column.  Resuming from a checkpoint continues
the exact same trajectory because the batch order is a pure function of
(seed, step) and the sampling rng state is stored in the checkpoint.
"""

from __future__ import annotations

import logging
import math
import time
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import TrainConfig, canonical_text, config_from_text, validate_config
from .data import (
    SequenceDataset,
    chunk_sequences,
    load_corpus,
    raster_dataset,
    synth_copy_task,
    synth_raster_task,
)
from .diagnostics import CURVE_COLUMNS, format_curve_row
from .engine import (
    DiscriminatorParams,
    EngineSettings,
    GeneratorParams,
    loss_nll,
    train_step,
    unroll_teacher_forced,
)
from .tensor import stop_recording

__all__ = ["Trainer", "TrainingDiverged", "effective_settings", "generator_from_checkpoint"]

log = logging.getLogger("profforce")

_VAL_CHUNK = 64


class TrainingDiverged(RuntimeError):
    pass


def effective_settings(cfg: TrainConfig) -> EngineSettings:
    """Collapse the mode names onto engine knobs; one code path for all three."""
    if cfg.mode == "professor_forcing":
        return EngineSettings(adversarial_weight=cfg.adversarial_weight,
                              use_ct=cfg.use_ct,
                              include_outputs=cfg.include_outputs_in_behavior,
                              temperature=cfg.temperature,
                              freeze_discriminator=cfg.freeze_discriminator)
    # teacher forcing and scheduled sampling never touch the discriminator
    return EngineSettings(adversarial_weight=0.0, use_ct=False,
                          include_outputs=cfg.include_outputs_in_behavior,
                          temperature=cfg.temperature,
                          freeze_discriminator=True)


def _behavior_width(cfg: TrainConfig) -> int:
    width = cfg.gen_hidden
    if cfg.include_outputs_in_behavior:
        width += cfg.vocab_size
    return width


def build_models(cfg: TrainConfig) -> tuple[GeneratorParams, DiscriminatorParams]:
    g_rng = np.random.default_rng([cfg.seed, 11])
    d_rng = np.random.default_rng([cfg.seed, 12])
    g = GeneratorParams.create(cfg.vocab_size, cfg.gen_embed, cfg.gen_hidden,
                               cfg.gen_layers, g_rng)
    d = DiscriminatorParams.create(_behavior_width(cfg), cfg.disc_hidden, d_rng)
    return g, d


def build_datasets(cfg: TrainConfig) -> tuple[SequenceDataset, SequenceDataset | None, TrainConfig]:
    """Training and validation sequences; corpus tasks fill in the vocabulary."""
    if cfg.task == "copy":
        rng = np.random.default_rng([cfg.seed, 21])
        train = synth_copy_task(cfg.vocab_size, cfg.copy_pattern_len, cfg.seq_len,
                                cfg.copy_count, rng)
        val = (synth_copy_task(cfg.vocab_size, cfg.copy_pattern_len, cfg.seq_len,
                               cfg.val_count, rng) if cfg.val_count else None)
        return train, val, cfg
    if cfg.task == "raster":
        rng = np.random.default_rng([cfg.seed, 21])
        seq_len = cfg.raster_width * cfg.raster_height
        train = raster_dataset(synth_raster_task(cfg.raster_width, cfg.raster_height,
                                                 cfg.raster_family, cfg.raster_count, rng))
        val = (raster_dataset(synth_raster_task(cfg.raster_width, cfg.raster_height,
                                                cfg.raster_family, cfg.val_count, rng))
               if cfg.val_count else None)
        cfg.vocab_size = 2
        cfg.seq_len = seq_len
        return train, val, cfg
    corpus = load_corpus(cfg.corpus_path)
    cfg.vocab_size = corpus.vocab_size
    cfg.vocab_symbols = ",".join(str(ord(ch)) for ch in corpus.vocab)
    train = chunk_sequences(corpus.train_ids, cfg.seq_len, corpus.vocab_size)
    val = chunk_sequences(corpus.valid_ids, cfg.seq_len, corpus.vocab_size)
    if len(train) == 0:
        raise ValueError("corpus too small for even one training sequence")
    if len(val) == 0:
        val = None
    return train, val, cfg


def generator_from_checkpoint(ckpt: Checkpoint) -> tuple[GeneratorParams, TrainConfig]:
    """Rebuild just the generator, for sampling and diagnostics commands."""
    cfg = config_from_text(ckpt.config_text)
    g = GeneratorParams.create(cfg.vocab_size, cfg.gen_embed, cfg.gen_hidden,
                               cfg.gen_layers, np.random.default_rng(0))
    for name, tensor in g.named_params():
        key = "g." + name
        if key not in ckpt.tensors:
            raise CheckpointError(f"checkpoint missing tensor {key!r}")
        if ckpt.tensors[key].shape != tensor.data.shape:
            raise CheckpointError(f"tensor {key!r} has shape {ckpt.tensors[key].shape}, "
                                  f"expected {tensor.data.shape}")
        tensor.data[...] = ckpt.tensors[key]
    return g, cfg


class Trainer:
    def __init__(self, cfg: TrainConfig, out_dir, resume: Checkpoint | None = None):
        validate_config(cfg)
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.train_set, self.val_set, self.cfg = build_datasets(cfg)
        validate_config(self.cfg)
        self.g, self.d = build_models(self.cfg)
        from .optim import AdamState
        self.g_adam = AdamState.for_params(self.g.tensors(), lr=self.cfg.lr)
        self.d_adam = AdamState.for_params(self.d.tensors(), lr=self.cfg.lr)
        self.rng = np.random.default_rng(self.cfg.seed)
        self.step = 0
        self.best_val = math.inf
        if resume is not None:
            self._restore(resume)

    # -- state and checkpoints ------------------------------------------------

    def _named_state_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        g_named, d_named = self.g.named_params(), self.d.named_params()
        for name, t in g_named:
            out["g." + name] = t.data
        for name, t in d_named:
            out["d." + name] = t.data
        for (name, _), m, v in zip(g_named, self.g_adam.m, self.g_adam.v):
            out[f"adam_g.{name}.m"] = m
            out[f"adam_g.{name}.v"] = v
        for (name, _), m, v in zip(d_named, self.d_adam.m, self.d_adam.v):
            out[f"adam_d.{name}.m"] = m
            out[f"adam_d.{name}.v"] = v
        return out

    def checkpoint(self) -> Checkpoint:
        rs = self.rng.bit_generator.state
        state = {
            "step": str(self.step),
            "adam_g_t": str(self.g_adam.t),
            "adam_d_t": str(self.d_adam.t),
            "best_val": repr(self.best_val),
            "rng_state": str(rs["state"]["state"]),
            "rng_inc": str(rs["state"]["inc"]),
            "rng_has_uint32": str(rs["has_uint32"]),
            "rng_uinteger": str(rs["uinteger"]),
        }
        tensors = {k: v.copy() for k, v in self._named_state_tensors().items()}
        return Checkpoint(config_text=canonical_text(self.cfg), state=state, tensors=tensors)

    def _restore(self, ckpt: Checkpoint) -> None:
        own = self._named_state_tensors()
        for name, arr in ckpt.tensors.items():
            if name not in own:
                raise CheckpointError(f"checkpoint tensor {name!r} has no destination")
            if own[name].shape != arr.shape:
                raise CheckpointError(f"tensor {name!r}: shape {arr.shape} != {own[name].shape}")
            own[name][...] = arr
        missing = set(own) - set(ckpt.tensors)
        if missing:
            raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)[:4]} ...")
        st = ckpt.state
        self.step = int(st["step"])
        self.g_adam.t = int(st["adam_g_t"])
        self.d_adam.t = int(st["adam_d_t"])
        self.best_val = float(st["best_val"])
        self.rng.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": int(st["rng_state"]), "inc": int(st["rng_inc"])},
            "has_uint32": int(st["rng_has_uint32"]),
            "uinteger": int(st["rng_uinteger"]),
        }

    @classmethod
    def resume(cls, checkpoint_path, out_dir, max_steps: int | None = None) -> "Trainer":
        ckpt = load_checkpoint(checkpoint_path)
        cfg = config_from_text(ckpt.config_text)
        if max_steps is not None:
            cfg.max_steps = max_steps
        return cls(cfg, out_dir, resume=ckpt)

    # -- data order -----------------------------------------------------------

    def _batch_for_step(self, step: int) -> np.ndarray:
        n = len(self.train_set)
        b = min(self.cfg.batch_n, n)
        per_epoch = math.ceil(n / b)
        epoch, k = divmod(step, per_epoch)
        order = np.random.default_rng([self.cfg.seed, 31, epoch]).permutation(n)
        return self.train_set.sequences[order[k * b:(k + 1) * b]]

    def _p_sample(self, step: int) -> float:
        if self.cfg.mode != "scheduled_sampling":
            return 0.0
        span = max(self.cfg.max_steps - 1, 1)
        frac = min(step, span) / span
        return self.cfg.ss_start + (self.cfg.ss_end - self.cfg.ss_start) * frac

    # -- evaluation -----------------------------------------------------------

    def validate(self) -> tuple[float, float]:
        """Teacher-forced per-step nll and bpc over the validation set."""
        assert self.val_set is not None
        total = 0.0
        count = 0
        with stop_recording():
            seqs = self.val_set.sequences
            for start in range(0, len(seqs), _VAL_CHUNK):
                chunk = seqs[start:start + _VAL_CHUNK]
                res = unroll_teacher_forced(self.g, chunk)
                total += float(loss_nll(res.logits, chunk).data) * chunk.shape[0]
                count += chunk.size
        nll_per_step = total / count
        return nll_per_step, nll_per_step / math.log(2.0)

    # -- the loop -------------------------------------------------------------

    def run(self) -> list[dict]:
        cfg = self.cfg
        settings = effective_settings(cfg)
        rows: list[dict] = []
        curves_path = self.out_dir / "curves.csv"
        val_path = self.out_dir / "val.csv"
        with open(curves_path, "w") as curves, open(val_path, "w") as valf:
            curves.write(",".join(CURVE_COLUMNS) + "\n")
            valf.write("step,val_nll_per_step,val_bpc\n")
            while self.step < cfg.max_steps:
                step = self.step
                batch = self._batch_for_step(step)
                t0 = time.perf_counter()
                metrics = train_step(self.g, self.d, batch, settings,
                                     self._p_sample(step), self.rng,
                                     self.g_adam, self.d_adam)
                wallclock_ms = (time.perf_counter() - t0) * 1e3
                row = {"step": step, **metrics, "wallclock_ms": wallclock_ms}
                rows.append(row)
                curves.write(format_curve_row(row) + "\n")
                curves.flush()
                self._check_finite(row)
                self.step = step + 1
                log.debug("step %d nll/step %.4f", step, row["nll_per_step"])
                if self.val_set is not None and cfg.val_every and (
                        self.step % cfg.val_every == 0 or self.step == cfg.max_steps):
                    val_nll, val_bpc = self.validate()
                    valf.write(f"{self.step},{val_nll!r},{val_bpc!r}\n")
                    valf.flush()
                    log.info("step %d validation nll/step %.4f bpc %.4f",
                             self.step, val_nll, val_bpc)
                    if val_nll < self.best_val:
                        self.best_val = val_nll
                        save_checkpoint(self.checkpoint(), self.out_dir / "best.ckpt")
        save_checkpoint(self.checkpoint(), self.out_dir / "final.ckpt")
        return rows

    def _check_finite(self, row: dict) -> None:
        suspect = ["nll_per_step", "bpc"]
        if not math.isnan(row["c_d"]):
            suspect += ["c_d", "c_f", "c_t", "disc_acc"]
        bad = [k for k in suspect if not math.isfinite(row[k])]
        if bad:
            raise TrainingDiverged(
                f"non-finite metrics {bad} at step {row['step']}; "
                "inspect the learning rate or the adversarial weight")
