"""Binary checkpoints.

Layout::

    8 bytes   magic, "PFCK" + 4-digit format version ("PFCK0001")
    4 bytes   section count, little-endian u32
    sections  u32 name length, name (utf-8),
              u64 body length, body
    4 bytes   CRC32 (little-endian u32) of everything between the magic
              and the checksum itself

Two section body encodings are used: utf-8 key=value text (the config
snapshot and the scalar training state) and tensors (u32 rank, u32 dims,
then raw little-endian float64 values in row-major order).

Writes go through a temp file and an atomic rename.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["Checkpoint", "CheckpointError", "MAGIC", "save_checkpoint", "load_checkpoint"]

MAGIC = b"PFCK0001"
_MAGIC_PREFIX = b"PFCK"
_TEXT_SECTIONS = ("config", "state")


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    config_text: str
    state: dict[str, str] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def _pack_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    head = struct.pack("<I", arr.ndim) + b"".join(struct.pack("<I", d) for d in arr.shape)
    return head + arr.astype("<f8").tobytes()


def _unpack_tensor(name: str, body: bytes) -> np.ndarray:
    if len(body) < 4:
        raise CheckpointError(f"section {name!r}: truncated tensor header")
    (ndim,) = struct.unpack_from("<I", body, 0)
    need = 4 + 4 * ndim
    if len(body) < need:
        raise CheckpointError(f"section {name!r}: truncated tensor dims")
    dims = struct.unpack_from(f"<{ndim}I", body, 4) if ndim else ()
    count = int(np.prod(dims)) if ndim else 1
    if len(body) != need + 8 * count:
        raise CheckpointError(f"section {name!r}: tensor payload size mismatch")
    flat = np.frombuffer(body, dtype="<f8", count=count, offset=need)
    return flat.reshape(dims).astype(np.float64)


def _encode_state(state: dict[str, str]) -> bytes:
    return "".join(f"{k}={v}\n" for k, v in sorted(state.items())).encode("utf-8")


def _decode_state(body: bytes) -> dict[str, str]:
    out = {}
    for line in body.decode("utf-8").splitlines():
        if line:
            key, value = line.split("=", 1)
            out[key] = value
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    sections: list[tuple[str, bytes]] = [
        ("config", ckpt.config_text.encode("utf-8")),
        ("state", _encode_state(ckpt.state)),
    ]
    sections.extend((name, _pack_tensor(arr)) for name, arr in sorted(ckpt.tensors.items()))

    payload = bytearray(struct.pack("<I", len(sections)))
    for name, body in sections:
        raw = name.encode("utf-8")
        payload += struct.pack("<I", len(raw)) + raw
        payload += struct.pack("<Q", len(body)) + body
    blob = MAGIC + bytes(payload) + struct.pack("<I", zlib.crc32(bytes(payload)) & 0xFFFFFFFF)

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8 or not blob.startswith(_MAGIC_PREFIX):
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = blob[len(_MAGIC_PREFIX):len(MAGIC)]
    if version != MAGIC[len(_MAGIC_PREFIX):]:
        raise CheckpointError(
            f"{path}: unsupported checkpoint format version "
            f"{version.decode('ascii', 'replace')!r}; this build reads "
            f"{MAGIC[len(_MAGIC_PREFIX):].decode('ascii')!r}")
    payload = blob[len(MAGIC):-4]
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")

    try:
        offset = 0
        (n_sections,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        sections: list[tuple[str, bytes]] = []
        for _ in range(n_sections):
            (name_len,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (body_len,) = struct.unpack_from("<Q", payload, offset)
            offset += 8
            body = payload[offset:offset + body_len]
            if len(body) != body_len:
                raise CheckpointError(f"{path}: truncated section {name!r}")
            offset += body_len
            sections.append((name, body))
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated checkpoint") from e

    named = dict(sections)
    if "config" not in named or "state" not in named:
        raise CheckpointError(f"{path}: missing config or state section")
    tensors = {name: _unpack_tensor(name, body) for name, body in sections
               if name not in _TEXT_SECTIONS}
    return Checkpoint(config_text=named["config"].decode("utf-8"),
                      state=_decode_state(named["state"]),
                      tensors=tensors)
