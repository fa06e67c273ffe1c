"""Binary checkpoint format.

Layout (little-endian): ``b"SNET"``, u32 version (1), u32 tensor count, then per
tensor u16 name length, UTF-8 name, u8 rank, rank x u32 dims, float32 data.
An optimizer block with the same layout follows (its names end in ``.m`` or
``.v``; count 0 when absent), then a trailing u64 optimizer step counter.

Training metadata (epoch, learning rate) travels as the tensors
``__meta__.epoch`` and ``__meta__.lr``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagicError, FormatError, ShapeMismatchError, TruncatedFileError, VersionMismatchError

MAGIC = b"SNET"
VERSION = 1
META_PREFIX = "__meta__."


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    lr: float = 0.0

    def model_state(self, prefix: str = "") -> dict:
        """Tensors whose names start with ``prefix``, metadata excluded."""
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix) and not k.startswith(META_PREFIX)}


def _pack_block(named: dict) -> bytes:
    out = [struct.pack("<I", len(named))]
    for name, arr in named.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"checkpoint truncated at byte {self.pos} (need {n} more)")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def block(self) -> dict:
        (count,) = self.unpack("I")
        named = {}
        for _ in range(count):
            (length,) = self.unpack("H")
            try:
                name = self.take(length).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise FormatError("tensor name is not UTF-8") from exc
            (rank,) = self.unpack("B")
            dims = self.unpack(f"{rank}I") if rank else ()
            n = int(np.prod(dims)) if rank else 1
            if name in named:
                raise FormatError(f"duplicate tensor name {name!r}")
            named[name] = np.frombuffer(self.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        return named


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    tensors = dict(ckpt.tensors)
    tensors[META_PREFIX + "epoch"] = np.array([ckpt.epoch], np.float32)
    tensors[META_PREFIX + "lr"] = np.array([ckpt.lr], np.float32)
    return b"".join(
        [
            MAGIC,
            struct.pack("<I", VERSION),
            _pack_block(tensors),
            _pack_block(ckpt.optimizer),
            struct.pack("<Q", ckpt.step),
        ]
    )


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r = _Reader(buf)
    r.take(4)
    (version,) = r.unpack("I")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    tensors = r.block()
    optimizer = r.block()
    (step,) = r.unpack("Q")
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    epoch = int(tensors.pop(META_PREFIX + "epoch", np.zeros(1))[0])
    lr = float(tensors.pop(META_PREFIX + "lr", np.zeros(1))[0])
    return Checkpoint(tensors, optimizer, step, epoch, lr)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def checkpoint_from(model, adam=None, epoch: int = 0, lr: float = 0.0) -> Checkpoint:
    tensors = {k: np.array(v, dtype=np.float32) for k, v in model.state_dict().items()}
    optimizer, step = {}, 0
    if adam is not None:
        for name in adam.m:
            optimizer[name + ".m"] = np.array(adam.m[name], dtype=np.float32)
            optimizer[name + ".v"] = np.array(adam.v[name], dtype=np.float32)
        step = adam.t
    return Checkpoint(tensors, optimizer, step, epoch, lr)


def load_into(model, ckpt: Checkpoint, prefix: str = "") -> list:
    """Load tensors under ``prefix`` into ``model``.

    With an empty prefix the whole model must match exactly. With a prefix
    (warm start), only parameters under that prefix are loaded, and the
    checkpoint must provide every one of them with matching shapes.
    """
    if not prefix:
        return model.load_state_dict(ckpt.model_state())
    state = ckpt.model_state(prefix)
    own = {n for n, *_ in model.named_buffers()} | {n for n, _ in model.named_parameters()}
    wanted = {n for n in own if n.startswith(prefix)}
    missing = sorted(wanted - state.keys())
    if missing:
        raise ShapeMismatchError("checkpoint lacks: " + ", ".join(missing))
    return model.load_state_dict(state, strict=False)
