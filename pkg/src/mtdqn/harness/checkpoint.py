"""Versioned binary checkpoints.

Layout (all integers little-endian):

    magic        8 bytes   b"MTDQNCKP"
    version      u32       FORMAT_VERSION
    config       u32 length + UTF-8 canonical JSON of the experiment config
    config_hash  64 bytes  ASCII sha256 hex of that JSON
    step         u64       learner update counter
    adam         u64 step, f64 beta1, f64 beta2, f64 eps
    4 tensor groups, in order: params, target, adam.m, adam.v
        count    u32
        entries  u16 name length, UTF-8 name, u8 ndim, u32 per dim,
                 float64 little-endian row-major data
    digest       32 bytes  sha256 of every preceding byte

Tensor entries are written in sorted name order. An absent target network
is stored as an empty group.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from mtdqn.errors import FormatError
from mtdqn.harness.config import ExperimentConfig, config_hash, config_to_dict, parse_config
from mtdqn.numerics.optim import AdamState
from mtdqn.numerics.tensor import Tensor

MAGIC = b"MTDQNCKP"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ExperimentConfig
    params: dict[str, Tensor]
    target: dict[str, Tensor]
    adam: AdamState
    step: int

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


def _write_group(buf: io.BytesIO, arrays: Mapping[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    text = json.dumps(config_to_dict(ckpt.config), sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(ckpt.config_hash.encode("ascii"))
    buf.write(struct.pack("<Q", ckpt.step))
    a = ckpt.adam
    buf.write(struct.pack("<Qddd", a.step, a.beta1, a.beta2, a.eps))
    _write_group(buf, {n: t.data for n, t in ckpt.params.items()})
    _write_group(buf, {n: t.data for n, t in ckpt.target.items()})
    _write_group(buf, a.m)
    _write_group(buf, a.v)
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def group(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<H")
            name = self.take(n).decode("utf-8")
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I") if ndim else ()
            size = int(np.prod(shape)) if ndim else 1
            out[name] = np.frombuffer(self.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        return out


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 36 or data[:len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("checkpoint digest mismatch (file corrupt or truncated)")
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    (n,) = r.unpack("<I")
    text = r.take(n).decode("utf-8")
    stored_hash = r.take(64).decode("ascii")
    config = parse_config(text)
    if config_hash(config) != stored_hash:
        raise FormatError("checkpoint config hash does not match its embedded config")
    (step,) = r.unpack("<Q")
    a_step, b1, b2, eps = r.unpack("<Qddd")
    params = {k: Tensor(v, requires_grad=True) for k, v in r.group().items()}
    target = {k: Tensor(v) for k, v in r.group().items()}
    adam = AdamState(beta1=b1, beta2=b2, eps=eps, step=a_step, m=r.group(), v=r.group())
    if r.pos != len(body):
        raise FormatError(f"{len(body) - r.pos} unexpected trailing bytes in checkpoint")
    return Checkpoint(config, params, target, adam, step)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return decode_checkpoint(data)
