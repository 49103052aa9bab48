"""Binary checkpoint files.

Layout, all integers little-endian u32::

    b"FDCK" | version
    string count | (length, utf-8 bytes) * count
    record count | (name length, name, dtype tag u8, rank, dims * rank, payload) * count

The strings are, in order: model config JSON, model config digest, loss
config digest, data config digest, and a JSON blob of scalar training state.
Records hold parameters (``param/<name>``) and optimizer moments
(``adam_m/<name>``, ``adam_v/<name>``).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig

MAGIC = b"FDCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(RuntimeError):
    pass


class ConfigMismatchError(CheckpointError):
    """The checkpoint was written for a different model configuration."""


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    iteration: int = 0
    loss_digest: str = ""
    data_digest: str = ""
    extra: dict = field(default_factory=dict)


def _pack_str(buf, s: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _pack_array(buf, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    tag = _TAGS.get(arr.dtype)
    if tag is None:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    _pack_str(buf, name)
    buf.write(struct.pack("<BI", tag, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    state = {"adam_t": ckpt.adam_t, "iteration": ckpt.iteration, "extra": ckpt.extra}
    strings = [
        json.dumps(ckpt.config.to_dict(), sort_keys=True),
        ckpt.config.digest(),
        ckpt.loss_digest,
        ckpt.data_digest,
        json.dumps(state, sort_keys=True),
    ]
    records = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    records += [(f"adam_m/{k}", v) for k, v in ckpt.adam_m.items()]
    records += [(f"adam_v/{k}", v) for k, v in ckpt.adam_v.items()]

    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(strings)))
    for s in strings:
        _pack_str(buf, s)
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        _pack_array(buf, name, arr)
    # write-then-rename so a crash never leaves a half-written checkpoint behind
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated or corrupt checkpoint (offset {self.pos})")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path, expected_config: ModelConfig | None = None, force: bool = False) -> Checkpoint:
    """Read a checkpoint; refuse it if its config digest differs from ``expected_config``."""
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    strings = [r.string() for _ in range(r.u32())]
    if len(strings) != 5:
        raise CheckpointError(f"{path}: expected 5 header strings, found {len(strings)}")
    cfg_json, digest, loss_digest, data_digest, state_json = strings
    config = ModelConfig.from_dict(json.loads(cfg_json))
    if config.digest() != digest:
        raise CheckpointError(f"{path}: stored config does not match its digest")
    if expected_config is not None and expected_config.digest() != digest and not force:
        raise ConfigMismatchError(f"{path}: model config digest mismatch ({digest[:12]} vs {expected_config.digest()[:12]})")

    groups: dict[str, dict] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for _ in range(r.u32()):
        name = r.string()
        tag, rank = struct.unpack("<BI", r.take(5))
        if tag not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        dt = _DTYPES[tag]
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(dims)
        kind, _, key = name.partition("/")
        if kind not in groups:
            raise CheckpointError(f"{path}: unknown record {name}")
        groups[kind][key] = arr.astype(dt.newbyteorder("="))
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after last record")
    state = json.loads(state_json)
    return Checkpoint(
        config,
        groups["param"],
        groups["adam_m"],
        groups["adam_v"],
        int(state["adam_t"]),
        int(state["iteration"]),
        loss_digest,
        data_digest,
        state.get("extra", {}),
    )
