"""Radar-like sequence data: synthetic blobs, on-disk archives, windows, sampling masks.

On-disk layout::

    root/manifest.json
    root/<split>/<sequence_id>/frame_000.pgm ... frame_<T-1>.pgm
    root/<split>/<sequence_id>/frames.grd        (alternative, whole sequence)

PGM frames are binary 8-bit grayscale (P5) and are normalized by 1/255. A
``.grd`` file is a 16-byte little-endian header (``b"FDG1"``, u32 H, u32 W,
u32 T) followed by T*H*W float32 values in [0, 1].
"""

from __future__ import annotations

import dataclasses
import json
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GRD_MAGIC = b"FDG1"
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    pass


@dataclass
class Sequence:
    id: str
    frames: np.ndarray  # (T, 1, H, W) float in [0, 1]
    cadence_minutes: int = 6

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim == 3:
            f = f[:, None]
        if f.ndim != 4 or f.shape[1] != 1:
            raise DataError(f"sequence {self.id}: frames must be (T, 1, H, W), got {f.shape}")
        if f.shape[0] < 2:
            raise DataError(f"sequence {self.id}: need at least 2 frames")
        if f.size and (f.min() < 0.0 or f.max() > 1.0):
            raise DataError(f"sequence {self.id}: values outside [0, 1]")
        self.frames = f

    @property
    def length(self) -> int:
        return self.frames.shape[0]


# synthetic generator -------------------------------------------------------


@dataclass
class BlobSpec:
    center: tuple[float, float]  # (x, y) in pixels at the birth step
    velocity: tuple[float, float] = (0.0, 0.0)  # (vx, vy) px/frame
    intensity: float = 1.0
    radii: tuple[float, float] = (3.0, 3.0)  # Gaussian sigma along the blob's own axes
    growth: float = 0.0  # radii scale by (1 + t * growth)
    rotation: float = 0.0  # rad/frame
    orientation: float = 0.0  # rad at birth
    decay: float = 0.0  # amplitude scales by exp(-t * decay)
    birth: int = 0


@dataclass
class SynthConfig:
    seed: int = 0
    num_sequences: int = 64
    T: int = 12
    H: int = 32
    W: int = 32
    blobs_min: int = 1
    blobs_max: int = 3
    speed_range: tuple[float, float] = (0.5, 1.5)
    intensity_range: tuple[float, float] = (0.5, 1.0)
    radius_range: tuple[float, float] = (2.5, 5.0)
    growth_range: tuple[float, float] = (-0.02, 0.06)
    rotation_range: tuple[float, float] = (-0.1, 0.1)
    decay_range: tuple[float, float] = (0.0, 0.06)
    birth_max: int = 0
    # fixed blobs for every sequence instead of random draws
    blobs: list[BlobSpec] | None = None

    def __post_init__(self):
        for name in ("speed_range", "intensity_range", "radius_range", "growth_range", "rotation_range", "decay_range"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.blobs is not None:
            self.blobs = [b if isinstance(b, BlobSpec) else BlobSpec(**b) for b in self.blobs]
        self.validate()

    def validate(self) -> None:
        if self.num_sequences < 0:
            raise DataError("synth.num_sequences must be >= 0")
        if self.T < 2:
            raise DataError("synth.T must be >= 2")
        if self.H < 1 or self.W < 1:
            raise DataError("synth.H and synth.W must be positive")
        if not 1 <= self.blobs_min <= self.blobs_max:
            raise DataError("synth.blobs_min/blobs_max must satisfy 1 <= min <= max")
        for name in ("speed_range", "intensity_range", "radius_range", "growth_range", "rotation_range", "decay_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise DataError(f"synth.{name} has lo > hi")
        if self.radius_range[0] <= 0:
            raise DataError("synth.radius_range must be positive (degenerate radii)")
        lo, hi = self.intensity_range
        if lo <= 0 or hi > 1:
            raise DataError("synth.intensity_range must lie in (0, 1]")
        if self.decay_range[0] < 0:
            raise DataError("synth.decay_range must be non-negative")
        last = self.T - 1
        if 1 + last * self.growth_range[0] <= 0:
            raise DataError("synth.growth_range shrinks radii to <= 0 within T frames (degenerate radii)")
        if self.birth_max < 0:
            raise DataError("synth.birth_max must be >= 0")
        for i, b in enumerate(self.blobs or []):
            if min(b.radii) <= 0:
                raise DataError(f"synth.blobs[{i}].radii must be positive (degenerate radii)")
            if not 0 < b.intensity <= 1:
                raise DataError(f"synth.blobs[{i}].intensity must lie in (0, 1]")
            if 1 + (last - b.birth) * b.growth <= 0:
                raise DataError(f"synth.blobs[{i}].growth shrinks radii to <= 0 (degenerate radii)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


def _draw_blob(rng: np.random.Generator, cfg: SynthConfig) -> BlobSpec:
    speed = rng.uniform(*cfg.speed_range)
    heading = rng.uniform(0, 2 * np.pi)
    return BlobSpec(
        center=(rng.uniform(0.25 * cfg.W, 0.75 * cfg.W), rng.uniform(0.25 * cfg.H, 0.75 * cfg.H)),
        velocity=(speed * np.cos(heading), speed * np.sin(heading)),
        intensity=rng.uniform(*cfg.intensity_range),
        radii=(rng.uniform(*cfg.radius_range), rng.uniform(*cfg.radius_range)),
        growth=rng.uniform(*cfg.growth_range),
        rotation=rng.uniform(*cfg.rotation_range),
        orientation=rng.uniform(0, np.pi),
        decay=rng.uniform(*cfg.decay_range),
        birth=int(rng.integers(0, cfg.birth_max + 1)),
    )


def render_blobs(blobs: list[BlobSpec], T: int, H: int, W: int) -> np.ndarray:
    """Frames (T, 1, H, W): clipped sum of anisotropic Gaussians."""
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    frames = np.zeros((T, 1, H, W))
    for t in range(T):
        acc = np.zeros((H, W))
        for b in blobs:
            tau = t - b.birth
            if tau < 0:
                continue
            cx = b.center[0] + tau * b.velocity[0]
            cy = b.center[1] + tau * b.velocity[1]
            scale = 1.0 + tau * b.growth
            rx, ry = b.radii[0] * scale, b.radii[1] * scale
            if rx <= 0 or ry <= 0:
                raise DataError("blob radii became non-positive")
            th = b.orientation + tau * b.rotation
            dx, dy = xx - cx, yy - cy
            a = np.cos(th) * dx + np.sin(th) * dy
            c = -np.sin(th) * dx + np.cos(th) * dy
            acc += b.intensity * np.exp(-tau * b.decay) * np.exp(-0.5 * ((a / rx) ** 2 + (c / ry) ** 2))
        frames[t, 0] = np.clip(acc, 0.0, 1.0)
    return frames


def gen_synthetic(cfg: SynthConfig, prefix: str = "seq") -> list[Sequence]:
    rng = np.random.default_rng(cfg.seed)
    out = []
    for i in range(cfg.num_sequences):
        if cfg.blobs is not None:
            blobs = cfg.blobs
        else:
            n = int(rng.integers(cfg.blobs_min, cfg.blobs_max + 1))
            blobs = [_draw_blob(rng, cfg) for _ in range(n)]
        out.append(Sequence(f"{prefix}_{i:05d}", render_blobs(blobs, cfg.T, cfg.H, cfg.W)))
    return out


# file formats ----------------------------------------------------------------


def write_pgm(path, frame: np.ndarray) -> None:
    """Write a [0, 1] frame as an 8-bit binary PGM."""
    img = np.asarray(frame).reshape(np.asarray(frame).shape[-2:])
    px = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    h, w = px.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    """uint8 pixel array (H, W) from a binary 8-bit PGM."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(raw, pos)
        if m is None:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    pos += 1  # single whitespace after maxval
    data = raw[pos : pos + w * h]
    if len(data) != w * h:
        raise DataError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def write_grd(path, frames: np.ndarray) -> None:
    f = np.asarray(frames, dtype="<f4")
    f = f.reshape((-1,) + f.shape[-2:])
    t, h, w = f.shape
    with open(path, "wb") as fh:
        fh.write(GRD_MAGIC + struct.pack("<III", h, w, t))
        fh.write(f.tobytes())


def read_grd(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != GRD_MAGIC:
        raise DataError(f"{path}: not an FDG1 grid file")
    h, w, t = struct.unpack("<III", raw[4:16])
    payload = raw[16:]
    if len(payload) != 4 * h * w * t:
        raise DataError(f"{path}: payload size does not match header {t}x{h}x{w}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(t, 1, h, w).astype(np.float64)
    if not np.isfinite(arr).all() or arr.min() < 0 or arr.max() > 1:
        raise DataError(f"{path}: values outside [0, 1]")
    return arr


def write_dataset(root, splits: dict[str, list[Sequence]], fmt: str = "pgm") -> None:
    """Write sequences in the on-disk layout plus ``manifest.json``."""
    if fmt not in ("pgm", "grd"):
        raise DataError(f"unknown frame format {fmt!r}")
    root = Path(root)
    entries = []
    for split, seqs in splits.items():
        for seq in seqs:
            d = root / split / seq.id
            d.mkdir(parents=True, exist_ok=True)
            if fmt == "pgm":
                for t in range(seq.length):
                    write_pgm(d / f"frame_{t:03d}.pgm", seq.frames[t, 0])
            else:
                write_grd(d / "frames.grd", seq.frames)
            entries.append(
                {"id": seq.id, "split": split, "num_frames": seq.length, "cadence_minutes": seq.cadence_minutes}
            )
    with open(root / "manifest.json", "w") as f:
        json.dump({"version": 1, "sequences": entries}, f, indent=1, sort_keys=True)
        f.write("\n")


def read_manifest(root) -> list[dict]:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DataError(f"no manifest.json under {root}")
    with open(path) as f:
        doc = json.load(f)
    entries = doc["sequences"] if isinstance(doc, dict) else doc
    for e in entries:
        missing = {"id", "split", "num_frames"} - set(e)
        if missing:
            raise DataError(f"manifest entry {e} lacks {sorted(missing)}")
    return entries


_FRAME_RE = re.compile(r"^frame_(\d+)\.(pgm|grd)$")


def _load_one(d: Path, entry: dict) -> Sequence:
    sid = entry["id"]
    n = int(entry["num_frames"])
    if not d.is_dir():
        raise DataError(f"sequence {sid}: directory {d} missing")
    names = os.listdir(d)
    pgm = sorted(x for x in names if x.endswith(".pgm"))
    grd = sorted(x for x in names if x.endswith(".grd"))
    if pgm and grd:
        raise DataError(f"sequence {sid}: mixed PGM and .grd frames")
    if grd:
        if grd == ["frames.grd"]:
            frames = read_grd(d / "frames.grd")
        else:
            frames = np.concatenate([read_grd(d / f"frame_{t:03d}.grd") for t in range(n)], axis=0)
    else:
        indices = {}
        for x in pgm:
            m = _FRAME_RE.match(x)
            if m:
                indices[int(m.group(1))] = x
        imgs = []
        for t in range(n):
            if t not in indices:
                raise DataError(f"sequence {sid}: frame index {t} missing")
            imgs.append(read_pgm(d / indices[t]))
        extra = sorted(set(indices) - set(range(n)))
        if extra:
            raise DataError(f"sequence {sid}: frames {extra} beyond manifest count {n}")
        shapes = {im.shape for im in imgs}
        if len(shapes) > 1:
            raise DataError(f"sequence {sid}: inconsistent frame dimensions {sorted(shapes)}")
        frames = np.stack(imgs)[:, None].astype(np.float64) / 255.0
    if frames.shape[0] != n:
        raise DataError(f"sequence {sid}: manifest declares {n} frames, found {frames.shape[0]}")
    return Sequence(sid, frames, int(entry.get("cadence_minutes", 6)))


def load_sequences(root, split: str | None = None, manifest: list[dict] | None = None) -> list[Sequence]:
    root = Path(root)
    entries = manifest if manifest is not None else read_manifest(root)
    out = []
    for e in entries:
        if split is not None and e["split"] != split:
            continue
        out.append(_load_one(root / e["split"] / e["id"], e))
    return out


# preprocessing -----------------------------------------------------------------


def filter_noisy(seqs: list[Sequence], eps_act: float = 1e-3) -> list[Sequence]:
    """Drop sequences with an all-zero frame next to an active frame.

    Entirely zero sequences are dropped as well.
    """
    kept = []
    for seq in seqs:
        f = seq.frames.reshape(seq.length, -1)
        zero = ~f.any(axis=1)
        active = f.mean(axis=1) > eps_act
        if zero.all():
            continue
        abrupt = np.any(zero[1:] & active[:-1]) or np.any(zero[:-1] & active[1:])
        if not abrupt:
            kept.append(seq)
    return kept


def window_count(T: int, J: int, K: int, stride: int = 1) -> int:
    return (T - J - K) // stride + 1 if T >= J + K else 0


def window(seq: Sequence, J: int, K: int, stride: int = 1) -> list[tuple[np.ndarray, np.ndarray]]:
    if J < 2 or K < 1 or stride < 1:
        raise DataError("window needs J >= 2, K >= 1, stride >= 1")
    f = seq.frames
    return [(f[i : i + J], f[i + J : i + J + K]) for i in range(0, seq.length - J - K + 1, stride)]


def make_windows(seqs: list[Sequence], J: int, K: int, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """All windows stacked as (S, J, 1, H, W) inputs and (S, K, 1, H, W) targets."""
    pairs = [p for s in seqs for p in window(s, J, K, stride)]
    if not pairs:
        return np.zeros((0, J, 1, 0, 0)), np.zeros((0, K, 1, 0, 0))
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


# scheduled sampling --------------------------------------------------------------


@dataclass
class SamplingSchedule:
    start_p: float = 1.0
    end_p: float = 0.0
    decay_steps: int = 1000
    kind: str = "linear"

    def __post_init__(self):
        if not 0.0 <= self.end_p <= self.start_p <= 1.0:
            raise DataError("sampling schedule needs 0 <= end_p <= start_p <= 1")
        if self.kind != "linear":
            raise DataError("only the linear schedule is supported")
        if self.decay_steps < 1:
            raise DataError("decay_steps must be >= 1")

    def probability(self, iteration: int) -> float:
        frac = min(1.0, iteration / self.decay_steps)
        return self.start_p - (self.start_p - self.end_p) * frac


def sampling_mask(iteration: int, schedule: SamplingSchedule, K: int, rng_seed: int = 0) -> np.ndarray:
    """Per-position teacher-forcing draws; True means feed ground truth."""
    p = schedule.probability(iteration)
    rng = np.random.default_rng([rng_seed, iteration])
    return rng.random(K) < p


def load_sequence_dir(path, seq_id: str | None = None) -> Sequence:
    """Load one sequence directory without a manifest, counting its frames."""
    d = Path(path)
    if not d.is_dir():
        raise FileNotFoundError(f"sequence directory {d} not found")
    names = os.listdir(d)
    if "frames.grd" in names:
        n = read_grd(d / "frames.grd").shape[0]
    else:
        idx = [int(m.group(1)) for m in map(_FRAME_RE.match, names) if m]
        if not idx:
            raise DataError(f"{d}: no frame_NNN.pgm/.grd files")
        n = max(idx) + 1
    return _load_one(d, {"id": seq_id or d.name, "num_frames": n})
