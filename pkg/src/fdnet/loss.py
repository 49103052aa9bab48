"""Balanced pixel loss and gradient difference loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, absolute, add, mul, slice_axis, square, sub, sum_all


@dataclass(frozen=True)
class WeightScheme:
    """Piecewise-constant pixel weights over half-open intervals.

    ``weights[k]`` applies on ``[thresholds[k-1], thresholds[k])`` with the
    first and last intervals unbounded, so values beyond the domain ends are
    clipped onto the end weights. ``encoding`` maps stored frame values into
    the scheme's domain before lookup: ``identity`` or ``hko_pixel``
    (normalized pixel -> dBZ via the inverse linear transform).
    """

    kind: str
    thresholds: tuple[float, ...]
    weights: tuple[float, ...]
    domain: str = "normalized"
    encoding: str = "identity"

    def __post_init__(self):
        th = np.asarray(self.thresholds, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if len(w) != len(th) + 1:
            raise ValueError("need exactly one more weight than thresholds")
        if np.any(np.diff(th) <= 0):
            raise ValueError("thresholds must be strictly increasing")
        if np.any(w <= 0) or np.any(np.diff(w) < 0):
            raise ValueError("weights must be positive and non-decreasing")
        if self.encoding not in ("identity", "hko_pixel"):
            raise ValueError(f"unknown encoding {self.encoding!r}")

    def to_domain(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        if self.encoding == "hko_pixel":
            return 70.0 * v - 10.0
        return v

    def weight(self, values) -> np.ndarray:
        v = self.to_domain(values)
        idx = np.searchsorted(np.asarray(self.thresholds, dtype=float), v, side="right")
        return np.asarray(self.weights, dtype=float)[idx]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "thresholds": list(self.thresholds),
            "weights": list(self.weights),
            "domain": self.domain,
            "encoding": self.encoding,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WeightScheme":
        unknown = set(d) - {"kind", "thresholds", "weights", "domain", "encoding"}
        if unknown:
            raise ValueError(f"unknown weight scheme keys: {sorted(unknown)}")
        kind = d.get("kind", "custom")
        if kind != "custom" and "thresholds" not in d:
            base = scheme(kind)
            return cls(kind, base.thresholds, base.weights, d.get("domain", base.domain), d.get("encoding", base.encoding))
        return cls(
            kind,
            tuple(float(t) for t in d.get("thresholds", ())),
            tuple(float(w) for w in d.get("weights", (1.0,))),
            d.get("domain", "normalized"),
            d.get("encoding", "identity"),
        )


HKO_RAINRATE = WeightScheme("hko_rainrate", (2.0, 5.0, 10.0, 30.0), (1.0, 2.0, 5.0, 10.0, 30.0), "rainrate")
SRAD_DBZ = WeightScheme("srad_dbz", (20.0, 30.0, 40.0, 50.0), (1.0, 2.0, 5.0, 10.0, 30.0), "dbz")
UNIFORM = WeightScheme("uniform", (), (1.0,), "normalized")
# SRAD thresholds over an 80 dBZ span, for data normalized to [0, 1]
NORMALIZED = WeightScheme("normalized", (0.25, 0.375, 0.5, 0.625), (1.0, 2.0, 5.0, 10.0, 30.0), "normalized")

_SCHEMES = {s.kind: s for s in (HKO_RAINRATE, SRAD_DBZ, UNIFORM, NORMALIZED)}


def scheme(kind: str) -> WeightScheme:
    try:
        return _SCHEMES[kind]
    except KeyError:
        raise ValueError(f"unknown weight scheme {kind!r}; choose from {sorted(_SCHEMES)}") from None


def pixel_weight(value: float, weights: WeightScheme) -> float:
    return float(weights.weight(value))


@dataclass
class LossConfig:
    lambda_pixel: float = 1.0
    lambda_gdl: float = 1.0
    gdl_exponent: int = 1
    weight_scheme: WeightScheme = field(default_factory=lambda: NORMALIZED)
    include_warmup: bool = True

    def __post_init__(self):
        if self.lambda_pixel < 0 or self.lambda_gdl < 0:
            raise ValueError("loss weights must be non-negative")
        if int(self.gdl_exponent) != self.gdl_exponent or self.gdl_exponent < 1:
            raise ValueError("gdl_exponent must be an integer >= 1")

    def to_dict(self) -> dict:
        return {
            "lambda_pixel": self.lambda_pixel,
            "lambda_gdl": self.lambda_gdl,
            "gdl_exponent": self.gdl_exponent,
            "weight_scheme": self.weight_scheme.to_dict(),
            "include_warmup": self.include_warmup,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        unknown = set(d) - {"lambda_pixel", "lambda_gdl", "gdl_exponent", "weight_scheme", "include_warmup"}
        if unknown:
            raise ValueError(f"unknown loss config keys: {sorted(unknown)}")
        ws = d.pop("weight_scheme", None)
        if isinstance(ws, str):
            ws = scheme(ws)
        elif isinstance(ws, dict):
            ws = WeightScheme.from_dict(ws)
        if ws is not None:
            d["weight_scheme"] = ws
        return cls(**d)


def _target_array(target) -> np.ndarray:
    return target.data if isinstance(target, Tensor) else np.asarray(target)


def weighted_pixel_loss(pred: Tensor, target, weights: WeightScheme) -> Tensor:
    """sum w(target) * (|pred - target| + (pred - target)**2)."""
    t = _target_array(target)
    if pred.shape != t.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {t.shape}")
    w = weights.weight(t).astype(pred.dtype)
    delta = sub(pred, Tensor(t.astype(pred.dtype)))
    return sum_all(mul(add(absolute(delta), square(delta)), w))


def _power(x: Tensor, k: int) -> Tensor:
    out = x
    for _ in range(k - 1):
        out = mul(out, x)
    return out


def gdl_loss(pred: Tensor, target, exponent: int = 1) -> Tensor:
    """Gradient difference loss over the last two (row, column) axes."""
    if exponent < 1:
        raise ValueError("gdl exponent must be >= 1")
    t = Tensor(_target_array(target).astype(pred.dtype))
    if pred.shape != t.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {t.shape}")
    total = None
    for axis in (pred.ndim - 2, pred.ndim - 1):
        n = pred.shape[axis]
        if n < 2:
            continue
        dp = absolute(sub(slice_axis(pred, axis, 1, n), slice_axis(pred, axis, 0, n - 1)))
        dt = absolute(sub(slice_axis(t, axis, 1, n), slice_axis(t, axis, 0, n - 1)))
        term = sum_all(_power(absolute(sub(dp, dt)), exponent))
        total = term if total is None else add(total, term)
    if total is None:
        return Tensor(np.zeros((), dtype=pred.dtype))
    return total


def loss_terms(pred: Tensor, target, cfg: LossConfig, batch_size: int | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """(pixel, gdl, total), each divided by the batch size.

    ``pred``/``target`` are (K, N, 1, H, W); ``batch_size`` defaults to axis 1.
    """
    n = batch_size if batch_size is not None else (pred.shape[1] if pred.ndim >= 5 else 1)
    scale = 1.0 / n
    pix = mul(weighted_pixel_loss(pred, target, cfg.weight_scheme), scale)
    gdl = mul(gdl_loss(pred, target, cfg.gdl_exponent), scale)
    total = add(mul(pix, cfg.lambda_pixel), mul(gdl, cfg.lambda_gdl))
    return pix, gdl, total


def total_loss(pred: Tensor, target, weights: WeightScheme | None = None, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    if weights is not None:
        cfg = LossConfig(cfg.lambda_pixel, cfg.lambda_gdl, cfg.gdl_exponent, weights, cfg.include_warmup)
    return loss_terms(pred, target, cfg)[2]
