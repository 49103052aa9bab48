"""Verification scores for precipitation forecasts.

All functions here work on plain numpy arrays in an intensity domain (dBZ or
normalized values); convert pixel-encoded frames with :func:`pixel_to_dbz`
first.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .loss import WeightScheme

CADENCE_MINUTES = 6
DBZ_THRESHOLDS = (20.0, 30.0, 40.0, 50.0)
NORMALIZED_THRESHOLDS = (0.25, 0.375, 0.5, 0.625)


def dbz_to_pixel(dbz):
    """floor(255 * (dBZ + 10) / 70 + 0.5), clipped to [0, 255]."""
    dbz = np.asarray(dbz, dtype=np.float64)
    return np.clip(np.floor(255.0 * (dbz + 10.0) / 70.0 + 0.5), 0, 255).astype(np.int64)


def pixel_to_dbz(pixel):
    return 70.0 * np.asarray(pixel, dtype=np.float64) / 255.0 - 10.0


def dbz_pixel_convert(value, direction: str):
    if direction == "to_pixel":
        return dbz_to_pixel(value)
    if direction == "to_dbz":
        return pixel_to_dbz(value)
    raise ValueError(f"direction must be 'to_pixel' or 'to_dbz', got {direction!r}")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred, target, threshold: float) -> ConfusionCounts:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    p = pred >= threshold
    t = target >= threshold
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, int(p.size) - tp - fp - fn, fn)


def csi(c: ConfusionCounts) -> float:
    den = c.tp + c.fn + c.fp
    return c.tp / den if den else 0.0


def hss(c: ConfusionCounts) -> float:
    # python ints: no overflow on large pixel counts
    num = c.tp * c.tn - c.fn * c.fp
    den = (c.tp + c.fn) * (c.fn + c.tn) + (c.tp + c.fp) * (c.fp + c.tn)
    return num / den if den else 0.0


def skill_scores(c: ConfusionCounts) -> tuple[float, float]:
    return csi(c), hss(c)


def balanced_errors(pred, target, weights: WeightScheme) -> tuple[float, float]:
    """(BMSE, BMAE): per-frame weighted sums averaged over frames.

    Frames are indexed by every leading axis except the last two.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    n_frames = int(np.prod(pred.shape[:-2])) if pred.ndim > 2 else 1
    w = weights.weight(target)
    err = target - pred
    return float((w * err * err).sum() / n_frames), float((w * np.abs(err)).sum() / n_frames)


@dataclass
class SkillReport:
    thresholds: list[float]
    counts: dict = field(default_factory=dict)  # (threshold, step) -> ConfusionCounts
    bmse: dict = field(default_factory=dict)  # step -> float
    bmae: dict = field(default_factory=dict)
    cadence_minutes: int = CADENCE_MINUTES

    @property
    def steps(self) -> list[int]:
        return sorted(self.bmse)

    def minutes(self, step: int) -> int:
        return step * self.cadence_minutes

    def csi(self, threshold: float, step: int) -> float:
        return csi(self.counts[threshold, step])

    def hss(self, threshold: float, step: int) -> float:
        return hss(self.counts[threshold, step])

    def aggregate_counts(self, threshold: float) -> ConfusionCounts:
        total = ConfusionCounts()
        for step in self.steps:
            total = total + self.counts[threshold, step]
        return total

    def mean_csi(self, threshold: float) -> float:
        """Mean of per-step scores (the headline number)."""
        return float(np.mean([self.csi(threshold, s) for s in self.steps]))

    def mean_hss(self, threshold: float) -> float:
        return float(np.mean([self.hss(threshold, s) for s in self.steps]))

    def pooled_csi(self, threshold: float) -> float:
        return csi(self.aggregate_counts(threshold))

    def pooled_hss(self, threshold: float) -> float:
        return hss(self.aggregate_counts(threshold))

    def mean_bmse(self) -> float:
        return float(np.mean([self.bmse[s] for s in self.steps]))

    def mean_bmae(self) -> float:
        return float(np.mean([self.bmae[s] for s in self.steps]))

    def rows(self) -> list[dict]:
        out = []
        for step in self.steps:
            for th in self.thresholds:
                c = self.counts[th, step]
                out.append(
                    {
                        "lead_step": step,
                        "minutes": self.minutes(step),
                        "threshold": th,
                        "tp": c.tp,
                        "fp": c.fp,
                        "tn": c.tn,
                        "fn": c.fn,
                        "csi": csi(c),
                        "hss": hss(c),
                        "bmse": self.bmse[step],
                        "bmae": self.bmae[step],
                    }
                )
        return out

    def write_csv(self, path) -> None:
        fields = ["lead_step", "minutes", "threshold", "tp", "fp", "tn", "fn", "csi", "hss", "bmse", "bmae"]
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=fields)
            w.writeheader()
            for row in self.rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

    def write_curves(self, path) -> None:
        """Frame-wise CSI/HSS per threshold, one row per lead step."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["lead_step", "minutes"] + [f"csi_{t:g}" for t in self.thresholds] + [f"hss_{t:g}" for t in self.thresholds])
            for s in self.steps:
                w.writerow(
                    [s, self.minutes(s)]
                    + [repr(self.csi(t, s)) for t in self.thresholds]
                    + [repr(self.hss(t, s)) for t in self.thresholds]
                )

    def summary(self) -> dict:
        """BMSE at AVG / 30 / 60 / 90 / 120 minutes; NaN where the forecast is too short."""
        row = {"AVG": self.mean_bmse()}
        for minutes in (30, 60, 90, 120):
            step = minutes // self.cadence_minutes
            ok = minutes % self.cadence_minutes == 0 and step in self.bmse
            row[f"{minutes}min"] = self.bmse[step] if ok else float("nan")
        return row


def evaluate_rollout(preds, targets, thresholds, weights: WeightScheme, cadence_minutes: int = CADENCE_MINUTES) -> SkillReport:
    """Score a (K, ...) forecast against (K, ...) targets, step by step (1-based)."""
    preds = np.asarray(preds)
    targets = np.asarray(targets)
    if preds.shape != targets.shape:
        raise ValueError(f"length/shape mismatch: {preds.shape} vs {targets.shape}")
    if preds.shape[0] < 1:
        raise ValueError("need at least one lead step")
    report = SkillReport([float(t) for t in thresholds], cadence_minutes=cadence_minutes)
    dom_p = weights.to_domain(preds)
    dom_t = weights.to_domain(targets)
    for k in range(preds.shape[0]):
        step = k + 1
        for th in report.thresholds:
            report.counts[th, step] = confusion(dom_p[k], dom_t[k], th)
        report.bmse[step], report.bmae[step] = balanced_errors(preds[k], targets[k], weights)
    return report

