"""Training loop: ADAM, global-norm clipping, scheduled sampling, checkpoints.

Every random choice is a pure function of ``(seed, epoch)`` or
``(seed, iteration)``, so a run resumed from a checkpoint follows the same
trajectory as an uninterrupted one.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import SamplingSchedule, Sequence, make_windows, sampling_mask
from .loss import LossConfig, loss_terms
from .metrics import NORMALIZED_THRESHOLDS, evaluate_rollout
from .model import FDNet, ModelConfig, init_params
from .tensor import NonFiniteError, Tape, Tensor, backward, concat

log = logging.getLogger(__name__)

LOG_FIELDS = ["iteration", "split", "loss_pixel", "loss_gdl", "loss_total", "p_teacher", "avg_bmse"]


class TrainingError(RuntimeError):
    pass


# optimizer ---------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor], lr: float = 1e-4, **hyper) -> "AdamState":
        m = {k: np.zeros_like(p.data) for k, p in params.items()}
        v = {k: np.zeros_like(p.data) for k, p in params.items()}
        return cls(m, v, 0, lr, **hyper)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], clip_value: float, mode: str = "norm") -> dict[str, np.ndarray]:
    """Scale all gradients by ``clip_value / g`` when the global L2 norm ``g`` exceeds it.

    ``mode="value"`` clamps each element to ``[-clip_value, clip_value]`` instead.
    """
    if clip_value <= 0:
        raise ValueError("clip_value must be positive")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}")
    if mode == "value":
        return {k: np.clip(g, -clip_value, clip_value) for k, g in grads.items()}
    if mode != "norm":
        raise ValueError(f"unknown clip mode {mode!r}")
    norm = global_norm(grads)
    if norm <= clip_value:
        return grads
    scale = clip_value / norm
    return {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}


def adam_step(state: AdamState, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected ADAM update; parameter arrays are replaced in place on their Tensors."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_m, new_v, new_data = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        dt = p.data.dtype
        m = (b1 * state.m[name] + (1 - b1) * g).astype(dt)
        v = (b2 * state.v[name] + (1 - b2) * g * g).astype(dt)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new = (p.data - step).astype(dt)
        if not np.isfinite(new).all():
            raise NonFiniteError(f"non-finite ADAM update for {name}")
        new_m[name], new_v[name], new_data[name] = m, v, new
    for name, p in params.items():
        p.data = new_data[name]
    return params, dataclasses.replace(state, m=new_m, v=new_v, t=t)


# configuration -----------------------------------------------------------------


@dataclass
class TrainConfig:
    max_iterations: int = 2000
    epochs: int | None = None  # overrides max_iterations when set
    batch_size: int = 4
    lr: float = 1e-4
    clip_value: float = 50.0
    clip_mode: str = "norm"
    J: int = 4
    K: int = 6
    window_stride: int = 1
    # None: start 1.0, end 0.0, linear decay over half the run
    sampling: SamplingSchedule | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    eval_every: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    log_path: str | None = None
    seed: int = 0
    # stop once the training loss falls to this fraction of the first logged loss
    stop_ratio: float | None = None

    def __post_init__(self):
        if isinstance(self.sampling, dict):
            self.sampling = SamplingSchedule(**self.sampling)
        if isinstance(self.loss, dict):
            self.loss = LossConfig.from_dict(self.loss)
        self.validate()

    def validate(self) -> None:
        for name in ("max_iterations", "batch_size", "J", "K", "window_stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"train.{name} must be positive")
        if self.J < 2:
            raise ValueError("train.J must be >= 2")
        if self.epochs is not None and self.epochs < 1:
            raise ValueError("train.epochs must be positive")
        if self.clip_value <= 0:
            raise ValueError("train.clip_value must be positive")
        if self.clip_mode not in ("norm", "value"):
            raise ValueError("train.clip_mode must be 'norm' or 'value'")
        if self.lr <= 0:
            raise ValueError("train.lr must be positive")
        if self.eval_every < 0 or self.checkpoint_every < 0:
            raise ValueError("train.eval_every and train.checkpoint_every must be >= 0")

    def schedule(self, total_iterations: int) -> SamplingSchedule:
        if self.sampling is not None:
            return self.sampling
        return SamplingSchedule(1.0, 0.0, max(1, total_iterations // 2))

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["sampling"] = dataclasses.asdict(self.sampling) if self.sampling is not None else None
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


# driver --------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: FDNet
    adam: AdamState
    iteration: int
    log: list[dict]
    best_bmse: float | None
    first_loss: float | None
    window: tuple[int, int] = (4, 6)

    def checkpoint(self, loss_digest: str = "", data_digest: str = "") -> Checkpoint:
        return Checkpoint(
            self.model.config,
            {k: p.data.copy() for k, p in self.model.params.items()},
            {k: a.copy() for k, a in self.adam.m.items()},
            {k: a.copy() for k, a in self.adam.v.items()},
            self.adam.t,
            self.iteration,
            loss_digest,
            data_digest,
            {"first_loss": self.first_loss, "best_bmse": self.best_bmse, "J": self.window[0], "K": self.window[1]},
        )


def batch_indices(iteration: int, n_samples: int, batch_size: int, seed: int) -> np.ndarray:
    """Window indices of the batch drawn at ``iteration`` (0-based).

    Samples are reshuffled every epoch with a permutation seeded by ``(seed, epoch)``.
    """
    b = min(batch_size, n_samples)
    per_epoch = n_samples // b
    epoch, slot = divmod(iteration, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n_samples)
    return perm[slot * b : (slot + 1) * b]


def _time_major(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.swapaxes(x, 0, 1))


def forward_loss(model: FDNet, inputs: np.ndarray, targets: np.ndarray, mask, cfg: LossConfig):
    """Rollout plus loss terms; ``inputs``/``targets`` are time-major (J|K, N, 1, H, W)."""
    preds, warm = model.rollout(inputs, targets.shape[0], teacher=targets, teacher_mask=mask, return_warmup=True)
    target = targets
    if cfg.include_warmup and warm is not None:
        preds = concat([warm, preds], axis=0)
        target = np.concatenate([inputs[2:], targets], axis=0)
    return loss_terms(preds, target, cfg, batch_size=inputs.shape[1])


def evaluate(model: FDNet, inputs: np.ndarray, targets: np.ndarray, weights, thresholds=NORMALIZED_THRESHOLDS, batch_size: int = 16):
    """Forecast every window (sample-major arrays) and score the split in one report."""
    if len(inputs) == 0:
        raise ValueError("evaluation split is empty")
    K = targets.shape[1]
    outs = []
    for s in range(0, len(inputs), batch_size):
        outs.append(model.predict(_time_major(inputs[s : s + batch_size]), K))
    preds = np.concatenate(outs, axis=1)
    return evaluate_rollout(preds, _time_major(targets), thresholds, weights)


def _write_log(path, rows, append: bool) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS)
        if not append:
            w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else ("" if v is None else v)) for k, v in r.items()})


def train(
    cfg: TrainConfig,
    model_config: ModelConfig,
    train_seqs: list[Sequence],
    val_seqs: list[Sequence] | None = None,
    resume: Checkpoint | None = None,
) -> TrainResult:
    inputs, targets = make_windows(train_seqs, cfg.J, cfg.K, cfg.window_stride)
    if len(inputs) == 0:
        raise TrainingError("no training windows: dataset empty or sequences shorter than J + K")
    if inputs.shape[-2:] != model_config.input_size:
        raise TrainingError(f"frames are {inputs.shape[-2:]}, model expects {model_config.input_size}")
    n = len(inputs)
    per_epoch = n // min(cfg.batch_size, n)
    total = cfg.epochs * per_epoch if cfg.epochs is not None else cfg.max_iterations
    schedule = cfg.schedule(total)
    loss_digest = _digest(cfg.loss.to_dict())
    data_digest = hashlib.sha256(inputs.tobytes() + targets.tobytes()).hexdigest()

    val = make_windows(val_seqs, cfg.J, cfg.K, cfg.window_stride) if val_seqs else None
    if val is not None and len(val[0]) == 0:
        val = None

    if resume is not None:
        if resume.config.digest() != model_config.digest():
            raise TrainingError("checkpoint model config differs from the requested one")
        params = {k: Tensor(np.array(a), requires_grad=True, name=k) for k, a in resume.params.items()}
        model = FDNet(model_config, params)
        adam = AdamState(
            {k: np.array(a) for k, a in resume.adam_m.items()},
            {k: np.array(a) for k, a in resume.adam_v.items()},
            resume.adam_t,
            cfg.lr,
        )
        start = resume.iteration
        first_loss = resume.extra.get("first_loss")
        best = resume.extra.get("best_bmse")
    else:
        model = FDNet(model_config, init_params(model_config, cfg.seed))
        adam = AdamState.zeros_like(model.params, cfg.lr)
        start, first_loss, best = 0, None, None

    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    if cfg.log_path:
        _write_log(cfg.log_path, [], append=resume is not None and Path(cfg.log_path).exists())

    rows: list[dict] = []
    result = TrainResult(model, adam, start, rows, best, first_loss, (cfg.J, cfg.K))
    dtype = model_config.np_dtype
    for it in range(start, total):
        idx = batch_indices(it, n, cfg.batch_size, cfg.seed)
        x = _time_major(inputs[idx]).astype(dtype)
        y = _time_major(targets[idx]).astype(dtype)
        mask = sampling_mask(it, schedule, cfg.K, cfg.seed)
        try:
            with Tape() as tape:
                pix, gdl, tot = forward_loss(model, x, y, mask, cfg.loss)
            value = float(tot.item())
            if not math.isfinite(value):
                raise NonFiniteError("loss is non-finite")
            grads = backward(tape, tot, model.params)
            grads = clip_gradients(grads, cfg.clip_value, cfg.clip_mode)
        except NonFiniteError as e:
            raise TrainingError(f"iteration {it + 1}: {e} on batch of windows {idx.tolist()}") from e
        if cfg.clip_mode == "norm":
            assert global_norm(grads) <= cfg.clip_value * (1 + 1e-5)
        _, adam = adam_step(adam, model.params, grads)

        if first_loss is None:
            first_loss = value
        row = {
            "iteration": it + 1,
            "split": "train",
            "loss_pixel": float(pix.item()),
            "loss_gdl": float(gdl.item()),
            "loss_total": value,
            "p_teacher": schedule.probability(it),
            "avg_bmse": None,
        }
        new_rows = [row]
        result.adam, result.iteration, result.first_loss = adam, it + 1, first_loss

        if val is not None and cfg.eval_every and (it + 1) % cfg.eval_every == 0:
            report = evaluate(model, val[0], val[1], cfg.loss.weight_scheme)
            bmse = report.mean_bmse()
            new_rows.append({**{k: None for k in LOG_FIELDS}, "iteration": it + 1, "split": "val", "avg_bmse": bmse})
            if best is None or bmse < best:
                best = result.best_bmse = bmse
                if ckpt_dir is not None:
                    save_checkpoint(ckpt_dir / "best.fdck", result.checkpoint(loss_digest, data_digest))
        if ckpt_dir is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            ck = result.checkpoint(loss_digest, data_digest)
            save_checkpoint(ckpt_dir / f"iter_{it + 1:06d}.fdck", ck)
            save_checkpoint(ckpt_dir / "last.fdck", ck)

        rows.extend(new_rows)
        if cfg.log_path:
            _write_log(cfg.log_path, new_rows, append=True)
        if (it + 1) % 50 == 0:
            log.info("iteration %d loss %.6g p_teacher %.3f", it + 1, value, row["p_teacher"])
        if cfg.stop_ratio is not None and value <= cfg.stop_ratio * first_loss:
            break

    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / "last.fdck", result.checkpoint(loss_digest, data_digest))
    return result


def resume_from(path, cfg: TrainConfig, model_config: ModelConfig, train_seqs, val_seqs=None, force: bool = False) -> TrainResult:
    ckpt = load_checkpoint(path, model_config, force=force)
    return train(cfg, model_config, train_seqs, val_seqs, resume=ckpt)
