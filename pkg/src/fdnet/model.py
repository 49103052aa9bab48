"""FDNet: parallel flow and deformation pathways over ConvLSTM recurrences.

One step consumes frame ``x_t``:

* position and shape encoders give ``m_t`` and ``s_t`` at 1/8 resolution;
* the flow pathway correlates ``m_{t-1}`` with ``m_t``, runs the cost volume
  through ConvLSTM layer(s) and a small conv head emitting ``(u, v)``;
* the deformation pathway feeds ``s_t - warp(s_{t-1}, flow)`` through a
  ConvLSTM stack, projected to ``d``; ``w_pred = warp(s_t, flow)`` advects the
  current shape one step ahead with the same flow;
* ``[d, w_pred]`` is mixed by a 1x1 conv and decoded to ``x_{t+1}``.

Parameters live in a flat ``dict[str, Tensor]`` so the optimizer and
checkpoint code can treat them uniformly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import convlstm as cl
from .conv import conv2d, default_groups, group_norm, transposed_conv2d
from .flowdef import FlowField, corr, default_max_displacement, diff, warp
from .tensor import Tape, Tensor, concat_channels, leaky_relu, slice_axis, stack


@dataclass
class ModelConfig:
    input_size: tuple[int, int] = (64, 64)
    encoder_channels: list[int] = field(default_factory=lambda: [8, 16, 32, 32, 64, 64])
    encoder_strides: list[int] = field(default_factory=lambda: [2, 1, 2, 1, 2, 1])
    decoder_channels: list[int] = field(default_factory=lambda: [64, 32, 32, 16, 8, 1])
    decoder_strides: list[int] = field(default_factory=lambda: [1, 2, 1, 2, 1, 2])
    flow_lstm_layers: int = 1
    flow_hidden: int = 128
    flow_head_hidden: int = 128
    def_lstm_layers: int = 2
    def_hidden: int = 128
    def_dilations: list[int] = field(default_factory=lambda: [1, 2])
    corr_d: int | None = None
    corr_stride: int = 1
    corr_normalize: bool = False
    peephole: bool = True
    separate_encoders: bool = True
    use_flow_output: bool = True
    use_def_output: bool = True
    leaky_slope: float = 0.01
    gn_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.validate()

    @property
    def feature_channels(self) -> int:
        return self.encoder_channels[-1]

    @property
    def downsample(self) -> int:
        return int(np.prod(self.encoder_strides))

    @property
    def feature_size(self) -> tuple[int, int]:
        h, w = self.input_size
        return h // self.downsample, w // self.downsample

    @property
    def max_displacement(self) -> int:
        return default_max_displacement(self.feature_size[1]) if self.corr_d is None else self.corr_d

    @property
    def corr_channels(self) -> int:
        r = self.max_displacement // self.corr_stride
        return (2 * r + 1) ** 2

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def dilation(self, layer: int) -> int:
        if not self.def_dilations:
            return 1
        return self.def_dilations[min(layer, len(self.def_dilations) - 1)]

    def validate(self) -> None:
        h, w = self.input_size
        if h % self.downsample or w % self.downsample:
            raise ValueError(f"input_size {self.input_size} must be divisible by {self.downsample}")
        if len(self.encoder_channels) != len(self.encoder_strides):
            raise ValueError("encoder_channels and encoder_strides differ in length")
        if len(self.decoder_channels) != len(self.decoder_strides):
            raise ValueError("decoder_channels and decoder_strides differ in length")
        if self.decoder_channels[-1] != 1:
            raise ValueError("decoder must end with a single channel")
        if int(np.prod(self.decoder_strides)) != self.downsample:
            raise ValueError("decoder upsampling must undo encoder downsampling")
        if not (self.use_flow_output or self.use_def_output):
            raise ValueError("use_flow_output and use_def_output cannot both be false")
        if self.flow_lstm_layers < 0 or self.def_lstm_layers < 0:
            raise ValueError("layer counts must be non-negative")
        if self.corr_stride < 1 or (self.corr_d is not None and self.corr_d < 0):
            raise ValueError("corr_stride must be >= 1 and corr_d >= 0")
        for name in ("flow_hidden", "flow_head_hidden", "def_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class RolloutMemory:
    m_prev: Tensor | None = None
    s_prev: Tensor | None = None
    flow_states: list = field(default_factory=list)
    def_states: list = field(default_factory=list)
    # stacked ConvLSTM kernels, built once per rollout
    fused: dict = field(default_factory=dict)

    @property
    def warm(self) -> bool:
        return self.m_prev is not None


# parameters -----------------------------------------------------------------


def _encoder_shapes(prefix: str, cfg: ModelConfig) -> dict:
    shapes = {}
    cin = 1
    for i, cout in enumerate(cfg.encoder_channels):
        shapes[f"{prefix}.{i}.weight"] = (cout, cin, 3, 3)
        shapes[f"{prefix}.{i}.bias"] = (cout,)
        shapes[f"{prefix}.{i}.gamma"] = (cout,)
        shapes[f"{prefix}.{i}.beta"] = (cout,)
        cin = cout
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every parameter the config implies."""
    fh, fw = cfg.feature_size
    c = cfg.feature_channels
    shapes = _encoder_shapes("pos_encoder", cfg)
    if cfg.separate_encoders:
        shapes.update(_encoder_shapes("shape_encoder", cfg))

    cin = cfg.corr_channels
    for layer in range(cfg.flow_lstm_layers):
        for k, s in cl.param_shapes(cin, cfg.flow_hidden, fh, fw, 3, cfg.peephole).items():
            shapes[f"flow_lstm.{layer}.{k}"] = s
        cin = cfg.flow_hidden
    shapes["flow_head.0.weight"] = (cfg.flow_head_hidden, cin, 3, 3)
    shapes["flow_head.0.bias"] = (cfg.flow_head_hidden,)
    shapes["flow_head.1.weight"] = (2, cfg.flow_head_hidden, 3, 3)
    shapes["flow_head.1.bias"] = (2,)

    if cfg.use_def_output:
        cin = c
        for layer in range(cfg.def_lstm_layers):
            for k, s in cl.param_shapes(cin, cfg.def_hidden, fh, fw, 3, cfg.peephole).items():
                shapes[f"def_lstm.{layer}.{k}"] = s
            cin = cfg.def_hidden
        shapes["def_head.weight"] = (c, cin, 1, 1)
        shapes["def_head.bias"] = (c,)

    shapes["combiner.weight"] = (2 * c, 2 * c, 1, 1)
    shapes["combiner.bias"] = (2 * c,)
    cin = 2 * c
    last = len(cfg.decoder_channels) - 1
    for i, cout in enumerate(cfg.decoder_channels):
        shapes[f"decoder.{i}.weight"] = (cin, cout, 3, 3)
        shapes[f"decoder.{i}.bias"] = (cout,)
        if i != last:
            shapes[f"decoder.{i}.gamma"] = (cout,)
            shapes[f"decoder.{i}.beta"] = (cout,)
        cin = cout
    return shapes


def _is_kernel(name: str, shape) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return len(shape) == 4 and (leaf == "weight" or leaf.startswith("W_"))


def xavier_std(shape) -> float:
    receptive = int(np.prod(shape[2:]))
    fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    return float(np.sqrt(2.0 / (fan_in + fan_out)))


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Xavier-normal kernels, zero biases and peepholes, unit GroupNorm scales."""
    rng = np.random.default_rng(seed)
    dtype = cfg.np_dtype
    params = {}
    for name, shape in param_shapes(cfg).items():
        if _is_kernel(name, shape):
            data = rng.standard_normal(shape) * xavier_std(shape)
        elif name.endswith(".gamma"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params


# network --------------------------------------------------------------------


class FDNet:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        missing = set(param_shapes(config)) - set(params)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)[:5]}")
        self._flow_cells = [self._cell("flow_lstm", l, 1) for l in range(config.flow_lstm_layers)]
        self._def_cells = (
            [self._cell("def_lstm", l, config.dilation(l)) for l in range(config.def_lstm_layers)]
            if config.use_def_output
            else []
        )

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "FDNet":
        return cls(config, init_params(config, seed))

    def _cell(self, prefix: str, layer: int, dilation: int) -> cl.ConvLstmParams:
        head = f"{prefix}.{layer}."
        tensors = {k[len(head) :]: v for k, v in self.params.items() if k.startswith(head)}
        hidden = tensors["W_xg"].shape[0]
        return cl.ConvLstmParams(tensors, hidden, 3, dilation, self.config.peephole)

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _as_frame(self, x) -> Tensor:
        if isinstance(x, Tensor):
            if x.dtype != self.config.np_dtype and not x.requires_grad:
                return Tensor(x.data.astype(self.config.np_dtype))
            return x
        return Tensor(np.asarray(x, dtype=self.config.np_dtype))

    # encoders

    def _encode(self, prefix: str, x: Tensor) -> Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != cfg.input_size:
            raise ValueError(f"expected frames (N, 1, {cfg.input_size[0]}, {cfg.input_size[1]}), got {x.shape}")
        h = x
        for i, (cout, stride) in enumerate(zip(cfg.encoder_channels, cfg.encoder_strides)):
            p = f"{prefix}.{i}."
            h = conv2d(h, self._p(p + "weight"), self._p(p + "bias"), stride, 1)
            h = group_norm(h, default_groups(cout), self._p(p + "gamma"), self._p(p + "beta"), cfg.gn_eps)
            h = leaky_relu(h, cfg.leaky_slope)
        return h

    def encode_position(self, x) -> Tensor:
        return self._encode("pos_encoder", self._as_frame(x))

    def encode_shape(self, x) -> Tensor:
        prefix = "shape_encoder" if self.config.separate_encoders else "pos_encoder"
        return self._encode(prefix, self._as_frame(x))

    # pathways

    def init_memory(self) -> RolloutMemory:
        return RolloutMemory()

    def prime(self, memory: RolloutMemory, x) -> RolloutMemory:
        """Encode the first frame of a sequence and reset recurrent state."""
        x = self._as_frame(x)
        cfg = self.config
        m = self.encode_position(x)
        s = self.encode_shape(x) if cfg.separate_encoders else m
        n = x.shape[0]
        fh, fw = cfg.feature_size
        dt = cfg.np_dtype
        flow_states = [cl.init_state(n, c.hidden_channels, fh, fw, dt) for c in self._flow_cells]
        def_states = [cl.init_state(n, c.hidden_channels, fh, fw, dt) for c in self._def_cells]
        fused = {id(c): cl.fuse(c) for c in self._flow_cells + self._def_cells}
        return RolloutMemory(m, s, flow_states, def_states, fused)

    def flow_step(self, memory: RolloutMemory, m_t: Tensor):
        if memory.m_prev is None:
            raise ValueError("flow_step needs the previous position features")
        cfg = self.config
        h = corr(memory.m_prev, m_t, cfg.max_displacement, cfg.corr_stride, cfg.corr_normalize)
        states = []
        for cell, state in zip(self._flow_cells, memory.flow_states):
            state = cl.convlstm_step(cell, h, state, memory.fused.get(id(cell)))
            states.append(state)
            h = state.H
        h = conv2d(h, self._p("flow_head.0.weight"), self._p("flow_head.0.bias"), 1, 1)
        h = leaky_relu(h, cfg.leaky_slope)
        uv = conv2d(h, self._p("flow_head.1.weight"), self._p("flow_head.1.bias"), 1, 1)
        flow = FlowField(slice_axis(uv, 1, 0, 1), slice_axis(uv, 1, 1, 2))
        return states, flow

    def deform_step(self, memory: RolloutMemory, s_t: Tensor, flow: FlowField):
        """Returns (def_states, d, w_pred); ``d`` is None when the deformation branch is off."""
        if memory.s_prev is None:
            raise ValueError("deform_step needs the previous shape features")
        w_pred = warp(s_t, flow)
        if not self.config.use_def_output:
            return [], None, w_pred
        h = diff(s_t, warp(memory.s_prev, flow))
        states = []
        for cell, state in zip(self._def_cells, memory.def_states):
            state = cl.convlstm_step(cell, h, state, memory.fused.get(id(cell)))
            states.append(state)
            h = state.H
        d = conv2d(h, self._p("def_head.weight"), self._p("def_head.bias"))
        return states, d, w_pred

    def combine_decode(self, d: Tensor, w_pred: Tensor) -> Tensor:
        cfg = self.config
        if d.shape != w_pred.shape or d.shape[1] != cfg.feature_channels:
            raise ValueError(f"combiner expects two ({cfg.feature_channels}-channel) maps, got {d.shape} and {w_pred.shape}")
        h = conv2d(concat_channels([d, w_pred]), self._p("combiner.weight"), self._p("combiner.bias"))
        last = len(cfg.decoder_channels) - 1
        for i, (cout, stride) in enumerate(zip(cfg.decoder_channels, cfg.decoder_strides)):
            p = f"decoder.{i}."
            h = transposed_conv2d(h, self._p(p + "weight"), self._p(p + "bias"), stride, 1, stride - 1)
            if i != last:
                h = group_norm(h, default_groups(cout), self._p(p + "gamma"), self._p(p + "beta"), cfg.gn_eps)
                h = leaky_relu(h, cfg.leaky_slope)
        return h

    def step(self, memory: RolloutMemory, x) -> tuple[RolloutMemory, Tensor]:
        """Consume ``x_t`` on warm memory and predict ``x_{t+1}`` (unclamped)."""
        if not memory.warm:
            raise ValueError("memory is cold: prime it with the first frame before stepping")
        cfg = self.config
        x = self._as_frame(x)
        m_t = self.encode_position(x)
        s_t = self.encode_shape(x) if cfg.separate_encoders else m_t
        flow_states, flow = self.flow_step(memory, m_t)
        def_states, d, w_pred = self.deform_step(memory, s_t, flow)
        if not cfg.use_def_output:
            left, right = w_pred, w_pred
        elif not cfg.use_flow_output:
            left, right = d, d
        else:
            left, right = d, w_pred
        pred = self.combine_decode(left, right)
        return RolloutMemory(m_t, s_t, flow_states, def_states, memory.fused), pred

    def rollout(self, inputs, horizon: int, teacher=None, teacher_mask=None, return_warmup: bool = False):
        """Observe ``inputs`` (J, N, 1, H, W) then forecast ``horizon`` frames.

        Where ``teacher_mask[k]`` is true, ground truth ``teacher[k]`` replaces
        prediction ``k`` as the next input. Returns the stacked (K, N, 1, H, W)
        forecast, plus the stacked warm-up predictions of inputs[2:] when
        ``return_warmup`` is set (None if J == 2).
        """
        frames = _frames(inputs)
        if len(frames) < 2:
            raise ValueError(f"need at least 2 input frames, got {len(frames)}")
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        if teacher_mask is not None:
            teacher_mask = [bool(b) for b in teacher_mask]
            if len(teacher_mask) != horizon:
                raise ValueError(f"teacher_mask has {len(teacher_mask)} entries for horizon {horizon}")
            if any(teacher_mask):
                if teacher is None:
                    raise ValueError("teacher frames required where teacher_mask is true")
                teacher = _frames(teacher)
                if len(teacher) < horizon - 1 and any(teacher_mask[: horizon - 1]):
                    raise ValueError(f"teacher has {len(teacher)} frames, need {horizon - 1}")

        memory = self.prime(self.init_memory(), frames[0])
        warmup = []
        pred = None
        for j in range(1, len(frames)):
            memory, pred = self.step(memory, frames[j])
            if j < len(frames) - 1:
                warmup.append(pred)
        preds = [pred]
        for k in range(1, horizon):
            feed = teacher[k - 1] if teacher_mask is not None and teacher_mask[k - 1] else preds[-1]
            memory, pred = self.step(memory, feed)
            preds.append(pred)
        out = stack(preds)
        if return_warmup:
            return out, (stack(warmup) if warmup else None)
        return out

    def predict(self, inputs, horizon: int) -> np.ndarray:
        """Inference-only rollout, clamped to [0, 1]."""
        if _has_active_tape():
            raise RuntimeError("predict() must run outside a Tape")
        out = self.rollout(inputs, horizon)
        return np.clip(out.data, 0.0, 1.0)


def _frames(x) -> list:
    if isinstance(x, Tensor):
        if x.requires_grad:
            return [_index0(x, i) for i in range(x.shape[0])]
        x = x.data
    if isinstance(x, (list, tuple)):
        return list(x)
    return [x[i] for i in range(len(x))]


def _index0(x: Tensor, i: int) -> Tensor:
    from .tensor import reshape

    return reshape(slice_axis(x, 0, i, i + 1), x.shape[1:])


def _has_active_tape() -> bool:
    from .tensor import _TAPES

    return bool(_TAPES)
