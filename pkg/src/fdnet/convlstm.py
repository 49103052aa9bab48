"""Convolutional LSTM cell with optional peephole connections.

Gate equations, with ``*`` convolution and ``.`` the Hadamard product::

    g = tanh(W_xg * X + W_hg * H + b_g)
    i = sigmoid(W_xi * X + W_hi * H + W_ci . C + b_i)
    f = sigmoid(W_xf * X + W_hf * H + W_cf . C + b_f)
    C' = f . C + i . g
    o = sigmoid(W_xo * X + W_ho * H + W_co . C' + b_o)
    H' = o . tanh(C')

The eight kernels are stored separately but evaluated as one convolution over
``[X, H]`` with the kernels stacked along the output axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conv import conv2d
from .tensor import Tensor, add, concat, mul, sigmoid, slice_axis, tanh

GATES = ("g", "i", "f", "o")


@dataclass
class ConvLstmParams:
    """Named tensors of one cell, keyed ``W_xg``, ``W_hg``, ..., ``W_ci``, ``b_g``, ...

    Peephole tensors are (hidden, H, W) and absent when ``peephole`` is false.
    """

    tensors: dict[str, Tensor]
    hidden_channels: int
    kernel_size: int = 3
    dilation: int = 1
    peephole: bool = True

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    @property
    def input_channels(self) -> int:
        return self.tensors["W_xg"].shape[1]


@dataclass
class ConvLstmState:
    H: Tensor
    C: Tensor

    def __post_init__(self):
        if self.H.shape != self.C.shape:
            raise ValueError(f"hidden {self.H.shape} and cell {self.C.shape} shapes differ")


def param_shapes(in_channels: int, hidden: int, h: int, w: int, kernel_size: int = 3, peephole: bool = True):
    k = kernel_size
    shapes = {}
    for gate in GATES:
        shapes[f"W_x{gate}"] = (hidden, in_channels, k, k)
        shapes[f"W_h{gate}"] = (hidden, hidden, k, k)
    if peephole:
        for gate in ("i", "f", "o"):
            shapes[f"W_c{gate}"] = (hidden, h, w)
    for gate in GATES:
        shapes[f"b_{gate}"] = (hidden,)
    return shapes


def init_state(batch: int, hidden: int, h: int, w: int, dtype=np.float64) -> ConvLstmState:
    if min(batch, hidden, h, w) < 1:
        raise ValueError("state dimensions must be positive")
    return ConvLstmState(Tensor(np.zeros((batch, hidden, h, w), dtype)), Tensor(np.zeros((batch, hidden, h, w), dtype)))


def fuse(params: ConvLstmParams) -> tuple[Tensor, Tensor]:
    """Stack the gate kernels into one (4*hidden, in+hidden, k, k) kernel and bias.

    The result is differentiable; reusing it across the steps of one rollout
    avoids rebuilding it every step.
    """
    p = params
    kernel = concat(
        [
            concat([p[f"W_x{gt}"] for gt in GATES], axis=0),
            concat([p[f"W_h{gt}"] for gt in GATES], axis=0),
        ],
        axis=1,
    )
    bias = concat([p[f"b_{gt}"] for gt in GATES], axis=0)
    return kernel, bias


def convlstm_step(
    params: ConvLstmParams,
    x: Tensor,
    state: ConvLstmState,
    fused: tuple[Tensor, Tensor] | None = None,
) -> ConvLstmState:
    if x.shape[2:] != state.H.shape[2:] or x.shape[0] != state.H.shape[0]:
        raise ValueError(f"input {x.shape} does not match state {state.H.shape}")
    p = params
    hid = p.hidden_channels
    kernel, bias = fused if fused is not None else fuse(p)
    pad = p.dilation * (p.kernel_size - 1) // 2
    z = conv2d(concat([x, state.H], axis=1), kernel, bias, 1, pad, p.dilation)
    zg, zi, zf, zo = (slice_axis(z, 1, k * hid, (k + 1) * hid) for k in range(4))

    c_prev = state.C
    if p.peephole:
        zi = add(zi, mul(p["W_ci"], c_prev))
        zf = add(zf, mul(p["W_cf"], c_prev))
    g = tanh(zg)
    i = sigmoid(zi)
    f = sigmoid(zf)
    c = add(mul(f, c_prev), mul(i, g))
    if p.peephole:
        zo = add(zo, mul(p["W_co"], c))
    o = sigmoid(zo)
    h = mul(o, tanh(c))
    return ConvLstmState(h, c)
