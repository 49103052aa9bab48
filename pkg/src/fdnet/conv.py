"""Convolution, transposed convolution and group normalization on NCHW tensors."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _as_tensor, _make

__all__ = ["conv2d", "transposed_conv2d", "group_norm", "default_groups", "conv_output_size"]


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def conv_output_size(size: int, k: int, s: int, p: int, d: int) -> int:
    return (size + 2 * p - d * (k - 1) - 1) // s + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride, dilation, ho: int, wo: int) -> np.ndarray:
    """View of shape (N, C, ho, wo, kh, kw) over an already padded input."""
    sh, sw = stride
    dh, dw = dilation
    win = sliding_window_view(xp, (dh * (kh - 1) + 1, dw * (kw - 1) + 1), axis=(2, 3))
    return win[:, :, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw, ::dh, ::dw]


def _scatter(cols: np.ndarray, out_hw, stride, dilation) -> np.ndarray:
    """Adjoint of :func:`_windows`: sum (N, C, ho, wo, kh, kw) patches into a canvas."""
    n, c, ho, wo, kh, kw = cols.shape
    sh, sw = stride
    dh, dw = dilation
    canvas = np.zeros((n, c) + tuple(out_hw), dtype=cols.dtype)
    for i in range(kh):
        r0 = i * dh
        for j in range(kw):
            c0 = j * dw
            canvas[:, :, r0 : r0 + sh * (ho - 1) + 1 : sh, c0 : c0 + sw * (wo - 1) + 1 : sw] += cols[..., i, j]
    return canvas


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding=0, dilation=1) -> Tensor:
    """Cross-correlation with zero padding.

    ``x`` is (N, Cin, H, W), ``kernel`` is (Cout, Cin, Kh, Kw), ``bias`` is (Cout,).
    """
    stride, padding, dilation = _pair(stride), _pair(padding), _pair(dilation)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match {cout} output channels")
    ho = conv_output_size(h, kh, stride[0], padding[0], dilation[0])
    wo = conv_output_size(w, kw, stride[1], padding[1], dilation[1])
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output extent {ho}x{wo} is not positive")

    ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    k = kernel.data
    k2 = k.reshape(cout, -1)
    if kh == kw == 1 and stride == (1, 1):
        cols = xp.transpose(0, 2, 3, 1).reshape(n * ho * wo, cin)
    else:
        win = _windows(xp, kh, kw, stride, dilation, ho, wo)
        # im2col: rows are output pixels, columns (cin, kh, kw)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    out = cols @ k2.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def vjp(g):
        gx = gk = gb = None
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        if x.requires_grad:
            gcols = (g2 @ k2).reshape(n, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = _scatter(gcols, xp.shape[2:], stride, dilation)
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
        if kernel.requires_grad:
            gk = (g2.T @ cols).reshape(k.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _make(out, inputs, vjp, "conv2d")


def transposed_conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride=1,
    padding=0,
    output_padding=0,
    dilation=1,
) -> Tensor:
    """Fractionally strided convolution, the input-adjoint of :func:`conv2d`.

    ``kernel`` is (Cin, Cout, Kh, Kw). Output extent is
    ``(H - 1) * s - 2 * p + d * (Kh - 1) + 1 + output_padding``.
    """
    stride, padding = _pair(stride), _pair(padding)
    output_padding, dilation = _pair(output_padding), _pair(dilation)
    n, cin, h, w = x.shape
    kcin, cout, kh, kw = kernel.shape
    if kcin != cin:
        raise ValueError(f"transposed_conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    for op, s, d in zip(output_padding, stride, dilation):
        if op < 0 or op >= max(s, d):
            raise ValueError(f"output_padding {op} must be in [0, max(stride, dilation)) = [0, {max(s, d)})")
    ph, pw = padding
    hc = (h - 1) * stride[0] + dilation[0] * (kh - 1) + 1 + output_padding[0]
    wc = (w - 1) * stride[1] + dilation[1] * (kw - 1) + 1 + output_padding[1]
    ho, wo = hc - 2 * ph, wc - 2 * pw
    if ho < 1 or wo < 1:
        raise ValueError(f"transposed_conv2d output extent {ho}x{wo} is not positive")

    k = kernel.data
    cols = np.tensordot(x.data, k, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    canvas = _scatter(cols, (hc, wc), stride, dilation)
    out = canvas[:, :, ph : ph + ho, pw : pw + wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def vjp(g):
        gc = np.zeros((n, cout, hc, wc), dtype=g.dtype)
        gc[:, :, ph : ph + ho, pw : pw + wo] = g
        win = _windows(gc, kh, kw, stride, dilation, h, w)
        gx = gk = gb = None
        if x.requires_grad:
            gx = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if kernel.requires_grad:
            gk = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _make(out, inputs, vjp, "transposed_conv2d")


def default_groups(channels: int) -> int:
    return 8 if channels >= 8 else 1


def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"{c} channels are not divisible into {groups} groups")
    if eps <= 0:
        raise ValueError("group_norm eps must be positive")
    gamma = _as_tensor(np.ones(c) if gamma is None else gamma, x.data)
    beta = _as_tensor(np.zeros(c) if beta is None else beta, x.data)

    xg = x.data.reshape(n, groups, -1)
    m = xg.shape[2]
    mean = xg.mean(axis=2, keepdims=True)
    xc = xg - mean
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def vjp(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            dxhat = (g * gd).reshape(n, groups, m)
            xh = xhat.reshape(n, groups, m)
            gx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(n, c, h, w)
        if gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gbeta = g.sum(axis=(0, 2, 3))
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), vjp, "group_norm")
