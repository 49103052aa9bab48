"""Correlation cost volume, bilinear warping and feature differencing.

Coordinates are (row, col) = (y, x). A flow field holds ``u`` (column
displacement) and ``v`` (row displacement) in feature pixels; warping samples
the source at ``(i + v, j + u)`` with zeros outside the grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _make, sub

__all__ = ["FlowField", "displacements", "default_max_displacement", "corr", "warp", "diff"]


@dataclass(frozen=True)
class FlowField:
    u: Tensor
    v: Tensor

    def __post_init__(self):
        if self.u.shape != self.v.shape:
            raise ValueError(f"flow components differ in shape: {self.u.shape} vs {self.v.shape}")

    @property
    def shape(self):
        return self.u.shape

    @classmethod
    def zeros(cls, n: int, h: int, w: int, dtype=np.float64) -> "FlowField":
        return cls(Tensor(np.zeros((n, 1, h, w), dtype)), Tensor(np.zeros((n, 1, h, w), dtype)))


def default_max_displacement(width: int) -> int:
    """Roughly a third of the feature width (21 for 64, 11 for 32)."""
    return int(round(width / 3))


def displacements(d: int, s: int = 1) -> list[tuple[int, int]]:
    """Row-major (dy, dx) grid of displacements k*s with |k*s| <= d."""
    if d < 0 or s < 1:
        raise ValueError(f"need d >= 0 and s >= 1, got d={d}, s={s}")
    r = d // s
    steps = [k * s for k in range(-r, r + 1)]
    return [(dy, dx) for dy in steps for dx in steps]


def corr(m_prev: Tensor, m_curr: Tensor, d: int, s: int = 1, normalize: bool = False) -> Tensor:
    """Cost volume of shape (N, D, H, W), D = (2 * floor(d / s) + 1) ** 2.

    Channel k holds the dot product of ``m_prev[:, :, y, x]`` with
    ``m_curr[:, :, y + dy, x + dx]`` for the k-th displacement.
    """
    if m_prev.shape != m_curr.shape:
        raise ValueError(f"corr shape mismatch: {m_prev.shape} vs {m_curr.shape}")
    disp = displacements(d, s)
    n, c, h, w = m_prev.shape
    pad = (d // s) * s
    a = m_prev.data
    bp = np.pad(m_curr.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    scale = 1.0 / c if normalize else 1.0
    out = np.empty((n, len(disp), h, w), dtype=a.dtype)
    for k, (dy, dx) in enumerate(disp):
        win = bp[:, :, pad + dy : pad + dy + h, pad + dx : pad + dx + w]
        out[:, k] = (a * win).sum(axis=1)
    if normalize:
        out *= scale

    def vjp(g):
        if normalize:
            g = g * scale
        ga = np.zeros_like(a) if m_prev.requires_grad else None
        gbp = np.zeros_like(bp) if m_curr.requires_grad else None
        for k, (dy, dx) in enumerate(disp):
            gk = g[:, k : k + 1]
            sl = (slice(None), slice(None), slice(pad + dy, pad + dy + h), slice(pad + dx, pad + dx + w))
            if ga is not None:
                ga += gk * bp[sl]
            if gbp is not None:
                gbp[sl] += gk * a
        gb = None if gbp is None else gbp[:, :, pad : pad + h, pad : pad + w]
        return ga, gb

    return _make(out, (m_prev, m_curr), vjp, "corr")


def _bilinear_matrix(u: np.ndarray, v: np.ndarray, h: int, w: int):
    """Dense (N, HW, HW) sampling matrix plus the pieces needed for flow gradients."""
    n = u.shape[0]
    hw = h * w
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    y = ii[None] + v[:, 0]
    x = jj[None] + u[:, 0]
    y0 = np.floor(y)
    x0 = np.floor(x)
    wy1 = y - y0
    wx1 = x - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    corners = []
    A = np.zeros((n, hw, hw), dtype=u.dtype)
    nidx = np.broadcast_to(np.arange(n)[:, None, None], (n, h, w))
    pidx = np.broadcast_to((ii * w + jj)[None], (n, h, w))
    for oy, ox in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy = y0 + oy
        xx = x0 + ox
        wy = wy1 if oy else 1.0 - wy1
        wx = wx1 if ox else 1.0 - wx1
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        q = np.where(valid, yy * w + xx, 0)
        # each output pixel appears once per corner, so += has no duplicates
        A[nidx[valid], pidx[valid], q[valid]] += (wy * wx)[valid]
        corners.append((q, valid, wy, wx, 1.0 if oy else -1.0, 1.0 if ox else -1.0))
    return A, corners


def warp(s: Tensor, flow: FlowField) -> Tensor:
    """Bilinear gather ``out[c, i, j] = sum_mn s[c, m, n] k(i + v - m) k(j + u - n)``
    with ``k(t) = max(0, 1 - |t|)``."""
    n, c, h, w = s.shape
    if flow.u.shape != (n, 1, h, w):
        raise ValueError(f"flow shape {flow.u.shape} does not match features {s.shape}")
    u, v = flow.u, flow.v
    A, corners = _bilinear_matrix(u.data, v.data, h, w)
    sf = s.data.reshape(n, c, h * w)
    out = np.matmul(sf, A.transpose(0, 2, 1)).reshape(n, c, h, w)

    def vjp(g):
        gf = g.reshape(n, c, h * w)
        gs = np.matmul(gf, A).reshape(n, c, h, w) if s.requires_grad else None
        gu = gv = None
        if u.requires_grad or v.requires_grad:
            gu = np.zeros((n, h, w), dtype=g.dtype)
            gv = np.zeros((n, h, w), dtype=g.dtype)
            for q, valid, wy, wx, sy, sx in corners:
                vals = np.take_along_axis(sf, q.reshape(n, 1, h * w), axis=2).reshape(n, c, h, w)
                dot = (g * vals).sum(axis=1) * valid
                gu += dot * wy * sx
                gv += dot * wx * sy
            gu = gu[:, None]
            gv = gv[:, None]
        return gs, gu, gv

    return _make(out, (s, u, v), vjp, "warp")


def diff(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"diff shape mismatch: {a.shape} vs {b.shape}")
    return sub(a, b)
