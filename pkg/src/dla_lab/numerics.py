"""Dense numeric substrate: bilinear sampling, convolution, softmax, finite differences.

Tensors are plain ``numpy.ndarray`` objects (row-major, float64). A feature map
is an array of shape ``(channels, height, width)``; batched variants carry a
leading batch axis.

Normalized sampling coordinates ``(x, y)`` map to continuous pixel space via
``x_pix = x * W - 0.5`` and ``y_pix = y * H - 0.5`` so that ``(col + 0.5) / W``
lands exactly on a pixel center. Pixels outside the map contribute zero.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "DomainError",
    "ShapeError",
    "OracleError",
    "bilinear_sample",
    "bilinear_gather",
    "bilinear_gather_backward",
    "conv2d",
    "conv2d_backward",
    "softmax_over_samples",
    "softmax_over_samples_backward",
    "finite_difference_gradient",
]

DTYPE = np.float64


class DomainError(ValueError):
    """Input outside an operation's domain (non-finite point, bad threshold, ...)."""


class ShapeError(ValueError):
    """Incompatible extents between operands."""


class OracleError(ArithmeticError):
    """The finite-difference oracle observed a non-finite function value."""


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------


def _corners(points: np.ndarray, height: int, width: int):
    """Corner indices, weights, validity masks and weight derivatives.

    ``points`` has shape (..., 2). Returned arrays have shape (4, ...) in the
    corner order (x0,y0), (x1,y0), (x0,y1), (x1,y1).
    """
    x = points[..., 0] * width - 0.5
    y = points[..., 1] * height - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xs = np.stack([x0, x0 + 1, x0, x0 + 1])
    ys = np.stack([y0, y0, y0 + 1, y0 + 1])
    gx, gy = 1.0 - fx, 1.0 - fy
    w = np.stack([gx * gy, fx * gy, gx * fy, fx * fy])
    dw_dx = np.stack([-gy, gy, -fy, fy])
    dw_dy = np.stack([-gx, -fx, gx, fx])
    valid = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
    flat = np.where(valid, ys * width + xs, 0)
    return flat, w * valid, dw_dx * valid, dw_dy * valid


def bilinear_sample(fmap: np.ndarray, point: Sequence[float]) -> np.ndarray:
    """Sample a (C, H, W) map at one normalized point; returns a length-C vector."""
    pt = np.asarray(point, dtype=DTYPE)
    if pt.shape != (2,):
        raise ShapeError(f"point must have shape (2,), got {pt.shape}")
    if not np.all(np.isfinite(pt)):
        raise DomainError(f"non-finite sampling point {pt.tolist()}")
    fmap = np.asarray(fmap, dtype=DTYPE)
    if fmap.ndim != 3:
        raise ShapeError(f"feature map must be (C, H, W), got {fmap.shape}")
    out = bilinear_gather(fmap[None], pt[None, None])
    return out[0, 0]


def bilinear_gather(values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Grouped bilinear sampling.

    values: (G, C, H, W); points: (G, N, 2) normalized. Returns (G, N, C),
    where group g samples only its own map.
    """
    if values.ndim != 4 or points.ndim != 3 or points.shape[-1] != 2:
        raise ShapeError(f"bad shapes values={values.shape} points={points.shape}")
    if values.shape[0] != points.shape[0]:
        raise ShapeError(f"group mismatch {values.shape[0]} vs {points.shape[0]}")
    g, c, h, w = values.shape
    flat, wts, _, _ = _corners(points, h, w)
    table = values.reshape(g, c, h * w).transpose(0, 2, 1)  # (G, HW, C)
    vals = table[np.arange(g)[None, :, None], flat]  # (4, G, N, C)
    return np.einsum("kgn,kgnc->gnc", wts, vals)


_DENSE_SCATTER_LIMIT = 1 << 22


def _scatter_corners(flat: np.ndarray, wts: np.ndarray, grad_out: np.ndarray, hw: int) -> np.ndarray:
    """Adjoint of the corner gather: (G, HW, C) sums of weighted grad_out rows.

    The interpolation operator is materialized per group as an (HW, N)
    matrix when small, otherwise as one sparse matrix.
    """
    g, n, c = grad_out.shape
    if g * hw * n <= _DENSE_SCATTER_LIMIT:
        idx = ((np.arange(g)[None, :, None] * hw + flat) * n + np.arange(n)).ravel()
        interp = np.bincount(idx, weights=wts.ravel(), minlength=g * hw * n).reshape(g, hw, n)
        return interp @ grad_out
    rows = (flat + (np.arange(g) * hw)[None, :, None]).ravel()
    cols = np.broadcast_to(np.arange(g * n).reshape(g, n), flat.shape).ravel()
    interp = sparse.csr_matrix((wts.ravel(), (rows, cols)), shape=(g * hw, g * n))
    return np.asarray(interp @ grad_out.reshape(g * n, c)).reshape(g, hw, c)


def bilinear_gather_backward(
    values: np.ndarray, points: np.ndarray, grad_out: np.ndarray, need_values: bool = True
) -> tuple[np.ndarray | None, np.ndarray]:
    """Gradients of :func:`bilinear_gather` w.r.t. ``values`` and ``points``.

    grad_out has shape (G, N, C). Returns (grad_values (G, C, H, W) or None,
    grad_points (G, N, 2)). The sampled function is piecewise bilinear in the
    point, so grad_points is the one-sided derivative on grid lines.
    """
    g, c, h, w = values.shape
    flat, wts, dwx, dwy = _corners(points, h, w)
    table = values.reshape(g, c, h * w).transpose(0, 2, 1)
    vals = table[np.arange(g)[None, :, None], flat]  # (4, G, N, C)
    proj = np.einsum("kgnc,gnc->kgn", vals, grad_out)
    grad_points = np.stack([(dwx * proj).sum(0) * w, (dwy * proj).sum(0) * h], axis=-1)
    grad_values = None
    if need_values:
        gtable = _scatter_corners(flat, wts, grad_out, h * w)  # (G, HW, C)
        grad_values = gtable.transpose(0, 2, 1).reshape(g, c, h, w)
    return grad_values, grad_points


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: tuple[int, int]) -> np.ndarray:
    """(B, C, Hp, Wp) padded input -> (B * Ho * Wo, C * kh * kw) patch matrix."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, :: stride[0], :: stride[1]]  # (B, C, Ho, Wo, kh, kw)
    b, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw), (ho, wo)


def conv2d(
    x: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray | None = None,
    padding=None,
    stride=1,
) -> np.ndarray:
    """Zero-padded cross-correlation.

    ``x`` is (C, H, W) or (B, C, H, W); ``kernel`` is (O, C, kh, kw). Padding
    defaults to (kh // 2, kw // 2), which preserves spatial size at stride 1.
    """
    single = x.ndim == 3
    xb = x[None] if single else x
    o, c, kh, kw = kernel.shape
    if xb.shape[1] != c:
        raise ShapeError(f"input has {xb.shape[1]} channels, kernel expects {c}")
    ph, pw = _pair(padding) if padding is not None else (kh // 2, kw // 2)
    xp = np.pad(xb, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xb
    cols, (ho, wo) = _im2col(xp, kh, kw, _pair(stride))
    out = cols @ kernel.reshape(o, -1).T
    if bias is not None:
        out += bias
    out = out.reshape(xb.shape[0], ho, wo, o).transpose(0, 3, 1, 2)
    return out[0] if single else out


def conv2d_backward(
    x: np.ndarray,
    kernel: np.ndarray,
    grad_out: np.ndarray,
    padding=None,
    stride=1,
    need_input: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Returns (grad_x, grad_kernel, grad_bias) for :func:`conv2d`."""
    single = x.ndim == 3
    xb = x[None] if single else x
    gb = grad_out[None] if single else grad_out
    o, c, kh, kw = kernel.shape
    ph, pw = _pair(padding) if padding is not None else (kh // 2, kw // 2)
    sh, sw = _pair(stride)
    xp = np.pad(xb, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xb
    cols, (ho, wo) = _im2col(xp, kh, kw, (sh, sw))
    g2 = gb.transpose(0, 2, 3, 1).reshape(-1, o)
    grad_kernel = (g2.T @ cols).reshape(kernel.shape)
    grad_bias = g2.sum(axis=0)
    grad_x = None
    if need_input:
        b = xb.shape[0]
        gcols = (g2 @ kernel.reshape(o, -1)).reshape(b, ho, wo, c, kh, kw)
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += (
                    gcols[..., i, j].transpose(0, 3, 1, 2)
                )
        grad_x = gxp[:, :, ph : ph + xb.shape[2], pw : pw + xb.shape[3]]
        if single:
            grad_x = grad_x[0]
    return grad_x, grad_kernel, grad_bias


# ---------------------------------------------------------------------------
# softmax over the (level, point) samples of each head
# ---------------------------------------------------------------------------


def softmax_over_samples(logits: np.ndarray, sample_axes: int = 2) -> np.ndarray:
    """Softmax over the trailing ``sample_axes`` axes, jointly.

    For a (M, L, P) tensor the default normalizes each head over its L*P
    entries. Use ``sample_axes=1`` for a flattened (M, T) layout.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    lead = logits.shape[: logits.ndim - sample_axes]
    flat = logits.reshape(lead + (-1,))
    z = flat - flat.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return out.reshape(logits.shape)


def softmax_over_samples_backward(probs: np.ndarray, grad_out: np.ndarray, sample_axes: int = 2) -> np.ndarray:
    lead = probs.shape[: probs.ndim - sample_axes]
    p = probs.reshape(lead + (-1,))
    g = grad_out.reshape(lead + (-1,))
    gl = p * (g - (p * g).sum(axis=-1, keepdims=True))
    return gl.reshape(probs.shape)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_difference_gradient(
    fn: Callable[[np.ndarray], float],
    x: np.ndarray,
    step: float = 1e-6,
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    ``indices`` restricts the probe to a subset of flat coordinates; the
    remaining entries of the result are left at zero.
    """
    if not step > 0:
        raise DomainError(f"step must be positive, got {step}")
    x = np.array(x, dtype=DTYPE, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn(x))
        flat[i] = orig - step
        fm = float(fn(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad
