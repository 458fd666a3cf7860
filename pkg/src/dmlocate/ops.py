"""Dense-tensor operators with hand-written gradients.

Every differentiable operator returns a :class:`GradPair`: the forward value
plus a closure mapping the upstream gradient to the gradients of the
differentiable arguments (in argument order). Image operators accept either a
single ``(C, H, W)`` tensor or a batch ``(N, C, H, W)``; gradients match the
rank they were given. Computation stays in the input dtype, so the float32
training path and the float64 verification path share one code path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

Array = np.ndarray


class NonDifferentiableError(Exception):
    """The operator hit a point where its gradient is undefined."""


@dataclass
class GradPair:
    value: Array
    grad: Callable[[Array], tuple[Array, ...]]


def require_finite(arr: Array, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains NaN or Inf")


def _as_batch(x: Array) -> tuple[Array, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (C,H,W) or (N,C,H,W) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


def _conv_windows(xp: Array, k: int, stride: int, oh: int, ow: int) -> Array:
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, oh, ow, c, k, k),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )


def conv2d(x: Array, kernels: Array, bias: Array, stride: int = 1, padding: int = 0) -> GradPair:
    """Cross-correlation with zero padding; gradients for input, kernels, bias."""
    xb, single = _as_batch(x)
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise ValueError(f"kernels must be (C_out, C_in, k, k), got {kernels.shape}")
    n, cin, h, w = xb.shape
    cout, kcin, k, _ = kernels.shape
    if kcin != cin:
        raise ValueError(
            f"input has {cin} channels but kernels expect {kcin} "
            f"(input {x.shape}, kernels {kernels.shape})"
        )
    if bias.shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ValueError(f"kernel {k} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")

    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if padding:
        xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xb
    # im2col: one BLAS matmul per forward/backward
    cols = np.ascontiguousarray(_conv_windows(xp, k, stride, oh, ow)).reshape(
        n * oh * ow, cin * k * k
    )
    wmat = kernels.reshape(cout, cin * k * k)
    out = (cols @ wmat.T).reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    out = out + bias.astype(out.dtype)[:, None, None]
    value = out[0] if single else out

    def grad(g: Array) -> tuple[Array, Array, Array]:
        gb = g[None] if single else g
        gcols = np.ascontiguousarray(gb.transpose(0, 2, 3, 1)).reshape(n * oh * ow, cout)
        dbias = gcols.sum(axis=0)
        dkern = (gcols.T @ cols).reshape(cout, cin, k, k)
        dcols = (gcols @ wmat).reshape(n, oh, ow, cin, k, k)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return (dx[0] if single else dx), dkern, dbias

    return GradPair(value, grad)


# ---------------------------------------------------------------------------
# pooling and resampling


def avg_pool2d(x: Array, kernel: int, stride: int) -> GradPair:
    """Window means; each window element receives 1/kernel^2 of the upstream gradient."""
    if kernel < 1 or stride < 1:
        raise ValueError(f"kernel and stride must be >= 1, got {kernel}, {stride}")
    xb, single = _as_batch(x)
    n, c, h, w = xb.shape
    if kernel > h or kernel > w:
        raise ValueError(f"pool kernel {kernel} exceeds input {h}x{w}")
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    sn, sc, sh, sw = xb.strides
    win = np.lib.stride_tricks.as_strided(
        xb,
        shape=(n, c, oh, ow, kernel, kernel),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    inv = np.asarray(1.0 / (kernel * kernel), dtype=xb.dtype)
    value_b = win.sum(axis=(4, 5)) * inv

    def grad(g: Array) -> tuple[Array]:
        gb = g[None] if single else g
        dx = np.zeros_like(xb)
        gshare = gb * inv
        for i in range(kernel):
            for j in range(kernel):
                dx[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += gshare
        return (dx[0] if single else dx,)

    return GradPair(value_b[0] if single else value_b, grad)


def _resample_coords(n_out: int, n_in: int) -> tuple[Array, Array, Array]:
    """Align-corners source coordinates: floor index, neighbor index, fraction."""
    if n_out > 1 and n_in > 1:
        src = np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))
    else:
        src = np.zeros(n_out, dtype=np.float64)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_resample(x: Array, out_h: int, out_w: int) -> GradPair:
    """Align-corners bilinear resize along the trailing two axes."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output extents must be positive, got {out_h}x{out_w}")
    xb, single = _as_batch(x)
    n, c, h, w = xb.shape
    y0, y1, fy = _resample_coords(out_h, h)
    x0, x1, fx = _resample_coords(out_w, w)
    wy = fy.astype(xb.dtype)[:, None]
    wx = fx.astype(xb.dtype)[None, :]
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    value = (
        xb[:, :, y0[:, None], x0[None, :]] * w00
        + xb[:, :, y0[:, None], x1[None, :]] * w01
        + xb[:, :, y1[:, None], x0[None, :]] * w10
        + xb[:, :, y1[:, None], x1[None, :]] * w11
    )

    def grad(g: Array) -> tuple[Array]:
        gb = g[None] if single else g
        dx = np.zeros_like(xb)
        for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
            np.add.at(dx, (slice(None), slice(None), yy[:, None], xx[None, :]), gb * ww)
        return (dx[0] if single else dx,)

    return GradPair(value[0] if single else value, grad)


# ---------------------------------------------------------------------------
# affine warping (spatial-transformer sampling)


def _norm_grid(n: int) -> Array:
    if n == 1:
        return np.zeros(1, dtype=np.float64)
    return np.linspace(-1.0, 1.0, n, dtype=np.float64)


def affine_warp(x: Array, matrix: Array) -> GradPair:
    """Bilinear sampling at ``M @ (u, v, 1)`` over the normalized [-1,1]^2 grid.

    Out-of-bounds samples read zero. Gradients flow to both the image and the
    six matrix entries. Batched form pairs ``(N,C,H,W)`` with ``(N,2,3)``.
    """
    xb, single = _as_batch(x)
    mat = np.asarray(matrix)
    if single:
        if mat.shape != (2, 3):
            raise ValueError(f"matrix must be 2x3, got {mat.shape}")
        mb = mat[None]
    else:
        if mat.shape != (xb.shape[0], 2, 3):
            raise ValueError(f"matrix batch must be (N,2,3), got {mat.shape}")
        mb = mat
    require_finite(mb, "warp matrix")
    n, c, h, w = xb.shape
    dt = xb.dtype
    u = _norm_grid(w)[None, None, :]
    v = _norm_grid(h)[None, :, None]
    m = mb.astype(np.float64)
    xs = m[:, 0, 0, None, None] * u + m[:, 0, 1, None, None] * v + m[:, 0, 2, None, None]
    ys = m[:, 1, 0, None, None] * u + m[:, 1, 1, None, None] * v + m[:, 1, 2, None, None]
    px = (xs + 1.0) * ((w - 1) / 2.0)
    py = (ys + 1.0) * ((h - 1) / 2.0)

    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = (px - x0).astype(dt)
    fy = (py - y0).astype(dt)

    corners = []
    for dy in (0, 1):
        for dx_ in (0, 1):
            yy = y0 + dy
            xx = x0 + dx_
            valid = ((yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)).astype(dt)
            yc = np.clip(yy, 0, h - 1)
            xc = np.clip(xx, 0, w - 1)
            vals = xb[np.arange(n)[:, None, None], :, yc, xc]  # (N,H,W,C)
            vals = vals.transpose(0, 3, 1, 2) * valid[:, None]
            corners.append((yc, xc, valid, vals))
    (_, _, _, v00), (_, _, _, v01), (_, _, _, v10), (_, _, _, v11) = corners

    fxl = fx[:, None]
    fyl = fy[:, None]
    value = (
        v00 * (1 - fyl) * (1 - fxl)
        + v01 * (1 - fyl) * fxl
        + v10 * fyl * (1 - fxl)
        + v11 * fyl * fxl
    )

    def grad(g: Array) -> tuple[Array, Array]:
        gb = g[None] if single else g
        dx = np.zeros_like(xb)
        weights = (
            (1 - fyl) * (1 - fxl),
            (1 - fyl) * fxl,
            fyl * (1 - fxl),
            fyl * fxl,
        )
        cc = np.arange(c)[None, :, None, None]
        nn = np.arange(n)[:, None, None, None]
        for (yc, xc, valid, _), wgt in zip(corners, weights):
            np.add.at(
                dx,
                (nn, cc, yc[:, None], xc[:, None]),
                gb * wgt * valid[:, None],
            )
        # spatial derivative of the bilinear surface, chained into pixel coords
        dpx = ((1 - fyl) * (v01 - v00) + fyl * (v11 - v10)) * gb
        dpy = ((1 - fxl) * (v10 - v00) + fxl * (v11 - v01)) * gb
        dxs = dpx.sum(axis=1).astype(np.float64) * ((w - 1) / 2.0)
        dys = dpy.sum(axis=1).astype(np.float64) * ((h - 1) / 2.0)
        dm = np.empty((n, 2, 3), dtype=np.float64)
        for row, ds in ((0, dxs), (1, dys)):
            dm[:, row, 0] = (ds * u).sum(axis=(1, 2))
            dm[:, row, 1] = (ds * v).sum(axis=(1, 2))
            dm[:, row, 2] = ds.sum(axis=(1, 2))
        dm = dm.astype(mb.dtype)
        return (dx[0] if single else dx), (dm[0] if single else dm)

    return GradPair(value[0] if single else value, grad)


# ---------------------------------------------------------------------------
# elementwise and reductions


def sigmoid(x: Array) -> GradPair:
    pos = x >= 0
    z = np.where(pos, -x, x)
    ez = np.exp(z)
    value = np.where(pos, 1.0 / (1.0 + ez), ez / (1.0 + ez)).astype(x.dtype)

    def grad(g: Array) -> tuple[Array]:
        return (g * value * (1.0 - value),)

    return GradPair(value, grad)


def global_avg_pool(x: Array) -> GradPair:
    """Channel-wise spatial mean: (C,p,p) -> (C,) or (N,C,p,p) -> (N,C)."""
    if x.ndim not in (3, 4):
        raise ValueError(f"expected (C,p,p) or (N,C,p,p), got shape {x.shape}")
    h, w = x.shape[-2], x.shape[-1]
    inv = np.asarray(1.0 / (h * w), dtype=x.dtype)
    value = x.sum(axis=(-2, -1)) * inv

    def grad(g: Array) -> tuple[Array]:
        return (np.broadcast_to((g * inv)[..., None, None], x.shape).copy(),)

    return GradPair(value, grad)


def minmax_normalize(x: Array) -> GradPair:
    """Rescale to [0,1] over the whole tensor; a constant tensor maps to zeros."""
    lo = float(x.min())
    hi = float(x.max())
    if hi == lo:
        value = np.zeros_like(x)

        def degenerate(_g: Array) -> tuple[Array]:
            raise NonDifferentiableError("minmax_normalize is flat: max == min")

        return GradPair(value, degenerate)

    rng = np.asarray(hi - lo, dtype=x.dtype)
    value = (x - np.asarray(lo, dtype=x.dtype)) / rng
    amin = int(np.argmin(x))
    amax = int(np.argmax(x))

    def grad(g: Array) -> tuple[Array]:
        dx = (g / rng).copy()
        gy = float((g * value).sum())
        gtot = float(g.sum())
        flat = dx.reshape(-1)
        flat[amin] += (gy - gtot) / float(rng)
        flat[amax] -= gy / float(rng)
        return (dx,)

    return GradPair(value, grad)


def hflip(x: Array) -> Array:
    """Reverse the last axis. Involution; used by the mask symmetrizer."""
    return np.ascontiguousarray(np.flip(x, axis=-1))
