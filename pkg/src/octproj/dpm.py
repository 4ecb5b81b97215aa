"""Differentiable band projection: sampling grid, bilinear resampler, pooling.

Coordinate convention (used everywhere in the package): normalized
coordinates live in [-1, 1] with -1 at the *center* of the first row/column
and +1 at the center of the last (endpoint-aligned). A normalized vertical
position y maps to the continuous pixel row (y + 1)/2 * (H - 1).

Layer curves are [K, W] arrays of normalized vertical positions, one value
per image column; K = 3 boundaries (ILM, OPL, BM) bound the two projection
bands: band (0, 1) is the inner-retina average, band (1, 2) the outer one.
Out-of-range sample coordinates are clamped to the image border, so curve
optimization never sees a dead zero-gradient zone.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .errors import ContractError, ShapeError

PROJECTION_MODES = ("mean", "max")


def pixel_to_norm(r, extent: int):
    """Pixel row/column index to normalized coordinate (extent 1 maps to 0)."""
    if extent == 1:
        return np.zeros_like(np.asarray(r, dtype=np.float64))
    return -1.0 + 2.0 * np.asarray(r, dtype=np.float64) / (extent - 1)

def norm_to_pixel(y, extent: int):
    """Normalized coordinate to continuous pixel position."""
    return (np.asarray(y, dtype=np.float64) + 1.0) / 2.0 * (extent - 1)


def build_sampling_grid(upper: Node, lower: Node, M: int) -> Node:
    """Spatial position matrix [M, W, 2] between two curves, endpoints included.

    Row j holds (x_w, y_jw) with y_jw = upper_w + t_j * (lower_w - upper_w),
    t_j = j/(M-1), and x_w the fixed abscissa of column w. Gradients:
    d y_jw / d upper_w = 1 - t_j and d y_jw / d lower_w = t_j.
    """
    if M < 2:
        raise ContractError(f"M must be >= 2, got {M}")
    if upper.value.ndim != 1 or upper.shape != lower.shape:
        raise ShapeError(f"curves must be equal-length vectors, got {upper.shape}, {lower.shape}")
    tape = upper.tape
    w = upper.shape[0]
    t = (np.arange(M, dtype=np.float64) / (M - 1)).astype(tape.dtype)[:, None]
    x = pixel_to_norm(np.arange(w), w).astype(tape.dtype)
    value = np.empty((M, w, 2), dtype=tape.dtype)
    value[:, :, 0] = x[None, :]
    value[:, :, 1] = upper.value[None, :] * (1.0 - t) + lower.value[None, :] * t

    def vjp_upper(g):
        return ((1.0 - t) * g[:, :, 1]).sum(axis=0)

    def vjp_lower(g):
        return (t * g[:, :, 1]).sum(axis=0)

    return tape.op(value, [(upper, vjp_upper), (lower, vjp_lower)])


def bilinear_sample(img: Node, grid: Node) -> Node:
    """Resample [H, W] at normalized grid positions [M, W, 2] -> [M, W].

    Positions are mapped to continuous pixel coordinates, clamped into the
    image, and blended from the 4 nearest pixels. Gradients flow to both the
    image and the grid; position gradients are 0 where a coordinate is
    clamped at or beyond the border.
    """
    if img.value.ndim != 2:
        raise ShapeError(f"image must be 2D, got {img.shape}")
    if grid.value.ndim != 3 or grid.shape[2] != 2:
        raise ShapeError(f"grid must be [M, W, 2], got {grid.shape}")
    tape = img.tape
    h, w = img.shape
    iv = img.value

    u_raw = (grid.value[:, :, 0] + 1.0) / 2.0 * (w - 1)
    v_raw = (grid.value[:, :, 1] + 1.0) / 2.0 * (h - 1)
    u = np.clip(u_raw, 0.0, w - 1)
    v = np.clip(v_raw, 0.0, h - 1)
    i0 = np.minimum(u.astype(np.int64), max(w - 2, 0))
    j0 = np.minimum(v.astype(np.int64), max(h - 2, 0))
    i1 = np.minimum(i0 + 1, w - 1)
    j1 = np.minimum(j0 + 1, h - 1)
    fu = (u - i0).astype(tape.dtype)
    fv = (v - j0).astype(tape.dtype)

    w00 = (1 - fv) * (1 - fu)
    w01 = (1 - fv) * fu
    w10 = fv * (1 - fu)
    w11 = fv * fu
    out = (w00 * iv[j0, i0] + w01 * iv[j0, i1]
           + w10 * iv[j1, i0] + w11 * iv[j1, i1])

    def vjp_img(g):
        gi = np.zeros_like(iv)
        np.add.at(gi, (j0, i0), g * w00)
        np.add.at(gi, (j0, i1), g * w01)
        np.add.at(gi, (j1, i0), g * w10)
        np.add.at(gi, (j1, i1), g * w11)
        return gi

    # clamped coordinates contribute no position gradient
    mask_u = ((u_raw > 0) & (u_raw < w - 1)).astype(tape.dtype)
    mask_v = ((v_raw > 0) & (v_raw < h - 1)).astype(tape.dtype)
    dval_du = (1 - fv) * (iv[j0, i1] - iv[j0, i0]) + fv * (iv[j1, i1] - iv[j1, i0])
    dval_dv = (1 - fu) * (iv[j1, i0] - iv[j0, i0]) + fu * (iv[j1, i1] - iv[j0, i1])

    def vjp_grid(g):
        gg = np.zeros_like(grid.value)
        gg[:, :, 0] = g * dval_du * mask_u * ((w - 1) / 2.0)
        gg[:, :, 1] = g * dval_dv * mask_v * ((h - 1) / 2.0)
        return gg

    return tape.op(out, [(img, vjp_img), (grid, vjp_grid)])


def project_column(slice_: Node, upper: Node, lower: Node, M: int, mode: str = "mean") -> Node:
    """One projection-map column [W]: sample M points per column, pool vertically."""
    if mode not in PROJECTION_MODES:
        raise ContractError(f"mode must be one of {PROJECTION_MODES}, got {mode!r}")
    grid = build_sampling_grid(upper, lower, M)
    warped = bilinear_sample(slice_, grid)
    pool = ad.pool_mean_axis if mode == "mean" else ad.pool_max_axis
    return pool(warped, axis=0)


def project_volume(vol: np.ndarray, curves: np.ndarray, band, M: int = 64,
                   mode: str = "mean") -> np.ndarray:
    """Project every slice of a volume between two curve indices -> PM [D, W].

    ``curves`` is [D, K, W] normalized; ``band`` = (k_upper, k_lower) selects
    the bounding boundaries (b2 = (0, 1), b3 = (1, 2)). No normalization is
    applied to the result.
    """
    vol = np.asarray(vol)
    curves = np.asarray(curves)
    if vol.ndim != 3 or curves.ndim != 3:
        raise ShapeError(f"expected 3D volume and [D, K, W] curves, got {vol.shape}, {curves.shape}")
    d, h, w = vol.shape
    if curves.shape[0] != d or curves.shape[2] != w:
        raise ShapeError(f"curves {curves.shape} do not match volume {vol.shape}")
    ku, kl = band
    k = curves.shape[1]
    if not 0 <= ku < kl < k:
        raise ContractError(f"band {band} invalid for {k} boundaries")
    pm = np.empty((d, w), dtype=np.float32)
    for i in range(d):
        tape = Tape()
        col = project_column(tape.leaf(vol[i]), tape.leaf(curves[i, ku]),
                             tape.leaf(curves[i, kl]), M, mode)
        pm[i] = col.value
    return pm


def oracle_project(slice_: np.ndarray, upper_px, lower_px, mode: str = "mean") -> np.ndarray:
    """Reference projection over *integer* pixel rows, inclusive on both ends.

    Plain row arithmetic, deliberately independent of the differentiable
    path; non-differentiable by design.
    """
    slice_ = np.asarray(slice_, dtype=np.float64)
    if slice_.ndim != 2:
        raise ShapeError(f"slice must be 2D, got {slice_.shape}")
    h, w = slice_.shape
    up = np.asarray(upper_px, dtype=np.int64)
    lo = np.asarray(lower_px, dtype=np.int64)
    if up.shape != (w,) or lo.shape != (w,):
        raise ShapeError("row bounds must be one integer per column")
    if (up < 0).any() or (lo > h - 1).any() or (up > lo).any():
        raise ContractError("need 0 <= upper_px <= lower_px <= H-1 per column")
    if mode not in PROJECTION_MODES:
        raise ContractError(f"mode must be one of {PROJECTION_MODES}, got {mode!r}")
    rows = np.arange(h)[:, None]
    inband = (rows >= up[None, :]) & (rows <= lo[None, :])
    if mode == "mean":
        out = (slice_ * inband).sum(axis=0) / inband.sum(axis=0)
    else:
        out = np.where(inband, slice_, -np.inf).max(axis=0)
    return out.astype(np.float32)


def monotone_reparam(raw: Node, gap_scale: float = 0.25) -> Node:
    """Map unconstrained [K, W] values to ordered curves in [-1, 1].

    Boundary 0 is tanh(raw[0]); each later boundary advances by a positive
    softplus gap, attenuated by the remaining headroom below +1:
    c_k = 1 - (1 - c_{k-1}) * exp(-softplus(raw_k) * gap_scale). The output
    is non-decreasing across k for every input (ties only where the headroom
    has saturated) and differentiable everywhere.
    """
    if raw.value.ndim != 2:
        raise ShapeError(f"expected [K, W], got {raw.shape}")
    k = raw.shape[0]
    rows = [ad.take_row(raw, i) for i in range(k)]
    curves = [ad.tanh(rows[0])]
    for i in range(1, k):
        gap = ad.smul(ad.softplus(rows[i]), gap_scale)
        decay = ad.exp(ad.neg(gap))
        headroom = ad.sadd(ad.neg(curves[-1]), 1.0)
        curves.append(ad.sadd(ad.neg(ad.mul(headroom, decay)), 1.0))
    return ad.stack_rows(curves)


def crossing_fraction(curves: np.ndarray) -> float:
    """Fraction of columns where some nominally-upper boundary lies below a lower one.

    Accepts [K, W] or [D, K, W]; a column counts as crossed when any adjacent
    pair is strictly out of order.
    """
    c = np.asarray(curves)
    if c.ndim == 2:
        c = c[None]
    if c.ndim != 3 or c.shape[1] < 2:
        raise ShapeError(f"expected [D, K, W] with K >= 2, got {c.shape}")
    crossed = (c[:, :-1, :] > c[:, 1:, :]).any(axis=1)
    return float(crossed.mean())
