"""Attention Guided Filter: attention-weighted guided image filtering
used to fuse a high-resolution guidance feature with a lower-resolution
feature map.

Pipeline: the guidance I is (optionally channel-aligned and) resampled
down to the filtered map O's grid; an attention map T is computed from
O and the low-res guidance; per cubic window a ridge regression weighted
by T^2 fits O as an affine function of the guidance; the per-window
coefficients are averaged over covering windows, resampled back up, and
applied as output = A_h * I + B_h.

The squared attention weights are normalized by their global mean (per
batch item) before entering the fit. This keeps the regularizer on the
same scale as the data term whatever the overall magnitude of T, so the
coefficients depend only on *relative* attention, and a constant T
reduces the fit exactly to the classical unweighted guided filter with
slope cov/(var + eps).

Window sums use clipped cubic windows (side 2r+1, in-volume voxels
only), computed in O(voxels) by three axis-wise running-sum passes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .layers import Conv3dParams, LayerGrad, activation, conv3d_forward, he_conv_kernel
from .rng import Rng
from .tensor import (
    DTYPE,
    ShapeError,
    as_tensor5,
    resample_trilinear,
    resample_trilinear_adjoint,
)

DEGENERATE_WEIGHT_SUM = 1e-12


@dataclass
class AgParams:
    radius: int  # window radius r
    eps: float  # ridge regularization
    attn_o: Conv3dParams  # 1x1x1 transform of the filtered map O
    attn_i: Conv3dParams  # 1x1x1 transform of the low-res guidance
    attn_gate: Conv3dParams  # 1x1x1 collapse to the single-channel attention map
    align: Optional[Conv3dParams] = None  # 1x1x1 matching I's channels to O's

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError(f"AG radius must be >= 1, got {self.radius}")
        if self.eps <= 0:
            raise ValueError(f"AG eps must be > 0, got {self.eps}")
        if self.attn_gate.kernel.shape[4] != 1:
            raise ShapeError("AG attention gate must produce exactly 1 channel")


class AgCoefficients(NamedTuple):
    """Per-voxel affine coefficients of the filter at the low resolution."""

    A: np.ndarray  # slope, same shape as the low-res guidance
    B: np.ndarray  # intercept


def build_ag_params(rng: Rng, i_channels: int, o_channels: int,
                    radius: int, eps: float) -> AgParams:
    width = o_channels

    def conv1(c_in, c_out, key):
        sub = rng.derive("ag", key)
        return Conv3dParams(
            he_conv_kernel(sub, 1, 1, 1, c_in, c_out), np.zeros(c_out, dtype=DTYPE)
        )

    align = None if i_channels == o_channels else conv1(i_channels, o_channels, "align")
    return AgParams(
        radius=radius,
        eps=eps,
        attn_o=conv1(o_channels, width, "attn_o"),
        attn_i=conv1(o_channels, width, "attn_i"),
        attn_gate=conv1(width, 1, "attn_gate"),
        align=align,
    )


# ---------------------------------------------------------------------------
# windowed sums

def _box_axis(x: np.ndarray, axis: int, r: int) -> np.ndarray:
    n = x.shape[axis]
    c = np.cumsum(x, axis=axis)
    hi_idx = np.minimum(np.arange(n) + r, n - 1)
    hi = np.take(c, hi_idx, axis=axis)
    lo_idx = np.arange(n) - r - 1
    lo = np.take(c, np.maximum(lo_idx, 0), axis=axis)
    shape = [1] * x.ndim
    shape[axis] = n
    valid = (lo_idx >= 0).reshape(shape)
    return hi - np.where(valid, lo, 0.0)


def box_sum(x: np.ndarray, r: int) -> np.ndarray:
    """Sum of each cubic window of radius r, clipped at the volume border.

    out[v] = sum of x over {u : |u - v|_inf <= r} intersected with the
    volume, per batch item and channel. Self-adjoint as a linear map
    (the window relation is symmetric), which the fit backward relies on.
    """
    x = as_tensor5(x, "box_sum input")
    if r < 1:
        raise ValueError(f"box_sum radius must be >= 1, got {r}")
    y = x
    for axis in (1, 2, 3):
        y = _box_axis(y, axis, r)
    return y


def window_counts(spatial: tuple[int, int, int], r: int) -> np.ndarray:
    """Number of in-volume voxels in each clipped window, shape (1,z,h,w,1)."""
    ones = np.ones((1, *spatial, 1), dtype=DTYPE)
    return box_sum(ones, r)


# ---------------------------------------------------------------------------
# attention map

def attention_map(o: np.ndarray, i_l: np.ndarray, p: AgParams) -> LayerGrad:
    """Single-channel attention in (0,1) from the two same-grid inputs.

    T = sigmoid(gate(relu(conv_o(o) + conv_i(i_l)))). backward(gt)
    returns ((go, gi_l), grads) with grads keyed attn_o.kernel etc.
    """
    o = as_tensor5(o, "attention input o")
    i_l = as_tensor5(i_l, "attention input i_l")
    if o.shape[:4] != i_l.shape[:4]:
        raise ShapeError(
            f"attention_map: spatial mismatch {o.shape} vs {i_l.shape}"
        )
    lg_o = conv3d_forward(o, p.attn_o)
    lg_i = conv3d_forward(i_l, p.attn_i)
    lg_r = activation(lg_o.output + lg_i.output, "relu")
    lg_g = conv3d_forward(lg_r.output, p.attn_gate)
    lg_s = activation(lg_g.output, "sigmoid")

    def backward(gt: np.ndarray):
        gg, _ = lg_s.backward(gt)
        gr, grads_g = lg_g.backward(gg)
        gsum, _ = lg_r.backward(gr)
        go, grads_o = lg_o.backward(gsum)
        gi, grads_i = lg_i.backward(gsum)
        grads = {
            "attn_o.kernel": grads_o["kernel"],
            "attn_o.bias": grads_o["bias"],
            "attn_i.kernel": grads_i["kernel"],
            "attn_i.bias": grads_i["bias"],
            "attn_gate.kernel": grads_g["kernel"],
            "attn_gate.bias": grads_g["bias"],
        }
        return (go, gi), grads

    return LayerGrad(lg_s.output, backward)


# ---------------------------------------------------------------------------
# attention-weighted window fit

def _fit_forward(i_l: np.ndarray, o: np.ndarray, t: np.ndarray, r: int, eps: float):
    """Weighted per-window affine fit plus covering-window averaging.

    Returns (A, B, backward) where backward(gA, gB) -> (gI, gO, gT).
    Windows whose normalized weight mass falls below a floor get the
    documented fallback: slope 0 and the unweighted window mean of O.
    """
    n, z, h, w, c = i_l.shape
    spatial = (z, h, w)
    voxels = float(z * h * w)

    q0 = t * t
    s2 = q0.sum(axis=(1, 2, 3, 4), keepdims=True)  # per batch item
    live = s2 > 0.0
    s2_safe = np.where(live, s2, 1.0)
    q = np.where(live, q0 * (voxels / s2_safe), 0.0)

    counts = window_counts(spatial, r)
    s = box_sum(q, r)
    p1 = box_sum(q * i_l, r)
    p2 = box_sum(q * o, r)
    p3 = box_sum(q * i_l * i_l, r)
    p4 = box_sum(q * i_l * o, r)

    degenerate = s < DEGENERATE_WEIGHT_SUM  # (n,z,h,w,1)
    s_safe = np.where(degenerate, 1.0, s)
    mean_i = p1 / s_safe
    mean_o = p2 / s_safe
    e_ii = p3 / s_safe
    e_io = p4 / s_safe
    var = e_ii - mean_i * mean_i
    cov = e_io - mean_i * mean_o
    denom = var + eps * counts / s_safe
    a_w = cov / denom
    b_w = mean_o - a_w * mean_i

    box_o = box_sum(o, r)
    a = np.where(degenerate, 0.0, a_w)
    b = np.where(degenerate, box_o / counts, b_w)

    coeff_a = box_sum(a, r) / counts
    coeff_b = box_sum(b, r) / counts

    def backward(g_a: np.ndarray, g_b: np.ndarray):
        da = box_sum(g_a / counts, r)
        db = box_sum(g_b / counts, r)

        ok = ~degenerate
        da_n = np.where(ok, da - db * mean_i, 0.0)
        db_n = np.where(ok, db, 0.0)
        d_mean_o = db_n.copy()
        d_mean_i = -db_n * a_w
        dcov = da_n / denom
        ddenom = -da_n * a_w / denom
        d_mean_i += -dcov * mean_o
        d_mean_o += -dcov * mean_i
        d_e_io = dcov
        d_e_ii = ddenom
        d_mean_i += -2.0 * ddenom * mean_i
        ds_eps = ddenom * (-eps * counts / (s_safe * s_safe))

        dp1 = d_mean_i / s_safe
        dp2 = d_mean_o / s_safe
        dp3 = d_e_ii / s_safe
        dp4 = d_e_io / s_safe
        ds = (
            -(d_mean_i * mean_i + d_mean_o * mean_o + d_e_ii * e_ii + d_e_io * e_io)
            / s_safe
            + ds_eps
        )
        ds = np.where(ok, ds, 0.0).sum(axis=4, keepdims=True)

        w1 = box_sum(dp1, r)
        w2 = box_sum(dp2, r)
        w3 = box_sum(dp3, r)
        w4 = box_sum(dp4, r)
        ws = box_sum(ds, r)

        g_i = q * (w1 + 2.0 * i_l * w3 + o * w4)
        g_o = q * (w2 + i_l * w4)
        # degenerate windows: b is the unweighted window mean of O
        db_deg = np.where(degenerate, db, 0.0)
        g_o += box_sum(db_deg / counts, r)

        dq = (i_l * w1 + o * w2 + i_l * i_l * w3 + i_l * o * w4).sum(
            axis=4, keepdims=True
        ) + ws
        # q = q0 * voxels / sum(q0): distribute through the normalization
        inner = (dq * q0).sum(axis=(1, 2, 3, 4), keepdims=True)
        dq0 = np.where(live, (voxels / s2_safe) * (dq - inner / s2_safe), 0.0)
        g_t = 2.0 * t * dq0
        return g_i, g_o, g_t

    return coeff_a, coeff_b, backward


def ag_fit(i_l: np.ndarray, o: np.ndarray, t: np.ndarray, r: int, eps: float) -> AgCoefficients:
    """Per-voxel filter coefficients from the attention-weighted fit.

    Minimizes, per window and channel, the squared reconstruction error
    of O from the guidance weighted by the (globally mean-normalized)
    squared attention, ridge-regularized per in-window voxel, then
    averages each voxel's coefficients over all windows covering it.
    """
    i_l = as_tensor5(i_l, "ag_fit guidance")
    o = as_tensor5(o, "ag_fit target")
    t = as_tensor5(t, "ag_fit attention")
    if i_l.shape[:4] != o.shape[:4] or i_l.shape[:4] != t.shape[:4]:
        raise ShapeError(
            f"ag_fit: spatial mismatch i_l={i_l.shape} o={o.shape} t={t.shape}"
        )
    if i_l.shape[4] != o.shape[4]:
        raise ShapeError(
            f"ag_fit: channel mismatch i_l={i_l.shape[4]} vs o={o.shape[4]}"
        )
    if t.shape[4] != 1:
        raise ShapeError(f"ag_fit: attention must be single-channel, got {t.shape}")
    if r < 1:
        raise ValueError(f"ag_fit radius must be >= 1, got {r}")
    if eps <= 0:
        raise ValueError(f"ag_fit eps must be > 0, got {eps}")
    coeff_a, coeff_b, _ = _fit_forward(i_l, o, t, r, eps)
    return AgCoefficients(coeff_a, coeff_b)


def effective_radius(radius: int, spatial: tuple[int, int, int]) -> int:
    """Scale the configured radius down so windows fit desk-size volumes."""
    return max(1, min(radius, min(spatial) // 2))


def ag_forward(i: np.ndarray, o: np.ndarray, p: AgParams) -> LayerGrad:
    """Full attention-guided filtering of the guidance/filtered pair.

    `i` is the high-resolution guidance, `o` the filtered map on a grid
    whose extents divide i's. Output lives on i's grid with o's channel
    count. backward(gy) returns ((gi, go), grads); grads carry the
    attention convs and, when present, the channel-align conv.
    """
    i = as_tensor5(i, "ag guidance")
    o = as_tensor5(o, "ag filtered map")
    if i.shape[0] != o.shape[0]:
        raise ShapeError(f"ag_forward: batch mismatch {i.shape[0]} vs {o.shape[0]}")
    for ie, oe in zip(i.shape[1:4], o.shape[1:4]):
        if ie % oe != 0:
            raise ShapeError(
                f"ag_forward: guidance extents {i.shape[1:4]} are not an integer "
                f"multiple of the filtered map's {o.shape[1:4]}"
            )
    lg_align = None
    i_al = i
    if p.align is not None:
        lg_align = conv3d_forward(i, p.align)
        i_al = lg_align.output
    if i_al.shape[4] != o.shape[4]:
        raise ShapeError(
            f"ag_forward: guidance has {i_al.shape[4]} channels vs filtered map "
            f"{o.shape[4]} and no align conv is configured"
        )

    lo_spatial = o.shape[1:4]
    hi_spatial = i.shape[1:4]
    i_low = resample_trilinear(i_al, lo_spatial)
    lg_attn = attention_map(o, i_low, p)
    r_eff = effective_radius(p.radius, lo_spatial)
    coeff_a, coeff_b, fit_backward = _fit_forward(i_low, o, lg_attn.output, r_eff, p.eps)
    a_h = resample_trilinear(coeff_a, hi_spatial)
    b_h = resample_trilinear(coeff_b, hi_spatial)
    y = a_h * i_al + b_h

    def backward(gy: np.ndarray):
        gy = np.asarray(gy, dtype=DTYPE)
        if gy.shape != y.shape:
            raise ShapeError(f"ag backward: gradient shape {gy.shape} != output {y.shape}")
        g_ah = gy * i_al
        g_bh = gy
        g_ial = gy * a_h
        g_a = resample_trilinear_adjoint(g_ah, lo_spatial)
        g_b = resample_trilinear_adjoint(g_bh, lo_spatial)
        g_ilow, g_o, g_t = fit_backward(g_a, g_b)
        (g_o_attn, g_ilow_attn), grads = lg_attn.backward(g_t)
        g_o = g_o + g_o_attn
        g_ilow = g_ilow + g_ilow_attn
        g_ial = g_ial + resample_trilinear_adjoint(g_ilow, hi_spatial)
        if lg_align is not None:
            g_i, align_grads = lg_align.backward(g_ial)
            grads["align.kernel"] = align_grads["kernel"]
            grads["align.bias"] = align_grads["bias"]
        else:
            g_i = g_ial
        return (g_i, g_o), grads

    return LayerGrad(y, backward)
