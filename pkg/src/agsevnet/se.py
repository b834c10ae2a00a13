"""Squeeze-and-Excitation channel recalibration.

Squeeze: global spatial mean per channel. Excite: a two-layer gating
bottleneck (c -> c/m -> c) with ReLU between and a sigmoid at the end.
Scale: each channel of the input is multiplied by its gate, so the
block can only attenuate (gates lie strictly in (0, 1)) and never
changes the tensor shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import DenseParams, LayerGrad, activation, dense, he_dense_weight
from .rng import Rng
from .tensor import DTYPE, ShapeError, as_tensor5


@dataclass
class SeParams:
    reduction: int
    fc1: DenseParams  # c -> c // m
    fc2: DenseParams  # c // m -> c


def effective_reduction(channels: int, reduction: int) -> int:
    """Clamp the reduction to the channel count so tiny configs stay valid."""
    m = min(reduction, channels)
    if channels % m != 0:
        raise ShapeError(f"SE reduction {m} does not divide channel count {channels}")
    return m


def build_se_params(rng: Rng, channels: int, reduction: int) -> SeParams:
    m = effective_reduction(channels, reduction)
    hidden = channels // m
    fc1 = DenseParams(he_dense_weight(rng, channels, hidden), np.zeros(hidden, dtype=DTYPE))
    fc2 = DenseParams(he_dense_weight(rng, hidden, channels), np.zeros(channels, dtype=DTYPE))
    return SeParams(m, fc1, fc2)


def se_forward(u: np.ndarray, p: SeParams) -> LayerGrad:
    """Gate each channel by a squeeze-excite scale.

    backward(gy) returns (gu, {"fc1.weight", "fc1.bias", "fc2.weight",
    "fc2.bias"}).
    """
    u = as_tensor5(u, "se input")
    n, z, h, w, c = u.shape
    if p.fc1.weight.shape[0] != c:
        raise ShapeError(
            f"se_forward: input has {c} channels but fc1 expects {p.fc1.weight.shape[0]}"
        )
    effective_reduction(c, p.reduction)
    voxels = z * h * w

    zvec = u.mean(axis=(1, 2, 3))  # (n, c) squeeze
    lg1 = dense(zvec, p.fc1)
    lgr = activation(lg1.output, "relu")
    lg2 = dense(lgr.output, p.fc2)
    lgs = activation(lg2.output, "sigmoid")
    s = lgs.output  # (n, c) gates in (0, 1)
    gate = s[:, None, None, None, :]
    y = u * gate

    def backward(gy: np.ndarray):
        gy = np.asarray(gy, dtype=DTYPE)
        if gy.shape != u.shape:
            raise ShapeError(f"se backward: gradient shape {gy.shape} != output {u.shape}")
        gu = gy * gate
        gs = (gy * u).sum(axis=(1, 2, 3))  # (n, c)
        g2, _ = lgs.backward(gs)
        g1, grads2 = lg2.backward(g2)
        g0, _ = lgr.backward(g1)
        gz, grads1 = lg1.backward(g0)
        gu += gz[:, None, None, None, :] / voxels
        return gu, {
            "fc1.weight": grads1["weight"],
            "fc1.bias": grads1["bias"],
            "fc2.weight": grads2["weight"],
            "fc2.bias": grads2["bias"],
        }

    return LayerGrad(y, backward)
