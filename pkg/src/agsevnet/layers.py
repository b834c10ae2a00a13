"""Differentiable 3D layers with explicit analytic backward passes.

Every layer returns a `LayerGrad`: the forward output plus a closure
mapping an output-shaped gradient to (input gradient, parameter
gradients). Closures capture only what the backward needs; they are
pure, linear in the incoming gradient, and safe to call repeatedly.

Kernel layouts (channels last, matching the tensor axis order):
    conv:   (kz, kh, kw, c_in, c_out)
    deconv: (kz, kh, kw, c_out, c_in)
The deconv layout is flipped on the channel axes so that a convolution
and a transposed convolution sharing one kernel array are exact adjoint
linear maps: <deconv_W(x), y> == <x, conv_W(y)>.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .npyio import read_npy, write_npy
from .rng import Rng
from .tensor import DTYPE, ShapeError, as_tensor5


class LayerGrad(NamedTuple):
    """Forward output paired with its backward closure.

    `backward(gy)` returns `(grad_input, grad_params)` where
    `grad_params` is a dict keyed like the layer's parameter fields
    (empty for parameter-free ops). Multi-input ops return a tuple of
    input gradients; each layer documents its exact signature.
    """

    output: np.ndarray
    backward: Callable


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected int or length-3 tuple, got {v!r}")
    return t


@dataclass
class Conv3dParams:
    kernel: np.ndarray  # (kz, kh, kw, c_in, c_out)
    bias: np.ndarray  # (c_out,)
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        self.stride = _triple(self.stride)
        self.padding = _triple(self.padding)
        if self.kernel.ndim != 5:
            raise ShapeError(f"conv kernel must have 5 axes, got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[4],):
            raise ShapeError(
                f"conv bias shape {self.bias.shape} does not match c_out {self.kernel.shape[4]}"
            )


@dataclass
class Deconv3dParams:
    kernel: np.ndarray  # (kz, kh, kw, c_out, c_in)
    bias: np.ndarray  # (c_out,)
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)
    output_padding: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        self.stride = _triple(self.stride)
        self.padding = _triple(self.padding)
        self.output_padding = _triple(self.output_padding)
        if self.kernel.ndim != 5:
            raise ShapeError(f"deconv kernel must have 5 axes, got {self.kernel.shape}")
        for op, s in zip(self.output_padding, self.stride):
            if not 0 <= op < max(s, 1):
                raise ShapeError(
                    f"output_padding {self.output_padding} must lie in [0, stride) per axis"
                )
        if self.bias.shape != (self.kernel.shape[3],):
            raise ShapeError(
                f"deconv bias shape {self.bias.shape} does not match c_out {self.kernel.shape[3]}"
            )


@dataclass
class DenseParams:
    weight: np.ndarray  # (c_in, c_out)
    bias: np.ndarray  # (c_out,)


def conv_output_extent(i: int, k: int, s: int, p: int) -> int:
    return (i + 2 * p - k) // s + 1


def deconv_output_extent(i: int, k: int, s: int, p: int, op: int) -> int:
    return s * (i - 1) + k - 2 * p + op


def _sliding_view(xp: np.ndarray, k: tuple[int, int, int], s: tuple[int, int, int]):
    """Read-only strided view (n, oz, oh, ow, kz, kh, kw, c) over padded input."""
    n, zp, hp, wp, c = xp.shape
    oz = (zp - k[0]) // s[0] + 1
    oh = (hp - k[1]) // s[1] + 1
    ow = (wp - k[2]) // s[2] + 1
    sn, sz, sh, sw, sc = xp.strides
    view = as_strided(
        xp,
        shape=(n, oz, oh, ow, k[0], k[1], k[2], c),
        strides=(sn, sz * s[0], sh * s[1], sw * s[2], sz, sh, sw, sc),
        writeable=False,
    )
    return view, (oz, oh, ow)


def conv3d_forward(x: np.ndarray, p: Conv3dParams) -> LayerGrad:
    """Strided zero-padded cross-correlation.

    Output extent per axis is floor((i + 2p - k)/s) + 1. backward(gy)
    returns (gx, {"kernel": gk, "bias": gb}).
    """
    x = as_tensor5(x, "conv input")
    kz, kh, kw, c_in, c_out = p.kernel.shape
    if x.shape[4] != c_in:
        raise ShapeError(f"conv: input has {x.shape[4]} channels, kernel expects {c_in}")
    s, pad = p.stride, p.padding
    for i_ext, k_ext, s_ext, p_ext in zip(x.shape[1:4], (kz, kh, kw), s, pad):
        if conv_output_extent(i_ext, k_ext, s_ext, p_ext) < 1:
            raise ShapeError(
                f"conv: non-positive output extent for i={i_ext}, k={k_ext}, s={s_ext}, p={p_ext}"
            )
    xp = np.pad(x, ((0, 0), (pad[0], pad[0]), (pad[1], pad[1]), (pad[2], pad[2]), (0, 0)))
    view, (oz, oh, ow) = _sliding_view(xp, (kz, kh, kw), s)
    y = np.tensordot(view, p.kernel, axes=([4, 5, 6, 7], [0, 1, 2, 3])) + p.bias

    def backward(gy: np.ndarray):
        gy = np.asarray(gy, dtype=DTYPE)
        if gy.shape != y.shape:
            raise ShapeError(f"conv backward: gradient shape {gy.shape} != output {y.shape}")
        gk = np.tensordot(view, gy, axes=([0, 1, 2, 3], [0, 1, 2, 3]))
        gb = gy.sum(axis=(0, 1, 2, 3))
        gxp = np.zeros_like(xp)
        for a in range(kz):
            for b in range(kh):
                for c in range(kw):
                    contrib = np.tensordot(gy, p.kernel[a, b, c], axes=([4], [1]))
                    gxp[
                        :,
                        a : a + oz * s[0] : s[0],
                        b : b + oh * s[1] : s[1],
                        c : c + ow * s[2] : s[2],
                        :,
                    ] += contrib
        gx = gxp[
            :,
            pad[0] : pad[0] + x.shape[1],
            pad[1] : pad[1] + x.shape[2],
            pad[2] : pad[2] + x.shape[3],
            :,
        ]
        return np.ascontiguousarray(gx), {"kernel": gk, "bias": gb}

    return LayerGrad(y, backward)


def deconv3d_forward(x: np.ndarray, p: Deconv3dParams) -> LayerGrad:
    """Transposed convolution (the adjoint of conv3d as a forward op).

    Output extent per axis is s*(i-1) + k - 2p + op; with k=3, s=2, p=1,
    op=1 each spatial extent exactly doubles. backward(gy) returns
    (gx, {"kernel": gk, "bias": gb}).
    """
    x = as_tensor5(x, "deconv input")
    kz, kh, kw, c_out, c_in = p.kernel.shape
    if x.shape[4] != c_in:
        raise ShapeError(f"deconv: input has {x.shape[4]} channels, kernel expects {c_in}")
    s, pad, opad = p.stride, p.padding, p.output_padding
    iz, ih, iw = x.shape[1:4]
    out_ext = tuple(
        deconv_output_extent(i, k, st, pd, op)
        for i, k, st, pd, op in zip((iz, ih, iw), (kz, kh, kw), s, pad, opad)
    )
    if min(out_ext) < 1:
        raise ShapeError(f"deconv: non-positive output extent {out_ext}")
    big = tuple(s[d] * ([iz, ih, iw][d] - 1) + (kz, kh, kw)[d] + opad[d] for d in range(3))
    y_big = np.zeros((x.shape[0], *big, c_out), dtype=DTYPE)
    for a in range(kz):
        for b in range(kh):
            for c in range(kw):
                contrib = np.tensordot(x, p.kernel[a, b, c], axes=([4], [1]))
                y_big[
                    :,
                    a : a + iz * s[0] : s[0],
                    b : b + ih * s[1] : s[1],
                    c : c + iw * s[2] : s[2],
                    :,
                ] += contrib
    y = y_big[
        :,
        pad[0] : pad[0] + out_ext[0],
        pad[1] : pad[1] + out_ext[1],
        pad[2] : pad[2] + out_ext[2],
        :,
    ] + p.bias
    y = np.ascontiguousarray(y)

    def backward(gy: np.ndarray):
        gy = np.asarray(gy, dtype=DTYPE)
        if gy.shape != y.shape:
            raise ShapeError(f"deconv backward: gradient shape {gy.shape} != output {y.shape}")
        g_big = np.zeros_like(y_big)
        g_big[
            :,
            pad[0] : pad[0] + out_ext[0],
            pad[1] : pad[1] + out_ext[1],
            pad[2] : pad[2] + out_ext[2],
            :,
        ] = gy
        gx = np.zeros_like(x)
        gk = np.zeros_like(p.kernel)
        for a in range(kz):
            for b in range(kh):
                for c in range(kw):
                    g_slice = g_big[
                        :,
                        a : a + iz * s[0] : s[0],
                        b : b + ih * s[1] : s[1],
                        c : c + iw * s[2] : s[2],
                        :,
                    ]
                    gx += np.tensordot(g_slice, p.kernel[a, b, c], axes=([4], [0]))
                    gk[a, b, c] = np.tensordot(g_slice, x, axes=([0, 1, 2, 3], [0, 1, 2, 3]))
        gb = gy.sum(axis=(0, 1, 2, 3))
        return gx, {"kernel": gk, "bias": gb}

    return LayerGrad(y, backward)


def activation(x: np.ndarray, kind: str) -> LayerGrad:
    """relu, sigmoid, or softmax_channel (normalizes over the channel axis).

    backward(gy) returns (gx, {}).
    """
    x = np.asarray(x, dtype=DTYPE)
    if kind == "relu":
        y = np.maximum(x, 0.0)

        def backward(gy):
            return np.where(x > 0.0, gy, 0.0), {}

    elif kind == "sigmoid":
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)

        def backward(gy):
            return gy * y * (1.0 - y), {}

    elif kind == "softmax_channel":
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=-1, keepdims=True)

        def backward(gy):
            dot = (gy * y).sum(axis=-1, keepdims=True)
            return y * (gy - dot), {}

    else:
        raise ValueError(f"unknown activation kind {kind!r}")
    return LayerGrad(y, backward)


def instance_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float) -> LayerGrad:
    """Normalize each (batch, channel) slab over its spatial voxels.

    backward(gy) returns (gx, {"gamma": gg, "beta": gb}).
    """
    x = as_tensor5(x, "instance_norm input")
    if eps <= 0:
        raise ValueError(f"instance_norm eps must be > 0, got {eps}")
    gamma = np.asarray(gamma, dtype=DTYPE)
    beta = np.asarray(beta, dtype=DTYPE)
    axes = (1, 2, 3)
    mu = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    y = gamma * xhat + beta

    def backward(gy):
        gy = np.asarray(gy, dtype=DTYPE)
        gg = (gy * xhat).sum(axis=(0, 1, 2, 3))
        gb = gy.sum(axis=(0, 1, 2, 3))
        gxhat = gy * gamma
        m1 = gxhat.mean(axis=axes, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        return gx, {"gamma": gg, "beta": gb}

    return LayerGrad(y, backward)


def dropout(x: np.ndarray, rate: float, rng: Rng, training: bool) -> LayerGrad:
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time
    so inference is the identity. backward(gy) returns (gx, {}).
    """
    x = np.asarray(x, dtype=DTYPE)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return LayerGrad(x, lambda gy: (np.asarray(gy, dtype=DTYPE), {}))
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    mask = keep * scale
    return LayerGrad(x * mask, lambda gy: (np.asarray(gy, dtype=DTYPE) * mask, {}))


def dense(x: np.ndarray, p: DenseParams) -> LayerGrad:
    """Fully connected layer over (n, c_in) row vectors: y = x W + b.

    backward(gy) returns (gx, {"weight": gw, "bias": gb}).
    """
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] != p.weight.shape[0]:
        raise ShapeError(
            f"dense: input shape {x.shape} incompatible with weight {p.weight.shape}"
        )
    y = x @ p.weight + p.bias

    def backward(gy):
        gy = np.asarray(gy, dtype=DTYPE)
        return gy @ p.weight.T, {"weight": x.T @ gy, "bias": gy.sum(axis=0)}

    return LayerGrad(y, backward)


# ---------------------------------------------------------------------------
# initialization

def he_conv_kernel(rng: Rng, kz: int, kh: int, kw: int, c_in: int, c_out: int) -> np.ndarray:
    fan_in = kz * kh * kw * c_in
    return rng.normal((kz, kh, kw, c_in, c_out), scale=np.sqrt(2.0 / fan_in))


def he_deconv_kernel(rng: Rng, kz: int, kh: int, kw: int, c_out: int, c_in: int) -> np.ndarray:
    fan_in = kz * kh * kw * c_in
    return rng.normal((kz, kh, kw, c_out, c_in), scale=np.sqrt(2.0 / fan_in))


def he_dense_weight(rng: Rng, c_in: int, c_out: int) -> np.ndarray:
    return rng.normal((c_in, c_out), scale=np.sqrt(2.0 / c_in))


# ---------------------------------------------------------------------------
# parameter serialization: one .npy per tensor plus a plain-text manifest

MANIFEST_NAME = "manifest.txt"


def save_params(directory, params: dict[str, np.ndarray]) -> None:
    """Write each named array as <name>.npy plus a manifest listing
    name, shape, and file per line. Reload is bit-exact.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in params:
        arr = np.asarray(params[name], dtype=DTYPE)
        fname = name + ".npy"
        write_npy(directory / fname, arr)
        shape = "x".join(str(e) for e in arr.shape)
        lines.append(f"name={name} shape={shape} file={fname}")
    (directory / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def load_params(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"no parameter manifest at {manifest}")
    params: dict[str, np.ndarray] = {}
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = dict(tok.split("=", 1) for tok in line.split())
        arr = read_npy(directory / fields["file"])
        expect = tuple(int(v) for v in fields["shape"].split("x") if v)
        if arr.shape != expect:
            raise ValueError(
                f"{fields['file']}: shape {arr.shape} does not match manifest {expect}"
            )
        params[fields["name"]] = arr
    return params
