"""Registered verification checks for the gradcheck command.

Each scope bundles the finite-difference and oracle comparisons for one
subsystem at desk scale. The same functions back the test suite, so the
CLI surface and pytest agree by construction.
"""

from __future__ import annotations

import numpy as np

from .ag import AgParams, ag_fit, ag_forward, box_sum
from .gradcheck import CheckResult, max_rel_err, numeric_grad, random_sample_indices
from .layers import (
    Conv3dParams,
    Deconv3dParams,
    DenseParams,
    activation,
    conv3d_forward,
    deconv3d_forward,
    dense,
    instance_norm,
)
from .losses import ClassWeights, dice_grad_closed_form, dice_loss
from .network import NetConfig, build, forward
from .rng import Rng
from .se import SeParams, se_forward


def _rand(rng: Rng, shape):
    return rng.uniform(-1.0, 1.0, shape)


def _away_from_kinks(x: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    """Nudge values off the ReLU kink so finite differences stay clean."""
    return np.where(np.abs(x) < margin, np.sign(x) * margin + (x == 0) * margin, x)


def check_layers(seed: int = 0) -> list[CheckResult]:
    rng = Rng(seed).derive("layers")
    results = []

    # conv3d: input and parameter gradients
    x = _rand(rng.derive("conv_x"), (1, 4, 5, 4, 2))
    kernel = _rand(rng.derive("conv_k"), (3, 3, 3, 2, 3)) * 0.5
    bias = _rand(rng.derive("conv_b"), (3,)) * 0.1
    probe = rng.derive("conv_probe").normal((1, 4, 5, 4, 3))

    def conv_out(xv, kv, bv):
        return conv3d_forward(xv, Conv3dParams(kv, bv, stride=1, padding=1))

    lg = conv_out(x, kernel, bias)
    gx, gp = lg.backward(probe)
    results.append(CheckResult(
        "conv3d/input",
        max_rel_err(gx, numeric_grad(lambda v: float((conv_out(v, kernel, bias).output * probe).sum()), x)),
        1e-5,
    ))
    results.append(CheckResult(
        "conv3d/kernel",
        max_rel_err(gp["kernel"], numeric_grad(
            lambda v: float((conv_out(x, v, bias).output * probe).sum()), kernel)),
        1e-5,
    ))
    results.append(CheckResult(
        "conv3d/bias",
        max_rel_err(gp["bias"], numeric_grad(
            lambda v: float((conv_out(x, kernel, v).output * probe).sum()), bias)),
        1e-5,
    ))

    # strided conv
    xs = _rand(rng.derive("convs_x"), (1, 6, 6, 6, 2))
    probe_s = rng.derive("convs_probe").normal((1, 3, 3, 3, 3))
    lg = conv3d_forward(xs, Conv3dParams(kernel, bias, stride=2, padding=1))
    gx, gp = lg.backward(probe_s)
    results.append(CheckResult(
        "conv3d/strided_input",
        max_rel_err(gx, numeric_grad(
            lambda v: float((conv3d_forward(v, Conv3dParams(kernel, bias, stride=2, padding=1)).output * probe_s).sum()),
            xs)),
        1e-5,
    ))

    # deconv3d
    xd = _rand(rng.derive("dec_x"), (1, 3, 3, 3, 3))
    kd = _rand(rng.derive("dec_k"), (3, 3, 3, 2, 3)) * 0.5
    bd = _rand(rng.derive("dec_b"), (2,)) * 0.1

    def dec_out(xv, kv, bv):
        return deconv3d_forward(
            xv, Deconv3dParams(kv, bv, stride=2, padding=1, output_padding=1)
        )

    probe_d = rng.derive("dec_probe").normal(dec_out(xd, kd, bd).output.shape)
    lg = dec_out(xd, kd, bd)
    gx, gp = lg.backward(probe_d)
    results.append(CheckResult(
        "deconv3d/input",
        max_rel_err(gx, numeric_grad(
            lambda v: float((dec_out(v, kd, bd).output * probe_d).sum()), xd)),
        1e-5,
    ))
    results.append(CheckResult(
        "deconv3d/kernel",
        max_rel_err(gp["kernel"], numeric_grad(
            lambda v: float((dec_out(xd, v, bd).output * probe_d).sum()), kd)),
        1e-5,
    ))

    # dense
    xv = _rand(rng.derive("dense_x"), (3, 6))
    wv = _rand(rng.derive("dense_w"), (6, 4))
    bv = _rand(rng.derive("dense_b"), (4,))
    probe_f = rng.derive("dense_probe").normal((3, 4))
    lg = dense(xv, DenseParams(wv, bv))
    gx, gp = lg.backward(probe_f)
    results.append(CheckResult(
        "dense/input",
        max_rel_err(gx, numeric_grad(
            lambda v: float((dense(v, DenseParams(wv, bv)).output * probe_f).sum()), xv)),
        1e-5,
    ))
    results.append(CheckResult(
        "dense/weight",
        max_rel_err(gp["weight"], numeric_grad(
            lambda v: float((dense(xv, DenseParams(v, bv)).output * probe_f).sum()), wv)),
        1e-5,
    ))

    # instance norm
    xn = _rand(rng.derive("in_x"), (2, 3, 4, 3, 2)) * 2.0
    gamma = _rand(rng.derive("in_g"), (2,)) + 1.5
    beta = _rand(rng.derive("in_b"), (2,))
    probe_n = rng.derive("in_probe").normal(xn.shape)
    lg = instance_norm(xn, gamma, beta, 1e-5)
    gx, gp = lg.backward(probe_n)
    results.append(CheckResult(
        "instance_norm/input",
        max_rel_err(gx, numeric_grad(
            lambda v: float((instance_norm(v, gamma, beta, 1e-5).output * probe_n).sum()), xn)),
        1e-5,
    ))
    results.append(CheckResult(
        "instance_norm/gamma",
        max_rel_err(gp["gamma"], numeric_grad(
            lambda v: float((instance_norm(xn, v, beta, 1e-5).output * probe_n).sum()), gamma)),
        1e-5,
    ))

    # activations (relu probed away from its kink)
    xa = _away_from_kinks(_rand(rng.derive("act_x"), (1, 3, 3, 3, 4)))
    probe_a = rng.derive("act_probe").normal(xa.shape)
    for kind in ("relu", "sigmoid", "softmax_channel"):
        ga, _ = activation(xa, kind).backward(probe_a)
        numeric = numeric_grad(
            lambda v, k=kind: float((activation(v, k).output * probe_a).sum()), xa
        )
        results.append(CheckResult(f"activation/{kind}", max_rel_err(ga, numeric), 1e-5))
    return results


def check_se(seed: int = 0) -> list[CheckResult]:
    rng = Rng(seed).derive("se")
    c, m = 8, 4
    u = _rand(rng.derive("u"), (2, 2, 3, 2, c))
    p = SeParams(
        m,
        DenseParams(_rand(rng.derive("w1"), (c, c // m)), _rand(rng.derive("b1"), (c // m,)) * 0.1),
        DenseParams(_rand(rng.derive("w2"), (c // m, c)), _rand(rng.derive("b2"), (c,)) * 0.1),
    )
    probe = rng.derive("probe").normal(u.shape)
    lg = se_forward(u, p)
    gu, gp = lg.backward(probe)
    results = [CheckResult(
        "se/input",
        max_rel_err(gu, numeric_grad(
            lambda v: float((se_forward(v, p).output * probe).sum()), u, refine=True)),
        1e-5,
    )]
    for pname, arr, setter in (
        ("fc1.weight", p.fc1.weight, lambda v: SeParams(m, DenseParams(v, p.fc1.bias), p.fc2)),
        ("fc2.weight", p.fc2.weight, lambda v: SeParams(m, p.fc1, DenseParams(v, p.fc2.bias))),
    ):
        results.append(CheckResult(
            f"se/{pname}",
            max_rel_err(gp[pname], numeric_grad(
                lambda v: float((se_forward(u, setter(v)).output * probe).sum()), arr,
                refine=True)),
            1e-5,
        ))
    return results


def _small_ag_params(rng: Rng, c: int, radius: int = 2, eps: float = 0.05) -> AgParams:
    def conv1(c_in, c_out, key):
        return Conv3dParams(
            _rand(rng.derive(key), (1, 1, 1, c_in, c_out)) * 0.7,
            _rand(rng.derive(key + "b"), (c_out,)) * 0.1,
        )

    return AgParams(
        radius=radius,
        eps=eps,
        attn_o=conv1(c, c, "ao"),
        attn_i=conv1(c, c, "ai"),
        attn_gate=conv1(c, 1, "ag"),
    )


def check_ag(seed: int = 0) -> list[CheckResult]:
    rng = Rng(seed).derive("ag")
    results = []

    # full AG block gradient, guidance at 2x the filtered map's grid
    c = 2
    i = _rand(rng.derive("i"), (1, 8, 8, 8, c))
    o = _rand(rng.derive("o"), (1, 4, 4, 4, c))
    p = _small_ag_params(rng.derive("params"), c)
    probe = rng.derive("probe").normal(i.shape[:4] + (c,))
    lg = ag_forward(i, o, p)
    (gi, go), gp = lg.backward(probe)
    results.append(CheckResult(
        "ag/guidance_input",
        max_rel_err(gi, numeric_grad(
            lambda v: float((ag_forward(v, o, p).output * probe).sum()), i, refine=True)),
        1e-4,
    ))
    results.append(CheckResult(
        "ag/filtered_input",
        max_rel_err(go, numeric_grad(
            lambda v: float((ag_forward(i, v, p).output * probe).sum()), o, refine=True)),
        1e-4,
    ))

    def with_gate_kernel(v):
        return AgParams(p.radius, p.eps, p.attn_o, p.attn_i,
                        Conv3dParams(v, p.attn_gate.bias), p.align)

    results.append(CheckResult(
        "ag/attn_gate.kernel",
        max_rel_err(gp["attn_gate.kernel"], numeric_grad(
            lambda v: float((ag_forward(i, o, with_gate_kernel(v)).output * probe).sum()),
            p.attn_gate.kernel, refine=True)),
        1e-4,
    ))

    # weighted fit against per-window normal equations
    il = _rand(rng.derive("fit_i"), (1, 6, 6, 6, 1))
    ol = _rand(rng.derive("fit_o"), (1, 6, 6, 6, 1))
    t = rng.derive("fit_t").uniform(0.05, 1.0, (1, 6, 6, 6, 1))
    for r in (1, 2, 3):
        got = ag_fit(il, ol, t, r, 0.01)
        want_a, want_b = fit_oracle(il[0, ..., 0], ol[0, ..., 0], t[0, ..., 0], r, 0.01)
        err = max(
            float(np.abs(got.A[0, ..., 0] - want_a).max()),
            float(np.abs(got.B[0, ..., 0] - want_b).max()),
        )
        results.append(CheckResult(f"ag/fit_vs_normal_equations_r{r}", err, 1e-10))

    # box sums against the naive window oracle
    vol = rng.derive("box").normal((1, 7, 6, 5, 2))
    err = float(np.abs(box_sum(vol, 2) - box_sum_oracle(vol, 2)).max())
    results.append(CheckResult("ag/box_sum_vs_naive", err, 1e-12))
    return results


def check_net(seed: int = 0) -> list[CheckResult]:
    rng = Rng(seed).derive("net")
    config = NetConfig(
        in_channels=2, base_width=2, depths=2, se_reduction=4,
        ag_radius=2, ag_eps=0.05, dropout=0.0, patch_shape=(16, 16, 16),
    )
    params = build(config, rng.derive("params"))
    x = _rand(rng.derive("x"), (1, 16, 16, 16, 2))
    g = np.zeros((1, 16, 16, 16, 4))
    lbl = rng.derive("lbl").integers(0, 4, (1, 16, 16, 16))
    for cls in range(4):
        g[..., cls] = lbl == cls
    weights = ClassWeights()

    def loss_of(p_dict):
        lg = forward(x, p_dict, config, training=False)
        return dice_loss(lg.output, g, weights)[0]

    lg = forward(x, params, config, training=False)
    loss, grad_p = dice_loss(lg.output, g, weights)
    gx, grads = lg.backward(grad_p)

    sample_rng = rng.derive("sample")
    names = sorted(params)
    errs = []
    budget = 60
    per_name = max(1, budget // len(names))
    for name in names:
        arr = params[name]
        idx = random_sample_indices(sample_rng.derive(name), arr.size, per_name)

        def loss_at(v, _name=name):
            trial = dict(params)
            trial[_name] = v
            return loss_of(trial)

        numeric = numeric_grad(loss_at, arr, indices=idx, refine=True)
        errs.append(max_rel_err(grads[name], numeric))
    results = [CheckResult("net/parameter_sample", max(errs), 1e-4)]

    probe_idx = random_sample_indices(rng.derive("xidx"), x.size, 20)
    numeric_x = numeric_grad(
        lambda v: dice_loss(forward(v, params, config, training=False).output, g, weights)[0],
        x,
        indices=probe_idx,
        refine=True,
    )
    results.append(CheckResult("net/input", max_rel_err(gx, numeric_x), 1e-4))
    return results


def check_loss(seed: int = 0) -> list[CheckResult]:
    rng = Rng(seed).derive("loss")
    results = []
    shape = (1, 4, 4, 4, 4)
    logits = _rand(rng.derive("logits"), shape) * 2.0
    lbl = rng.derive("lbl").integers(0, 4, shape[:4])
    g = np.zeros(shape)
    for cls in range(4):
        g[..., cls] = lbl == cls
    weights = ClassWeights()

    def loss_of(lv):
        probs = activation(lv, "softmax_channel").output
        return dice_loss(probs, g, weights)[0]

    lg_soft = activation(logits, "softmax_channel")
    loss, grad_p = dice_loss(lg_soft.output, g, weights)
    grad_logits, _ = lg_soft.backward(grad_p)
    numeric = numeric_grad(loss_of, logits)
    results.append(CheckResult("loss/grad_on_logits", max_rel_err(grad_logits, numeric), 1e-6))

    # closed-form gradient vs the composed backward, per class
    probs = lg_soft.output
    closed = dice_grad_closed_form(probs, g)
    w = np.asarray(weights.w)
    composed = dice_loss(probs, g, weights)[1]
    recomposed = -(w / w.sum()) * closed
    err = float(np.abs(composed - recomposed).max())
    results.append(CheckResult("loss/closed_form_vs_composed", err, 1e-10))
    return results


# ---------------------------------------------------------------------------
# scalar oracles shared with the tests

def box_sum_oracle(x: np.ndarray, r: int) -> np.ndarray:
    """Naive O(n * window) clipped window sum."""
    n, z, h, w, c = x.shape
    out = np.zeros_like(x)
    for k in range(z):
        for i in range(h):
            for j in range(w):
                zs = slice(max(0, k - r), min(z, k + r + 1))
                hs = slice(max(0, i - r), min(h, i + r + 1))
                ws = slice(max(0, j - r), min(w, j + r + 1))
                out[:, k, i, j, :] = x[:, zs, hs, ws, :].sum(axis=(1, 2, 3))
    return out


def fit_oracle(i_vol: np.ndarray, o_vol: np.ndarray, t_vol: np.ndarray,
               r: int, eps: float):
    """Independent per-window 2x2 weighted normal-equations solve plus
    explicit covering-window averaging, on single-channel volumes.
    """
    z, h, w = i_vol.shape
    q = t_vol * t_vol
    q = q * (q.size / q.sum())
    a_win = np.zeros_like(i_vol)
    b_win = np.zeros_like(i_vol)
    for k in range(z):
        for i in range(h):
            for j in range(w):
                zs = slice(max(0, k - r), min(z, k + r + 1))
                hs = slice(max(0, i - r), min(h, i + r + 1))
                ws = slice(max(0, j - r), min(w, j + r + 1))
                qw = q[zs, hs, ws].ravel()
                iw = i_vol[zs, hs, ws].ravel()
                ow = o_vol[zs, hs, ws].ravel()
                s = qw.sum()
                if s < 1e-12:
                    a_win[k, i, j] = 0.0
                    b_win[k, i, j] = ow.mean()
                    continue
                count = qw.size
                mat = np.array(
                    [[(qw * iw * iw).sum() + eps * count, (qw * iw).sum()],
                     [(qw * iw).sum(), s]]
                )
                rhs = np.array([(qw * iw * ow).sum(), (qw * ow).sum()])
                a_win[k, i, j], b_win[k, i, j] = np.linalg.solve(mat, rhs)
    coeff_a = np.zeros_like(i_vol)
    coeff_b = np.zeros_like(i_vol)
    for k in range(z):
        for i in range(h):
            for j in range(w):
                zs = slice(max(0, k - r), min(z, k + r + 1))
                hs = slice(max(0, i - r), min(h, i + r + 1))
                ws = slice(max(0, j - r), min(w, j + r + 1))
                coeff_a[k, i, j] = a_win[zs, hs, ws].mean()
                coeff_b[k, i, j] = b_win[zs, hs, ws].mean()
    return coeff_a, coeff_b
