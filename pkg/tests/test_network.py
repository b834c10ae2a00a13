import numpy as np
import pytest

import agsevnet.network as network
from agsevnet.losses import ClassWeights, dice_loss
from agsevnet.network import (
    NetConfig,
    build,
    config_from_text,
    config_to_text,
    forward,
    load_checkpoint,
    predict_labels,
    save_checkpoint,
)
from agsevnet.rng import Rng
from agsevnet.tensor import ShapeError


def tiny_config(**overrides):
    kwargs = dict(
        in_channels=2, base_width=2, depths=2, se_reduction=4,
        ag_radius=2, ag_eps=0.05, dropout=0.0, patch_shape=(16, 16, 16),
    )
    kwargs.update(overrides)
    return NetConfig(**kwargs)


def one_hot(lbl):
    g = np.zeros(lbl.shape + (4,))
    for c in range(4):
        g[..., c] = lbl == c
    return g


class TestConfig:
    def test_minimum_patch_accepted(self):
        cfg = tiny_config(patch_shape=(16, 16, 16))
        assert cfg.patch_shape == (16, 16, 16)

    def test_indivisible_patch_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            tiny_config(patch_shape=(20, 16, 16))

    def test_num_classes_fixed(self):
        with pytest.raises(ValueError):
            tiny_config(num_classes=3)

    def test_depths_bounded(self):
        tiny_config(depths=3)
        with pytest.raises(ValueError):
            tiny_config(depths=4)

    def test_stage_widths_double(self):
        cfg = tiny_config(base_width=4)
        assert [cfg.width(e) for e in range(1, 6)] == [4, 8, 16, 32, 64]

    def test_text_round_trip(self):
        cfg = tiny_config(base_width=4, dropout=0.25, patch_shape=(16, 32, 32))
        assert config_from_text(config_to_text(cfg)) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            config_from_text("bogus=7\n")


class TestBuild:
    def test_identical_seeds_identical_params(self):
        cfg = tiny_config()
        a = build(cfg, Rng(5))
        b = build(cfg, Rng(5))
        assert sorted(a) == sorted(b)
        for name in a:
            assert a[name].tobytes() == b[name].tobytes()

    def test_distinct_seeds_differ(self):
        cfg = tiny_config()
        a = build(cfg, Rng(5))
        b = build(cfg, Rng(6))
        assert any(not np.array_equal(a[k], b[k]) for k in a)

    def test_parameter_count_closed_form(self):
        cfg = NetConfig(
            in_channels=4, base_width=16, depths=2, se_reduction=4,
            ag_radius=16, ag_eps=0.01, dropout=0.5, patch_shape=(16, 16, 16),
        )
        params = build(cfg, Rng(0))
        total = sum(v.size for v in params.values())

        def conv(cin, cout, k=3, norm=True):
            return k ** 3 * cin * cout + cout + (2 * cout if norm else 0)

        def se(c, m):
            m = min(m, c)
            hidden = c // m
            return c * hidden + hidden + hidden * c + c

        def ag(c):
            return conv(c, c, 1, norm=False) + conv(c, c, 1, norm=False) + conv(c, 1, 1, norm=False)

        w = [16 * 2 ** e for e in range(5)]
        expect = 0
        for e in range(5):
            cin = 4 if e == 0 else w[e]
            expect += conv(cin, w[e]) + conv(w[e], w[e])  # depth-2 stack
            expect += se(w[e], 4)
            if e < 4:
                expect += conv(w[e], w[e + 1])  # strided downsample
        for d in range(4):
            ww = w[3 - d]
            expect += conv(w[4 - d], ww) + ag(ww) + conv(ww, ww) + conv(ww, ww)  # up, ag, stack
        expect += conv(16, 4, 1, norm=False)  # head
        assert total == expect


class TestForward:
    def test_zero_head_gives_uniform_quarter(self):
        cfg = tiny_config()
        params = build(cfg, Rng(1))
        params["head.kernel"] = np.zeros_like(params["head.kernel"])
        params["head.bias"] = np.zeros_like(params["head.bias"])
        x = Rng(2).normal((1, 16, 16, 16, 2))
        out = forward(x, params, cfg).output
        assert np.all(out == 0.25)

    @pytest.mark.parametrize("patch", [16, 32])
    @pytest.mark.parametrize("base_width", [2, 4])
    def test_shape_contract(self, patch, base_width):
        cfg = tiny_config(base_width=base_width, patch_shape=(patch,) * 3)
        params = build(cfg, Rng(3))
        x = Rng(4).normal((1, patch, patch, patch, 2))
        out = forward(x, params, cfg).output
        assert out.shape == (1, patch, patch, patch, 4)
        assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-12
        assert np.all(out > 0) and np.all(out < 1)

    def test_inference_deterministic_bitwise(self):
        cfg = tiny_config()
        params = build(cfg, Rng(5))
        x = Rng(6).normal((1, 16, 16, 16, 2))
        a = forward(x, params, cfg, training=False).output
        b = forward(x, params, cfg, training=False).output
        assert a.tobytes() == b.tobytes()

    def test_training_dropout_changes_with_stream(self):
        cfg = tiny_config(dropout=0.5)
        params = build(cfg, Rng(7))
        x = Rng(8).normal((1, 16, 16, 16, 2))
        a = forward(x, params, cfg, training=True, rng=Rng(0)).output
        b = forward(x, params, cfg, training=True, rng=Rng(0)).output
        c = forward(x, params, cfg, training=True, rng=Rng(1)).output
        assert a.tobytes() == b.tobytes()
        assert a.tobytes() != c.tobytes()

    def test_shape_mismatch_rejected(self):
        cfg = tiny_config()
        params = build(cfg, Rng(9))
        with pytest.raises(ShapeError):
            forward(Rng(10).normal((1, 16, 16, 16, 4)), params, cfg)

    def test_skip_connection_reaches_output(self, monkeypatch):
        cfg = tiny_config()
        params = build(cfg, Rng(11))
        x = Rng(12).normal((1, 16, 16, 16, 2))
        base = forward(x, params, cfg).output

        real_ag = network.ag_forward
        full_res = (16, 16, 16)

        def zero_first_skip(i, o, p):
            if i.shape[1:4] == full_res:  # the stage-1 skip feeds the last decoder
                return real_ag(np.zeros_like(i), o, p)
            return real_ag(i, o, p)

        monkeypatch.setattr(network, "ag_forward", zero_first_skip)
        cut = forward(x, params, cfg).output
        assert np.abs(cut - base).max() > 1e-9

    def test_no_structurally_dead_parameters_at_32(self):
        # A wiring bug silences a tensor at every seed; a data-dependent
        # dead ReLU (possible in the one-unit SE squeeze at desk widths)
        # moves around with the seed. Assert no tensor is dead across all
        # seeds, and that typical seeds are fully live.
        cfg = tiny_config(patch_shape=(32, 32, 32))
        dead_sets = []
        for seed in (13, 14, 15):
            params = build(cfg, Rng(seed))
            x = Rng(seed + 100).normal((1, 32, 32, 32, 2))
            g = one_hot(Rng(seed + 200).integers(0, 4, (1, 32, 32, 32)))
            lg = forward(x, params, cfg)
            _, grad_p = dice_loss(lg.output, g, ClassWeights())
            _, grads = lg.backward(grad_p)
            dead_sets.append({k for k in params if np.abs(grads[k]).max() == 0.0})
            for name in dead_sets[-1]:
                assert ".se.fc" in name  # only the narrow SE gate may idle
        assert set.intersection(*dead_sets) == set()


class TestPredictLabels:
    def test_clear_argmax(self):
        probs = np.zeros((1, 1, 1, 1, 4))
        probs[0, 0, 0, 0] = [0.7, 0.1, 0.1, 0.1]
        assert predict_labels(probs)[0, 0, 0, 0] == 0

    def test_channel_three_maps_to_label_four(self):
        probs = np.zeros((1, 1, 1, 1, 4))
        probs[0, 0, 0, 0] = [0.1, 0.1, 0.1, 0.7]
        assert predict_labels(probs)[0, 0, 0, 0] == 4

    def test_tie_breaks_to_lower_channel(self):
        probs = np.full((1, 2, 2, 2, 4), 0.25)
        assert np.all(predict_labels(probs) == 0)

    def test_label_alphabet(self):
        probs = Rng(16).random((1, 4, 4, 4, 4))
        probs /= probs.sum(axis=-1, keepdims=True)
        labels = predict_labels(probs)
        assert set(np.unique(labels)) <= {0, 1, 2, 4}


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        cfg = tiny_config()
        params = build(cfg, Rng(17))
        extra = {"m.head.kernel": Rng(18).normal(params["head.kernel"].shape)}
        save_checkpoint(tmp_path / "ck", params, cfg, 123, extra=extra)
        p2, cfg2, step, extra2 = load_checkpoint(tmp_path / "ck")
        assert cfg2 == cfg and step == 123
        assert sorted(p2) == sorted(params)
        for k in params:
            assert params[k].tobytes() == p2[k].tobytes()
        assert extra2["m.head.kernel"].tobytes() == extra["m.head.kernel"].tobytes()
