import numpy as np
import pytest

from agsevnet.cli import main
from agsevnet.network import NetConfig, load_checkpoint
from agsevnet.npyio import read_npy
from agsevnet.pipeline import generate_phantom, save_case
from agsevnet.rng import Rng
from agsevnet.train import (
    TrainConfig,
    train,
    train_config_from_text,
    train_config_to_text,
)


def tiny_train_config(**overrides):
    net = NetConfig(
        in_channels=4, base_width=2, depths=2, se_reduction=4,
        ag_radius=2, ag_eps=0.05, dropout=0.1, patch_shape=(16, 16, 16),
    )
    kwargs = dict(
        net=net, lr_initial=3e-3, lr_decayed=1e-3, lr_decay_step=20,
        max_steps=25, checkpoint_interval=5, seed=3,
    )
    kwargs.update(overrides)
    kwargs["lr_decay_step"] = min(kwargs["lr_decay_step"], kwargs["max_steps"])
    return TrainConfig(**kwargs)


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cases")
    rng = Rng(77)
    for k in range(2):
        case = generate_phantom(rng.derive("phantom", k), (16, 16, 16), 0.2)
        case.id = f"case{k:03d}"
        save_case(root / case.id, case)
    return root


def dir_bytes(path):
    return {
        p.relative_to(path).as_posix(): p.read_bytes()
        for p in sorted(path.rglob("*"))
        if p.is_file()
    }


class TestTrainConfig:
    def test_text_round_trip(self):
        cfg = tiny_train_config(optimizer="sgd", class_weights=(0.2, 1.0, 0.5, 1.0))
        assert train_config_from_text(train_config_to_text(cfg)) == cfg

    def test_learning_rate_schedule(self):
        cfg = tiny_train_config(lr_initial=1e-4, lr_decayed=3e-5, lr_decay_step=10)
        assert cfg.learning_rate(0) == 1e-4
        assert cfg.learning_rate(9) == 1e-4
        assert cfg.learning_rate(10) == 3e-5

    def test_validation(self):
        with pytest.raises(ValueError):
            tiny_train_config(lr_initial=-1.0)
        with pytest.raises(ValueError):
            tiny_train_config(optimizer="adagrad")
        with pytest.raises(ValueError):
            TrainConfig(net=tiny_train_config().net, lr_decay_step=100, max_steps=50)


class TestTraining:
    def test_loss_drops_and_schedule_logged(self, phantom_dir, tmp_path):
        cfg = tiny_train_config()
        train(cfg, phantom_dir, tmp_path / "run", log=lambda s: None)
        lines = (tmp_path / "run" / "losses.txt").read_text().splitlines()
        assert len(lines) == cfg.max_steps
        first = float(lines[0].split()[2])
        last = float(lines[-1].split()[2])
        assert last < first  # learning happened
        rates = [float(l.split()[1]) for l in lines]
        assert rates[:20] == [3e-3] * 20 and rates[20:] == [1e-3] * 5

    def test_two_runs_bitwise_identical(self, phantom_dir, tmp_path):
        cfg = tiny_train_config(max_steps=6, checkpoint_interval=3)
        train(cfg, phantom_dir, tmp_path / "a", log=lambda s: None)
        train(cfg, phantom_dir, tmp_path / "b", log=lambda s: None)
        assert dir_bytes(tmp_path / "a") == dir_bytes(tmp_path / "b")

    def test_resume_matches_uninterrupted(self, phantom_dir, tmp_path):
        full = tiny_train_config(max_steps=10, checkpoint_interval=5)
        train(full, phantom_dir, tmp_path / "full", log=lambda s: None)

        half = tiny_train_config(max_steps=5, checkpoint_interval=5)
        train(half, phantom_dir, tmp_path / "part", log=lambda s: None)
        train(
            full, phantom_dir, tmp_path / "part",
            resume=tmp_path / "part" / "checkpoint", log=lambda s: None,
        )
        full_losses = (tmp_path / "full" / "losses.txt").read_text()
        part_losses = (tmp_path / "part" / "losses.txt").read_text()
        assert full_losses == part_losses
        a = load_checkpoint(tmp_path / "full" / "checkpoint")
        b = load_checkpoint(tmp_path / "part" / "checkpoint")
        assert a[2] == b[2] == 10
        for k in a[0]:
            assert a[0][k].tobytes() == b[0][k].tobytes()

    def test_validation_metrics_in_report(self, phantom_dir, tmp_path):
        cfg = tiny_train_config(max_steps=4, checkpoint_interval=4)
        for sub in ("va", "vb"):
            train(cfg, phantom_dir, tmp_path / sub, val_dir=phantom_dir, log=lambda s: None)
        report = (tmp_path / "va" / "report.txt").read_text()
        lines = report.splitlines()
        header = "traversal,region,dice,sensitivity,specificity,hd95"
        assert header in lines
        val_lines = lines[lines.index(header) + 1 :]
        assert len(val_lines) >= 3  # one row per region per completed traversal
        for line in val_lines:
            region = line.split(",")[1]
            assert region in ("WT", "TC", "ET")
        assert report == (tmp_path / "vb" / "report.txt").read_text()

    def test_sgd_also_trains(self, phantom_dir, tmp_path):
        cfg = tiny_train_config(optimizer="sgd", lr_initial=1e-2, lr_decayed=1e-2,
                                lr_decay_step=0, max_steps=8, checkpoint_interval=8)
        train(cfg, phantom_dir, tmp_path / "sgd", log=lambda s: None)
        lines = (tmp_path / "sgd" / "losses.txt").read_text().splitlines()
        assert float(lines[-1].split()[2]) < float(lines[0].split()[2])


class TestGuards:
    def test_checkpoint_guard_rejects_non_finite_params(self):
        from agsevnet.train import TrainingError, _guard_finite

        params = {"w": np.ones(3)}
        _guard_finite(params, 0)
        params["w"][1] = np.nan
        with pytest.raises(TrainingError, match="non-finite parameter w"):
            _guard_finite(params, 0)


class TestPaperDefaults:
    def test_reference_hyperparameters(self):
        from agsevnet.losses import ClassWeights

        net = NetConfig()
        assert net.in_channels == 4 and net.num_classes == 4
        assert net.se_reduction == 4
        assert net.ag_radius == 16 and net.ag_eps == pytest.approx(0.1 ** 2)
        assert net.dropout == 0.5
        assert net.patch_shape == (64, 128, 128)
        cfg = TrainConfig()
        assert cfg.lr_initial == pytest.approx(1e-4)
        assert cfg.lr_decayed == pytest.approx(3e-5)
        assert ClassWeights().w == (0.1, 1.0, 1.0, 1.0)


class TestThresholdOracle:
    def test_noiseless_phantoms_separable_by_thresholding(self, tmp_path):
        from agsevnet.losses import confusion, derive_regions, metric
        from agsevnet.pipeline import load_case

        assert main([
            "phantom-gen", "-n", "5", "--shape", "24", "--difficulty", "0",
            "--seed", "31", "--out", str(tmp_path / "flat"),
        ]) == 0
        for k in range(5):
            case = load_case(tmp_path / "flat" / f"case{k:03d}")
            flair = case.modalities[3]
            wt_guess = flair > 0.5  # tumor plateaus sit well above brain tissue
            wt_true = derive_regions(case.labels)["WT"]
            dice = metric("dice", confusion(wt_guess, wt_true))
            assert dice >= 0.99


class TestCli:
    def test_phantom_gen_deterministic(self, tmp_path, capsys):
        for sub in ("a", "b"):
            rc = main([
                "phantom-gen", "-n", "2", "--shape", "16", "--difficulty", "0.2",
                "--seed", "9", "--out", str(tmp_path / sub),
            ])
            assert rc == 0
        assert dir_bytes(tmp_path / "a") == dir_bytes(tmp_path / "b")

    def test_phantom_gen_nesting(self, tmp_path):
        from agsevnet.losses import derive_regions
        from agsevnet.pipeline import load_case

        assert main([
            "phantom-gen", "-n", "3", "--shape", "16,16,16", "--seed", "4",
            "--out", str(tmp_path / "cases"),
        ]) == 0
        for k in range(3):
            case = load_case(tmp_path / "cases" / f"case{k:03d}")
            masks = derive_regions(case.labels)
            assert np.all(masks["ET"] <= masks["TC"]) and np.all(masks["TC"] <= masks["WT"])

    def test_preprocess_writes_patch_pairs(self, phantom_dir, tmp_path):
        assert main([
            "preprocess", "--data", str(phantom_dir), "--out", str(tmp_path / "pp"),
            "--patch", "16",
        ]) == 0
        files = sorted((tmp_path / "pp" / "case000").glob("*.npy"))
        assert [f.name for f in files] == ["img_0000.npy", "lbl_0000.npy"]
        img = read_npy(files[0])
        assert img.shape == (1, 16, 16, 16, 4)

    def test_train_predict_evaluate_round_trip(self, phantom_dir, tmp_path):
        config_text = train_config_to_text(tiny_train_config(max_steps=5, checkpoint_interval=5))
        cfg_file = tmp_path / "train.cfg"
        cfg_file.write_text(config_text)
        assert main([
            "train", "--config", str(cfg_file), "--data", str(phantom_dir),
            "--out", str(tmp_path / "run"),
        ]) == 0
        checkpoint = tmp_path / "run" / "checkpoint"

        for sub in ("p1", "p2"):
            assert main([
                "predict", "--checkpoint", str(checkpoint), "--data", str(phantom_dir),
                "--out", str(tmp_path / sub),
            ]) == 0
        assert dir_bytes(tmp_path / "p1") == dir_bytes(tmp_path / "p2")
        labels = read_npy(tmp_path / "p1" / "case000.npy")
        assert labels.shape == (16, 16, 16)
        assert set(np.unique(labels)) <= {0, 1, 2, 4}

        assert main([
            "evaluate", "--pred", str(tmp_path / "p1"), "--truth", str(phantom_dir),
            "--out", str(tmp_path / "report.csv"),
        ]) == 0
        report = (tmp_path / "report.csv").read_text()
        assert report.startswith("case_id,region,")

    def test_evaluate_identity_scores_perfect(self, phantom_dir, tmp_path):
        from agsevnet.pipeline import load_case
        from agsevnet.npyio import write_npy

        pred = tmp_path / "ident"
        pred.mkdir()
        for case_dir in sorted(phantom_dir.iterdir()):
            labels = load_case(case_dir).labels
            write_npy(pred / f"{case_dir.name}.npy", labels)
        assert main([
            "evaluate", "--pred", str(pred), "--truth", str(phantom_dir),
            "--out", str(tmp_path / "r.csv"),
        ]) == 0
        report = (tmp_path / "r.csv").read_text()
        rows = [l for l in report.splitlines() if l.startswith("case0")]
        assert len(rows) == 6  # 2 cases x 3 regions
        for line in rows:
            fields = line.split(",")
            assert fields[2] == "1.000000" and fields[5] == "0.000000"

    def test_evaluate_reports_are_byte_identical(self, phantom_dir, tmp_path):
        from agsevnet.npyio import write_npy
        from agsevnet.pipeline import load_case

        pred = tmp_path / "pred"
        pred.mkdir()
        for case_dir in sorted(phantom_dir.iterdir()):
            write_npy(pred / f"{case_dir.name}.npy", load_case(case_dir).labels)
        for sub in ("r1.csv", "r2.csv"):
            assert main([
                "evaluate", "--pred", str(pred), "--truth", str(phantom_dir),
                "--out", str(tmp_path / sub),
            ]) == 0
        assert (tmp_path / "r1.csv").read_bytes() == (tmp_path / "r2.csv").read_bytes()

    def test_missing_counterpart_case_fails_validation(self, phantom_dir, tmp_path):
        from agsevnet.npyio import write_npy

        pred = tmp_path / "orphan"
        pred.mkdir()
        write_npy(pred / "nosuch.npy", np.zeros((4, 4, 4), dtype=np.uint8))
        rc = main([
            "evaluate", "--pred", str(pred), "--truth", str(phantom_dir),
            "--out", str(tmp_path / "r.csv"),
        ])
        assert rc == 1

    def test_gradcheck_loss_scope(self, capsys):
        assert main(["gradcheck", "--scope", "loss", "--seed", "0"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "max_rel_err" in out

    def test_bad_inputs_exit_one(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "void"), "--out", str(tmp_path / "o")]) == 1
        assert main(["phantom-gen", "-n", "1", "--shape", "8", "--out", str(tmp_path / "p")]) == 1
