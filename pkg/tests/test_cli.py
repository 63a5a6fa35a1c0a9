import hashlib
import math

import numpy as np
import pytest

from cesynth.cli import (EXIT_CONFIG, EXIT_DATA, EXIT_OK, GRID_COLUMNS, RunConfigError, build_parser,
                         dump_run_config, main, parse_run_config, read_pgm, write_pgm)
from cesynth.data import enhancement_contract, load_dataset, load_study
from cesynth.losses import make_mask

TINY_INI = """
[model]
widths = 2, 4, 8
resblocks_per_module = 1

[train]
batch_size = 1
steps_per_epoch = 1

[phantom]
shape = 6, 16, 16
tumor_count = 1
tumor_radius = 1.5, 2.0
vessel_length = 8
"""


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY_INI)
    assert main(["phantom", "--config", str(cfg), "--count", "2", "--seed", "3", "--out", str(root / "data")]) == 0
    return root, cfg


@pytest.fixture(scope="module")
def trained(workspace):
    root, cfg = workspace
    out = root / "run"
    code = main(["train", "--config", str(cfg), "--data", str(root / "data"), "--steps", "3", "--quiet",
                 "--out", str(out)])
    assert code == EXIT_OK
    return out


class TestRunConfig:
    def test_defaults_round_trip(self):
        cfg = parse_run_config("")
        assert parse_run_config(dump_run_config(cfg)) == cfg

    def test_stage_sections(self):
        cfg = parse_run_config("[stage.1]\nepochs = 3\nlearning_rate = 0.01\nlambda3 = 5\n")
        assert len(cfg.train.stages) == 1
        s = cfg.train.stages[0]
        assert (s.epochs, s.learning_rate, s.lambda1, s.lambda3) == (3, 0.01, 1.0, 5.0)

    def test_unknown_key(self):
        with pytest.raises(RunConfigError, match="unknown key"):
            parse_run_config("[train]\nbatchsize = 3\n")

    def test_unknown_section(self):
        with pytest.raises(RunConfigError, match="unknown section"):
            parse_run_config("[optimizer]\nlr = 1\n")

    def test_bad_value(self):
        with pytest.raises(RunConfigError):
            parse_run_config("[train]\nbatch_size = three\n")


class TestPgm:
    def test_round_trip(self, tmp_path, rng):
        img = rng.uniform(size=(5, 7))
        write_pgm(tmp_path / "a.pgm", img)
        back = read_pgm(tmp_path / "a.pgm")
        np.testing.assert_array_equal(back, np.round(img * 255).astype(np.uint8))


class TestPhantomCommand:
    def test_count_and_manifests(self, workspace):
        root, _ = workspace
        studies = load_dataset(root / "data")
        assert len(studies) == 2
        assert (root / "data/config.ini").is_file()

    def test_contract(self, workspace):
        root, _ = workspace
        for s in load_dataset(root / "data"):
            # Vessel masks are not stored, so only the tumor side is checkable after loading.
            assert enhancement_contract(s)["tumor_min"] > 0.1
            mask = make_mask(s.ce_t1.data, s.t1.data, 0.1) > 0
            assert np.all(mask[s.tumor_mask.data > 0])

    def test_same_seed_identical_bytes(self, workspace):
        root, cfg = workspace
        for d in ("p1", "p2"):
            assert main(["phantom", "--config", str(cfg), "--count", "2", "--seed", "3", "--out", str(root / d)]) == 0
        assert tree_digest(root / "p1") == tree_digest(root / "p2") == tree_digest(root / "data")

    def test_non_empty_out_rejected(self, workspace, capsys):
        root, cfg = workspace
        assert main(["phantom", "--config", str(cfg), "--count", "1", "--out", str(root / "data")]) == EXIT_CONFIG
        assert "--force" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[phantom]\ncolour = blue\n")
        assert main(["phantom", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_out_from_environment(self, workspace, tmp_path, monkeypatch):
        _, cfg = workspace
        monkeypatch.setenv("CESYNTH_OUT", str(tmp_path / "env"))
        assert main(["phantom", "--config", str(cfg), "--count", "1"]) == 0
        assert len(load_dataset(tmp_path / "env")) == 1


class TestTrainSynthEval:
    def test_train_outputs(self, trained):
        log = (trained / "train.log").read_text().splitlines()
        assert sum(1 for l in log if not l.startswith("#")) == 3
        assert (trained / "config.ini").is_file()

    def test_stage_two_switch_at_epoch_41(self, workspace, capsys):
        root, cfg = workspace
        code = main(["train", "--config", str(cfg), "--data", str(root / "data"), "--steps", "41",
                     "--out", str(root / "switch")])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "# stage 2 begins at epoch 41 (step 41): lr=1e-05 lambda=(0.1, 0.1, 10)" in out
        assert out.count(",1,0.0001,") == 40 and out.count(",2,1e-05,") == 1

    def test_resume_matches_uninterrupted(self, workspace, tmp_path):
        root, _ = workspace
        cfg = tmp_path / "ck.ini"
        cfg.write_text(TINY_INI.replace("steps_per_epoch = 1", "steps_per_epoch = 1\ncheckpoint_every = 2"))
        data = str(root / "data")
        assert main(["train", "--config", str(cfg), "--data", data, "--steps", "4", "--quiet",
                     "--out", str(tmp_path / "full")]) == EXIT_OK
        assert main(["train", "--config", str(cfg), "--data", data, "--steps", "2", "--quiet",
                     "--out", str(tmp_path / "part")]) == EXIT_OK
        assert main(["train", "--data", data, "--steps", "4", "--quiet",
                     "--resume", str(tmp_path / "part/step_000002.ckpt"), "--out", str(tmp_path / "part")]) == 0
        assert (tmp_path / "part/train.log").read_bytes() == (tmp_path / "full/train.log").read_bytes()
        a = (tmp_path / "full/step_000004.ckpt").read_bytes()
        assert a == (tmp_path / "part/step_000004.ckpt").read_bytes()

    def test_synth(self, workspace, tmp_path):
        root, cfg = workspace
        run = tmp_path / "full"
        cfgfile = tmp_path / "c.ini"
        cfgfile.write_text(TINY_INI + "\n[stage.1]\nepochs = 2\nlearning_rate = 0.001\n")
        assert main(["train", "--config", str(cfgfile), "--data", str(root / "data"), "--quiet",
                     "--out", str(run)]) == EXIT_OK
        study = sorted((root / "data").glob("study_*"))[0]
        out = tmp_path / "syn"
        assert main(["synth", "--checkpoint", str(run / "final.ckpt"), "--study", str(study),
                     "--out", str(out)]) == EXIT_OK
        s = load_study(study)
        vol = np.fromfile(out / "synthetic_ce_t1.raw", dtype="<f4").reshape(s.shape)
        assert vol.min() >= 0 and vol.max() <= 1
        grid = read_pgm(out / "grid.pgm")
        D, H, W = s.shape
        assert grid.shape == (D * (H + 1) - 1, len(GRID_COLUMNS) * (W + 1) - 1)
        np.testing.assert_array_equal(grid[:H, :W], np.round(np.clip(s.t1.data[0], 0, 1) * 255))

        ev = tmp_path / "ev"
        assert main(["eval", "--checkpoint", str(run / "final.ckpt"), "--data", str(root / "data"),
                     "--regions", "brain,whole", "--out", str(ev)]) == EXIT_OK
        lines = (ev / "metrics.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + 2 * 2

    def test_eval_oracle(self, workspace, tmp_path):
        root, _ = workspace
        assert main(["eval", "--oracle", "--data", str(root / "data"), "--out", str(tmp_path / "e")]) == EXIT_OK
        lines = (tmp_path / "e/metrics.csv").read_text().strip().splitlines()
        header = lines[0].split(",")
        assert len(lines) == 1 + 2 * 2
        for line in lines[1:]:
            row = dict(zip(header, line.split(",")))
            assert float(row["mae"]) == 0.0 and float(row["mse"]) == 0.0
            assert float(row["psnr_db"]) == 99.0
            if row["region"] == "brain":
                assert math.isclose(float(row["ssim"]), 1.0, abs_tol=1e-9)

    def test_missing_data(self, tmp_path):
        code = main(["eval", "--oracle", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "e")])
        assert code == EXIT_DATA

    def test_bad_region(self, workspace, tmp_path):
        root, _ = workspace
        code = main(["eval", "--oracle", "--data", str(root / "data"), "--regions", "skull",
                     "--out", str(tmp_path / "e")])
        assert code == EXIT_CONFIG


class TestGradcheckAndHelp:
    def test_gradcheck_exits_zero(self, tmp_path, capsys):
        assert main(["gradcheck", "--out", str(tmp_path / "g")]) == EXIT_OK
        assert (tmp_path / "g/gradcheck.txt").is_file()

    @pytest.mark.parametrize("command", ["phantom", "train", "synth", "eval", "ablate", "gradcheck"])
    def test_help_documents_flags(self, command, capsys):
        with pytest.raises(SystemExit) as info:
            build_parser().parse_args([command, "--help"])
        assert info.value.code == 0
        text = capsys.readouterr().out
        for flag in ("--config", "--seed", "--threads", "--out", "--force"):
            assert flag in text

    def test_train_help_provenance(self, capsys):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["train", "--help"])
        text = " ".join(capsys.readouterr().out.split())
        assert "lambda = (0.1, 0.1, 10) at lr 1e-5" in text and "batch size 3" in text
