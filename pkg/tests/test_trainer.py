import io
import math

import numpy as np
import pytest

from cesynth.data import PhantomSpec, phantom_cohort
from cesynth.metrics import RegionReport
from cesynth.models import HRNet3D, ModelConfig, load_checkpoint
from cesynth.trainer import (LOG_FIELDS, DEFAULT_STAGES, RATIO_SETTINGS, AdamState, DivergenceError,
                             NonFiniteGradient, Stage, TrainConfig, Trainer, ablate, adam_step, evaluate, fit)
from cesynth.volgrid import Tensor

TINY = ModelConfig(widths=(2, 4, 8), resblocks_per_module=1, seed=0)


@pytest.fixture(scope="module")
def tiny_set():
    spec = PhantomSpec(shape=(6, 16, 16), tumor_radius=(1.5, 2.0), tumor_count=1, vessel_length=8)
    return phantom_cohort(2, spec, seed=3)


def tiny_config(**kw):
    base = dict(stages=[Stage(2, 1e-3), Stage(1, 1e-4, 0.1, 0.1, 10)], batch_size=1, steps_per_epoch=2, seed=5)
    return TrainConfig(**{**base, **kw})


def scalar_param(value, grad):
    p = Tensor(np.array([value], dtype=np.float64), requires_grad=True)
    p.grad = np.array([grad], dtype=np.float64)
    return p


class TestAdam:
    def test_hand_stepped_first_update(self):
        p = scalar_param(1.0, 1.0)
        adam_step([("w", p)], AdamState(lr=0.1))
        # m = 0.1, v = 0.001; bias-corrected ratio is 1 / (1 + eps).
        assert p.data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-12)
        assert p.data[0] == pytest.approx(0.9, abs=1e-6)

    def test_two_steps_oracle(self):
        p = scalar_param(0.0, 2.0)
        st = AdamState(lr=0.01)
        adam_step([("w", p)], st)
        p.grad = np.array([-1.0])
        adam_step([("w", p)], st)
        m = 0.9 * (0.1 * 2.0) + 0.1 * -1.0
        v = 0.999 * (0.001 * 4.0) + 0.001 * 1.0
        expect = -0.01 * 2.0 / (2.0 + 1e-8) - 0.01 * (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
        assert p.data[0] == pytest.approx(expect, abs=1e-12)
        assert st.t == 2

    def test_zero_gradient_no_change(self):
        p = scalar_param(0.7, 0.0)
        adam_step([("w", p)], AdamState(lr=0.1))
        assert p.data[0] == 0.7

    def test_missing_gradient_skipped(self):
        p = Tensor(np.ones(3), requires_grad=True)
        st = AdamState()
        adam_step([("w", p)], st)
        assert np.all(p.data == 1.0) and "w" not in st.m

    def test_quadratic_converges(self):
        p = scalar_param(1.0, 0.0)
        st = AdamState(lr=0.1)
        for _ in range(200):
            p.grad = 2 * p.data
            adam_step([("w", p)], st)
        assert abs(p.data[0]) < 1e-2

    def test_non_finite_rejected_before_update(self):
        a, b = scalar_param(1.0, 1.0), scalar_param(1.0, math.nan)
        st = AdamState()
        with pytest.raises(NonFiniteGradient):
            adam_step([("a", a), ("b", b)], st)
        assert a.data[0] == 1.0 and st.t == 0


class TestConfig:
    def test_default_stages(self):
        s1, s2 = DEFAULT_STAGES
        assert (s1.epochs, s1.learning_rate, s1.lambda1, s1.lambda2, s1.lambda3) == (40, 1e-4, 1, 1, 1)
        assert (s2.epochs, s2.learning_rate, s2.lambda1, s2.lambda2, s2.lambda3) == (10, 1e-5, 0.1, 0.1, 10)

    def test_stage_at(self):
        cfg = tiny_config()
        assert [cfg.stage_at(i)[0] for i in range(6)] == [0, 0, 0, 0, 1, 1]
        assert cfg.total_steps == 6

    def test_round_trip(self):
        cfg = tiny_config()
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_rejects(self):
        with pytest.raises(ValueError):
            TrainConfig(stages=[])
        with pytest.raises(ValueError):
            TrainConfig(modalities=("flair",))


class TestTrainer:
    def test_zero_steps(self, tiny_set, tmp_path):
        buf = io.StringIO()
        res = fit(HRNet3D(TINY), tiny_set, config=tiny_config(steps_per_epoch=0), out_dir=tmp_path, log_stream=buf)
        assert res.records == [] and res.checkpoints == []
        lines = buf.getvalue().splitlines()
        assert lines[0].startswith("# config ") and lines[-1] == "# " + ",".join(LOG_FIELDS)

    def test_header_echoes_config(self, tiny_set):
        tr = Trainer(HRNet3D(TINY), tiny_set, tiny_config())
        assert "# stage 1: epochs=2 lr=0.001 lambda=(1, 1, 1)" in tr.header
        assert "# stage 2: epochs=1 lr=0.0001 lambda=(0.1, 0.1, 10)" in tr.header
        assert any(l.startswith("# model ") and '"widths": [2, 4, 8]' in l for l in tr.header)

    def test_stage_transition_logged(self, tiny_set, tmp_path):
        res = fit(HRNet3D(TINY), tiny_set, tiny_set, tiny_config(), out_dir=tmp_path)
        log = (tmp_path / "train.log").read_text().splitlines()
        assert "# stage 2 begins at epoch 3 (step 5): lr=0.0001 lambda=(0.1, 0.1, 10)" in log
        assert [r["stage"] for r in res.records] == [1, 1, 1, 1, 2, 2]
        assert [r["lr"] for r in res.records] == [1e-3] * 4 + [1e-4] * 2
        assert [v["epoch"] for v in res.val_records] == [1, 2, 3]
        assert (tmp_path / "final.ckpt").exists()

    def test_records_consistent(self, tiny_set):
        res = fit(HRNet3D(TINY), tiny_set, config=tiny_config())
        for r in res.records:
            w = (1, 1, 1) if r["stage"] == 1 else (0.1, 0.1, 10)
            combo = w[0] * r["l_mae"] + w[1] * r["l_ssim"] + w[2] * r["l_local"]
            assert r["total"] == pytest.approx(combo, rel=1e-5)

    def test_bit_identical_logs(self, tiny_set, tmp_path):
        for d in ("a", "b"):
            fit(HRNet3D(TINY), tiny_set, config=tiny_config(), out_dir=tmp_path / d)
        assert (tmp_path / "a/train.log").read_bytes() == (tmp_path / "b/train.log").read_bytes()

    def test_resume_equivalence(self, tiny_set, tmp_path):
        cfg = tiny_config(checkpoint_every=3)
        full = fit(HRNet3D(TINY), tiny_set, config=cfg, out_dir=tmp_path / "full")
        part = Trainer(HRNet3D(TINY), tiny_set, cfg, out_dir=tmp_path / "part")
        part.run(until=3)
        resumed = Trainer.resume(tmp_path / "part/step_000003.ckpt", tiny_set, out_dir=tmp_path / "part")
        tail = resumed.run()
        assert [r for r in full.records[3:]] == tail.records
        a = load_checkpoint(tmp_path / "full/final.ckpt").model
        b = load_checkpoint(tmp_path / "part/final.ckpt").model
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and pa.data.tobytes() == pb.data.tobytes()
        full_log = (tmp_path / "full/train.log").read_text()
        assert (tmp_path / "part/train.log").read_text() == full_log

    def test_divergence_restores_and_raises(self, tiny_set, tmp_path):
        model = HRNet3D(TINY)
        tr = Trainer(model, tiny_set, tiny_config(), out_dir=tmp_path)
        before = {n: p.data.copy() for n, p in model.named_parameters()}

        def boom():
            raise NonFiniteGradient("injected")

        tr.train_step = boom
        with pytest.raises(DivergenceError) as info:
            tr.run()
        assert info.value.last_checkpoint is None
        for n, p in model.named_parameters():
            np.testing.assert_array_equal(p.data, before[n])
        assert "# diverged at step 1" in (tmp_path / "train.log").read_text()


class TestEvaluate:
    def test_perfect_predictor(self, tiny_set):
        rows = evaluate(lambda s: s.ce_t1, tiny_set)
        assert len(rows) == 2 * len(tiny_set)
        assert all(r.mae == 0.0 and r.psnr_db == math.inf for r in rows)
        assert {r.region for r in rows} == {"brain", "tumor"}

    def test_whole_region_averages(self, tiny_set):
        rows = evaluate(lambda s: s.t1, tiny_set, regions=("whole",))
        for r, s in zip(rows, tiny_set):
            assert isinstance(r, RegionReport)
            assert r.mae == pytest.approx(np.abs(s.t1.data.astype(np.float64) - s.ce_t1.data).mean(), rel=1e-9)

    def test_missing_tumor_skipped(self, tiny_set, caplog):
        s = tiny_set[0].with_volumes(tumor_mask=None)
        rows = evaluate(lambda st: st.ce_t1, [s])
        assert [r.region for r in rows] == ["brain"]
        assert "no tumor mask" in caplog.text

    def test_network_runs(self, tiny_set):
        model = fit(HRNet3D(TINY), tiny_set, config=tiny_config(steps_per_epoch=1)).model
        rows = evaluate(model, tiny_set, regions=("brain",))
        assert len(rows) == 2 and all(0 <= r.mae <= 1 for r in rows)


class TestAblate:
    def test_ratio_rows(self, tiny_set):
        settings = RATIO_SETTINGS[:2]
        table = ablate(TINY, tiny_config(steps_per_epoch=1), tiny_set, tiny_set, "ratio", seeds=(0, 1),
                       settings=settings)
        assert table.labels() == ["(1, 1) r=1", "(1, 10) r=10"]
        assert len(table.rows) == 4
        assert all(r.lambdas[0] == r.lambdas[1] for r in table.rows)
        assert "r=10" in table.to_text()

    def test_modality_rows(self, tiny_set):
        table = ablate(TINY, tiny_config(steps_per_epoch=1), tiny_set, tiny_set, "modalities", seeds=(0,))
        assert table.labels() == ["T1", "T1+T2", "T1+T2+ADC"]
        assert [r.modalities for r in table.rows] == [("t1",), ("t1", "t2"), ("t1", "t2", "adc")]

    def test_unknown_axis(self, tiny_set):
        with pytest.raises(ValueError):
            ablate(TINY, tiny_config(), tiny_set, tiny_set, "depth")
