import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cesynth.losses import ssim_map
from cesynth.metrics import (CSV_FIELDS, REFERENCE_VALUES, RegionReport, compare_models, paired_t_test, psnr,
                             region_metrics, reports_to_csv, summarize, summary_text, t_two_sided_p)


def brute_metrics(pred, truth, mask):
    vals = [(float(p), float(t)) for p, t, m in zip(pred.ravel(), truth.ravel(), mask.ravel()) if m]
    mae = sum(abs(p - t) for p, t in vals) / len(vals)
    mse = sum((p - t) ** 2 for p, t in vals) / len(vals)
    return mae, mse, 10 * math.log10(1.0 / mse)


@pytest.fixture
def pair(rng):
    truth = rng.uniform(size=(4, 20, 22))
    pred = np.clip(truth + 0.05 * rng.standard_normal(truth.shape), 0, 1)
    mask = np.zeros(truth.shape, dtype=bool)
    mask[1:3, 3:17, 2:19] = True
    return pred, truth, mask


class TestRegionMetrics:
    def test_perfect(self, pair):
        _, truth, mask = pair
        r = region_metrics(truth, truth, mask)
        assert (r.mae, r.mse, r.ssim) == (0.0, 0.0, pytest.approx(1.0))
        assert r.psnr_db == math.inf
        assert r.as_row()["psnr_db"] == 99.0

    def test_uniform_error(self, pair):
        _, truth, mask = pair
        r = region_metrics(truth + 0.1, truth, mask, with_ssim=False)
        assert r.mae == pytest.approx(0.1)
        assert r.mse == pytest.approx(0.01)
        assert r.psnr_db == pytest.approx(20.0)

    def test_brute_force(self, pair):
        pred, truth, mask = pair
        r = region_metrics(pred, truth, mask)
        mae, mse, p = brute_metrics(pred, truth, mask)
        assert r.mae == pytest.approx(mae, abs=1e-9)
        assert r.mse == pytest.approx(mse, abs=1e-9)
        assert r.psnr_db == pytest.approx(p, abs=1e-9)
        crops = [ssim_map(pred[d, 3:17, 2:19], truth[d, 3:17, 2:19]) for d in (1, 2)]
        assert r.ssim == pytest.approx(np.mean(crops), abs=1e-6)
        assert r.voxels == mask.sum()

    def test_whole_mask_equals_global(self, pair):
        pred, truth, _ = pair
        r = region_metrics(pred, truth, np.ones(truth.shape))
        assert r.mae == pytest.approx(np.abs(pred - truth).mean(), abs=1e-12)
        assert r.ssim == pytest.approx(np.mean([ssim_map(pred[d], truth[d]) for d in range(4)]), abs=1e-12)

    def test_symmetric(self, pair):
        pred, truth, mask = pair
        a, b = region_metrics(pred, truth, mask), region_metrics(truth, pred, mask)
        assert (a.mae, a.mse) == pytest.approx((b.mae, b.mse), abs=1e-15)
        assert a.ssim == pytest.approx(b.ssim, abs=1e-12)

    def test_empty_mask(self, pair):
        pred, truth, mask = pair
        with pytest.raises(ValueError, match="empty"):
            region_metrics(pred, truth, np.zeros_like(mask))

    def test_psnr_decreasing(self):
        values = [psnr(m) for m in np.geomspace(1e-6, 1.0, 40)]
        assert all(a > b for a, b in zip(values, values[1:]))


class TestTTest:
    def test_hand_oracle(self):
        a, b = [1.0, 2.0, 3.0], [1.1, 2.4, 2.9]
        d = [x - y for x, y in zip(a, b)]
        mean = sum(d) / 3
        sd = math.sqrt(sum((x - mean) ** 2 for x in d) / 2)
        t = mean / (sd / math.sqrt(3))
        # df = 2 has a closed-form two-sided p-value.
        p = 1 - abs(t) / math.sqrt(2 + t * t)
        res = paired_t_test(a, b)
        assert res.t == pytest.approx(t, abs=1e-6)
        assert res.p == pytest.approx(p, abs=1e-6)
        assert res.df == 2 and not res.degenerate

    @pytest.mark.parametrize("t", [0.3, 1.7, 4.2])
    def test_df_one_closed_form(self, t):
        # df = 1 is the Cauchy distribution.
        assert t_two_sided_p(t, 1) == pytest.approx(1 - 2 * math.atan(t) / math.pi, abs=1e-12)

    def test_constant_shift_degenerate(self):
        res = paired_t_test([1, 2, 3, 4], [2, 3, 4, 5])
        assert res.degenerate and res.t == -math.inf and res.p == 0.0

    def test_identical_degenerate(self):
        res = paired_t_test([1, 2, 3], [1, 2, 3])
        assert res.degenerate and math.isnan(res.t) and res.p == 1.0

    def test_too_few(self):
        with pytest.raises(ValueError):
            paired_t_test([1.0], [2.0])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=12), st.integers(0, 1000))
    def test_p_in_unit_interval(self, values, seed):
        b = np.random.default_rng(seed).normal(size=len(values))
        res = paired_t_test(values, b)
        assert 0.0 <= res.p <= 1.0


def reports(values, region="brain", metric="psnr_db"):
    out = []
    for i, v in enumerate(values):
        r = RegionReport(region, f"{i:04d}", 0.05, 0.01, 20.0, 0.9, 100)
        setattr(r, metric, v)
        out.append(r)
    return out


class TestCompare:
    def test_identical(self):
        a = reports([20.0, 21.0, 22.0])
        rows = compare_models(a, a)
        assert all(r.favors == "tie" and r.test.degenerate for r in rows)

    def test_constant_gain(self):
        b = reports([20.0, 21.5, 22.0])
        a = reports([21.0, 22.5, 23.0])
        row = next(r for r in compare_models(a, b) if r.metric == "psnr_db")
        assert row.favors == "A" and row.test.degenerate

    def test_lower_mae_favors(self):
        a = reports([0.01, 0.02, 0.015], metric="mae")
        b = reports([0.03, 0.025, 0.04], metric="mae")
        row = next(r for r in compare_models(a, b) if r.metric == "mae")
        assert row.favors == "A"
        assert row.test.t == pytest.approx(paired_t_test([0.01, 0.02, 0.015], [0.03, 0.025, 0.04]).t)

    def test_mismatched_sets(self):
        with pytest.raises(ValueError):
            compare_models(reports([1.0, 2.0]), reports([1.0, 2.0, 3.0]))


class TestReports:
    def test_summary_mean_std(self):
        rows = reports([20.0, 22.0, 27.0])
        s = summarize(rows)["brain"]
        assert s.mean["psnr_db"] == pytest.approx(23.0)
        assert s.std["psnr_db"] == pytest.approx(np.std([20, 22, 27], ddof=1))

    def test_csv_layout(self):
        text = reports_to_csv(reports([20.0, math.inf]))
        lines = text.strip().split("\n")
        assert lines[0].split(",") == CSV_FIELDS
        assert len(lines) == 3
        assert lines[2].split(",")[4] == "99.0"

    def test_summary_text(self):
        text = summary_text(reports([20.0, 22.0]))
        assert "brain" in text and "21.00±1.41" in text
        assert REFERENCE_VALUES["brain_psnr_db"] in text
