"""Region-restricted image quality metrics and paired significance tests."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import betainc

from .losses import DEFAULT_SSIM, SsimParams, ssim_map

MAX_I = 1.0
PSNR_TEXT_CAP = 99.0

# Published whole-brain / tumor results, shown for orientation in summaries only.
REFERENCE_VALUES = {
    "brain_psnr_db": "28.24±1.26",
    "brain_ssim": "0.923±0.041",
    "brain_mae": "0.029±0.005",
    "tumor_psnr_db": "21.2±2.36",
}


@dataclass
class RegionReport:
    """Metrics of one study over one region."""

    region: str
    study_id: str
    mae: float
    mse: float
    psnr_db: float
    ssim: float
    voxels: int = 0

    def as_row(self) -> dict:
        row = asdict(self)
        row["psnr_db"] = min(self.psnr_db, PSNR_TEXT_CAP)
        return row


def psnr(mse: float, max_i: float = MAX_I) -> float:
    if mse < 0:
        raise ValueError("mse must be non-negative")
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_i**2 / mse)


def bounding_box(mask: np.ndarray) -> tuple[slice, ...]:
    idx = np.nonzero(mask)
    return tuple(slice(int(i.min()), int(i.max()) + 1) for i in idx)


def region_ssim(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray, params: SsimParams = DEFAULT_SSIM) -> float:
    """Mean slice SSIM over depth slices touching ``mask``, each cropped to the mask's H/W box."""
    _, hs, ws = bounding_box(mask)
    vals = [ssim_map(pred[d, hs, ws], truth[d, hs, ws], params) for d in range(mask.shape[0]) if mask[d].any()]
    return float(np.mean(vals))


def region_metrics(pred, truth, region_mask, region: str = "brain", study_id: str = "",
                   with_ssim: bool = True, ssim_params: SsimParams = DEFAULT_SSIM) -> RegionReport:
    """MAE, MSE, PSNR (``MAX_I = 1``) and SSIM restricted to ``region_mask``.

    Volumes are ``(D, H, W)``.  ``with_ssim=False`` reports SSIM as NaN.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    m = np.asarray(region_mask) > 0
    if p.shape != t.shape or p.shape != m.shape:
        raise ValueError(f"region_metrics: shapes differ {p.shape}, {t.shape}, {m.shape}")
    n = int(m.sum())
    if n == 0:
        raise ValueError(f"region_metrics: empty {region} mask")
    diff = (p - t)[m]
    mae = float(np.abs(diff).sum() / n)
    mse = float((diff * diff).sum() / n)
    ssim = region_ssim(p, t, m, ssim_params) if with_ssim else math.nan
    return RegionReport(region, study_id, mae, mse, psnr(mse), ssim, n)


# --------------------------------------------------------------------------
# Student t distribution
# --------------------------------------------------------------------------


def t_two_sided_p(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


@dataclass
class TTestResult:
    t: float
    p: float
    df: int
    mean_diff: float
    sd_diff: float
    degenerate: bool = False


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test of ``a - b``.

    Zero-variance differences are flagged ``degenerate``; then ``t`` is
    ``±inf`` (``p = 0``) or NaN when every difference is zero (``p = 1``).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired_t_test needs two equal-length 1-D samples")
    n = a.size
    if n < 2:
        raise ValueError("paired_t_test needs at least 2 pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    if sd <= 1e-12 * max(1.0, abs(mean)):
        if mean == 0 or abs(mean) <= 1e-12:
            return TTestResult(math.nan, 1.0, df, mean, sd, True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, df, mean, sd, True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, t_two_sided_p(t, df), df, mean, sd)


# --------------------------------------------------------------------------
# Aggregation and comparison
# --------------------------------------------------------------------------

_HIGHER_IS_BETTER = {"mae": False, "mse": False, "psnr_db": True, "ssim": True}


@dataclass
class RegionSummary:
    region: str
    n: int
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)
    values: dict[str, list[float]] = field(default_factory=dict)


def summarize(reports: Iterable[RegionReport]) -> dict[str, RegionSummary]:
    """Mean ± sample std per region over studies."""
    by_region: dict[str, list[RegionReport]] = {}
    for r in reports:
        by_region.setdefault(r.region, []).append(r)
    out = {}
    for region, rows in by_region.items():
        s = RegionSummary(region, len(rows))
        for key in _HIGHER_IS_BETTER:
            vals = [getattr(r, key) for r in rows]
            s.values[key] = vals
            arr = np.asarray(vals, dtype=np.float64)
            if key == "psnr_db":
                arr = np.minimum(arr, PSNR_TEXT_CAP)
            s.mean[key] = float(arr.mean())
            s.std[key] = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        out[region] = s
    return out


@dataclass
class ComparisonRow:
    region: str
    metric: str
    mean_a: float
    mean_b: float
    test: TTestResult
    favors: str


def compare_models(reports_a: Sequence[RegionReport], reports_b: Sequence[RegionReport],
                   metrics: Sequence[str] = ("mae", "psnr_db", "ssim")) -> list[ComparisonRow]:
    """Paired t-tests of model A against model B per region and metric."""
    ka = {(r.region, r.study_id): r for r in reports_a}
    kb = {(r.region, r.study_id): r for r in reports_b}
    if set(ka) != set(kb):
        raise ValueError("compare_models: the two report sets cover different studies/regions")
    rows = []
    for region in sorted({k[0] for k in ka}):
        keys = sorted(k for k in ka if k[0] == region)
        for metric in metrics:
            va = np.array([getattr(ka[k], metric) for k in keys], dtype=np.float64)
            vb = np.array([getattr(kb[k], metric) for k in keys], dtype=np.float64)
            if np.isnan(va).any() or np.isnan(vb).any():
                continue
            if metric == "psnr_db":
                va, vb = np.minimum(va, PSNR_TEXT_CAP), np.minimum(vb, PSNR_TEXT_CAP)
            res = paired_t_test(va, vb)
            diff = res.mean_diff if _HIGHER_IS_BETTER[metric] else -res.mean_diff
            favors = "A" if diff > 0 else "B" if diff < 0 else "tie"
            rows.append(ComparisonRow(region, metric, float(va.mean()), float(vb.mean()), res, favors))
    return rows


# --------------------------------------------------------------------------
# Report emission
# --------------------------------------------------------------------------

CSV_FIELDS = ["study_id", "region", "mae", "mse", "psnr_db", "ssim", "voxels"]


def reports_to_csv(reports: Iterable[RegionReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        row = r.as_row()
        w.writerow({k: row[k] for k in CSV_FIELDS})
    return buf.getvalue()


def summary_text(reports: Sequence[RegionReport], title: str = "Evaluation") -> str:
    lines = [title, "-" * len(title), f"{'region':<8} {'n':>3}  {'MAE':>15}  {'PSNR (dB)':>15}  {'SSIM':>15}"]
    for region, s in summarize(reports).items():
        cells = []
        for key, fmt in (("mae", "{:.4f}"), ("psnr_db", "{:.2f}"), ("ssim", "{:.4f}")):
            if math.isnan(s.mean[key]):
                cells.append(f"{'n/a':>15}")
            else:
                cells.append(f"{(fmt + '±' + fmt).format(s.mean[key], s.std[key]):>15}")
        lines.append(f"{region:<8} {s.n:>3}  " + "  ".join(cells))
    lines.append("")
    lines.append("published reference (clinical cohort, not reproducible here): "
                 + ", ".join(f"{k}={v}" for k, v in REFERENCE_VALUES.items()))
    return "\n".join(lines)


def comparison_text(rows: Sequence[ComparisonRow]) -> str:
    lines = [f"{'region':<8} {'metric':<8} {'mean A':>10} {'mean B':>10} {'t':>9} {'p':>9}  favors"]
    for r in rows:
        flag = " (degenerate)" if r.test.degenerate else ""
        lines.append(f"{r.region:<8} {r.metric:<8} {r.mean_a:>10.4f} {r.mean_b:>10.4f} "
                     f"{r.test.t:>9.3f} {r.test.p:>9.2e}  {r.favors}{flag}")
    return "\n".join(lines)
