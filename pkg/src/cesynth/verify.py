"""Finite-difference verification suite for every differentiable kernel.

Each case reduces an op's output to a scalar as ``sum(op(x) * R)`` with a
fixed random ``R``, so every output entry contributes to the checked
gradient.  All checks run in float64.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .losses import LossWeights, SsimParams, local_loss, mae_loss, ssim_loss, total_loss
from .models import HRNet3D, ModelConfig
from .volgrid import (BatchNormState, GradCheckReport, Tape, Tensor, add, batch_norm3d, concat_channels, conv3d,
                      gradient_check, mean, mul, precision, reduce, relu, sum_, upsample_trilinear)
from .volgrid.gradcheck import ParamCheck, relative_error

F64 = np.float64


@dataclass
class SuiteResult:
    name: str
    report: GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed


def _param(rng, shape, name, scale=1.0, away_from_zero=0.0) -> Tensor:
    x = rng.standard_normal(shape) * scale
    if away_from_zero:
        x = np.where(np.abs(x) < away_from_zero, np.sign(x + 1e-12) * away_from_zero + x, x)
    return Tensor(x.astype(F64), requires_grad=True, name=name)


def _weighted_sum(out: Tensor, r: np.ndarray) -> Tensor:
    return sum_(mul(out, Tensor(r.astype(F64))))


def _cases(rng) -> dict[str, Callable[[], tuple[Callable[[], Tensor], list[Tensor]]]]:
    def conv():
        x = _param(rng, (2, 3, 4, 5, 6), "x")
        w = _param(rng, (4, 3, 3, 3, 3), "weight", 0.3)
        b = _param(rng, (4,), "bias")
        r = rng.standard_normal((2, 4, 4, 5, 6))
        return (lambda: _weighted_sum(conv3d(x, w, b), r)), [x, w, b]

    def conv_strided():
        x = _param(rng, (1, 2, 3, 6, 6), "x")
        w = _param(rng, (3, 2, 3, 3, 3), "weight", 0.3)
        r = rng.standard_normal((1, 3, 3, 3, 3))
        return (lambda: _weighted_sum(conv3d(x, w, None, stride=(1, 2, 2)), r)), [x, w]

    def conv_1x1():
        x = _param(rng, (2, 3, 2, 3, 4), "x")
        w = _param(rng, (2, 3, 1, 1, 1), "weight")
        r = rng.standard_normal((2, 2, 2, 3, 4))
        return (lambda: _weighted_sum(conv3d(x, w, None), r)), [x, w]

    def bn():
        x = _param(rng, (3, 2, 2, 3, 3), "x", 2.0)
        g = _param(rng, (2,), "gamma")
        b = _param(rng, (2,), "beta")
        r = rng.standard_normal(x.shape)

        def f():
            # A fresh state each call keeps the perturbed evaluations independent.
            return _weighted_sum(batch_norm3d(x, g, b, BatchNormState(2), train=True), r)

        return f, [x, g, b]

    def bn_eval():
        x = _param(rng, (2, 2, 2, 3, 3), "x")
        g = _param(rng, (2,), "gamma")
        b = _param(rng, (2,), "beta")
        st = BatchNormState(2)
        st.mean = rng.standard_normal(2)
        st.var = rng.uniform(0.5, 2.0, 2)
        r = rng.standard_normal(x.shape)
        return (lambda: _weighted_sum(batch_norm3d(x, g, b, st, train=False), r)), [x, g, b]

    def relu_add_concat():
        a = _param(rng, (2, 2, 2, 3, 3), "a", away_from_zero=0.05)
        b = _param(rng, (2, 3, 2, 3, 3), "b")
        c = _param(rng, (2, 2, 2, 3, 3), "c")
        r = rng.standard_normal((2, 5, 2, 3, 3))
        return (lambda: _weighted_sum(concat_channels([add(relu(a), c), b]), r)), [a, b, c]

    def upsample():
        x = _param(rng, (1, 2, 2, 3, 4), "x")
        r = rng.standard_normal((1, 2, 2, 12, 16))
        return (lambda: _weighted_sum(upsample_trilinear(x, (1, 4, 4)), r)), [x]

    def reductions():
        x = _param(rng, (2, 3, 4, 5), "x", away_from_zero=0.05)
        r1 = rng.standard_normal((2, 5))
        r2 = rng.standard_normal((3,))

        def f():
            s = _weighted_sum(mean(x, (1, 2)), r1)
            t = _weighted_sum(sum_(x, (0, 2, 3)), r2)
            return add(add(s, t), reduce(x, "mean_abs"))

        return f, [x]

    def ssim():
        p = Tensor(rng.uniform(0, 1, (2, 1, 2, 13, 12)), requires_grad=True, name="pred")
        y = rng.uniform(0, 1, (2, 1, 2, 13, 12))
        return (lambda: ssim_loss(p, y)), [p]

    def mae():
        y = rng.uniform(0, 1, (2, 1, 3, 4, 4))
        off = rng.uniform(0.05, 0.5, y.shape) * rng.choice([-1.0, 1.0], y.shape)
        p = Tensor(y + off, requires_grad=True, name="pred")
        return (lambda: mae_loss(p, y)), [p]

    def local():
        y = rng.uniform(0, 1, (2, 1, 3, 4, 4))
        off = rng.uniform(0.05, 0.5, y.shape) * rng.choice([-1.0, 1.0], y.shape)
        p = Tensor(y + off, requires_grad=True, name="pred")
        m = (rng.uniform(size=y.shape) < 0.3).astype(F64)
        return (lambda: local_loss(p, y, m)), [p]

    return {
        "conv3d": conv,
        "conv3d_strided": conv_strided,
        "conv3d_1x1": conv_1x1,
        "batch_norm3d_train": bn,
        "batch_norm3d_eval": bn_eval,
        "relu_add_concat": relu_add_concat,
        "upsample_trilinear": upsample,
        "reductions": reductions,
        "ssim_loss": ssim,
        "mae_loss": mae,
        "local_loss": local,
    }


def op_suite(tol: float = 1e-3, seed: int = 0) -> list[SuiteResult]:
    """Check every kernel; each result holds a per-parameter report."""
    rng = np.random.default_rng(seed)
    results = []
    with precision(F64):
        for name, build in _cases(rng).items():
            t0 = time.perf_counter()
            f, params = build()
            report = gradient_check(f, params, h=1e-6, tol=tol, names=[p.name for p in params])
            results.append(SuiteResult(name, report, time.perf_counter() - t0))
    return results


def end_to_end_check(entries: int = 20, tol: float = 1e-2, seed: int = 0, h: float = 1e-6,
                     widths=(4, 8, 16), shape=(1, 3, 3, 8, 8)) -> GradCheckReport:
    """Gradient of the full composite loss of a small HRNet at ``entries`` random weight entries.

    Entries are drawn uniformly over all parameter scalars.

    The SSIM window is shrunk to 7 so it fits an 8x8 slice.
    """
    rng = np.random.default_rng(seed)
    model = HRNet3D(ModelConfig(widths=widths, seed=seed)).astype(F64)
    with precision(F64):
        x = Tensor(rng.uniform(0, 1, shape))
        y = rng.uniform(0, 1, (shape[0], 1) + shape[2:])
        t1 = y - rng.uniform(0, 0.2, y.shape)
        weights = LossWeights(1.0, 1.0, 1.0, 0.1)
        ssim = SsimParams(window=7)

        def f():
            pred = model.forward(x, train=True)
            return total_loss(pred, y, t1, weights, ssim_params=ssim)[0]

        named = list(model.named_parameters())
        for _, p in named:
            p.grad = None
        with Tape() as tape:
            loss = f()
        tape.backward(loss)
        sizes = np.array([p.size for _, p in named])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        report = GradCheckReport(tol=tol)
        for g in np.sort(rng.choice(offsets[-1], size=entries, replace=False)):
            k = int(np.searchsorted(offsets, g, side="right") - 1)
            name, p = named[k]
            i = int(g - offsets[k])
            flat = p.data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            analytic = p.grad.reshape(-1)[i] if p.grad is not None else 0.0
            err = float(relative_error(np.float64(analytic), np.float64(numeric)))
            report.params.append(ParamCheck(f"{name}[{i}]", err, 1))
    return report


def run_all(tol: float = 1e-3, e2e_tol: float = 1e-2, seed: int = 0) -> tuple[bool, str]:
    t0 = time.perf_counter()
    lines = []
    ok = True
    for res in op_suite(tol, seed):
        ok &= res.passed
        lines.append(f"{'PASS' if res.passed else 'FAIL'} {res.name:<20} max rel err "
                     f"{res.report.max_rel_err:.2e}  ({res.seconds:.2f}s)")
    e2e = end_to_end_check(tol=e2e_tol, seed=seed)
    ok &= e2e.passed
    lines.append(f"{'PASS' if e2e.passed else 'FAIL'} {'hrnet_total_loss':<20} max rel err "
                 f"{e2e.max_rel_err:.2e}  ({sum(p.checked for p in e2e.params)} entries)")
    lines.append(f"total {time.perf_counter() - t0:.1f}s")
    return ok, "\n".join(lines)
