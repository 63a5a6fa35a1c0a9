"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    checked: int


@dataclass
class GradCheckReport:
    tol: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def __str__(self) -> str:
        lines = [f"{'PASS' if self.passed else 'FAIL'} max rel err {self.max_rel_err:.3e} (tol {self.tol:g})"]
        lines += [f"  {p.name}: {p.max_rel_err:.3e} over {p.checked} entries" for p in self.params]
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|analytic - numeric| / max(|numeric|, floor)``; the numeric value is the reference."""
    return np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)


def _evaluate(f: Callable[[], Tensor]) -> float:
    val = float(np.asarray(f().data, dtype=np.float64).reshape(-1)[0])
    if not np.isfinite(val):
        raise FloatingPointError(f"gradient_check: non-finite loss {val}")
    return val


def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5, tol: float = 1e-3,
                   entries: int | None = None, rng: np.random.Generator | None = None,
                   floor: float = 1e-6, names: Sequence[str] | None = None) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    ``params`` should hold float64 data.  With ``entries`` set, only that many
    randomly chosen entries of each parameter are perturbed.
    """
    for p in params:
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        loss = f()
    if loss.size != 1:
        raise ValueError("gradient_check needs a scalar-valued function")
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("gradient_check: non-finite loss")
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = rng or np.random.default_rng(0)
    report = GradCheckReport(tol=tol)
    for idx, (p, ga) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        if entries is None or entries >= flat.size:
            picks = np.arange(flat.size)
        else:
            picks = rng.choice(flat.size, size=entries, replace=False)
        worst = 0.0
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            fp = _evaluate(f)
            flat[i] = orig - h
            fm = _evaluate(f)
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            err = float(relative_error(np.float64(ga.reshape(-1)[i]), np.float64(numeric), floor))
            worst = max(worst, err)
        name = names[idx] if names else (p.name or f"param{idx}")
        report.params.append(ParamCheck(name, worst, len(picks)))
    return report
