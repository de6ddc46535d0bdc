"""Gradient verification against central finite differences.

The checker is the independent oracle for the autodiff engine: it re-evaluates
the loss with perturbed parameter entries and never inspects the recorded
graph. Run fragments in float64; float32 rounding drowns the h^2 truncation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .module import Parameter


@dataclass
class ParamReport:
    name: str
    rel_error: float
    max_abs_diff: float
    checked_coords: int


@dataclass
class GradCheckReport:
    params: list[ParamReport] = field(default_factory=list)
    tolerance: float = 1e-6

    @property
    def max_rel_error(self) -> float:
        return max((p.rel_error for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def summary(self) -> str:
        lines = [f"grad check: max rel err {self.max_rel_error:.3e} "
                 f"(tolerance {self.tolerance:.1e}) -> {'PASS' if self.passed else 'FAIL'}"]
        for p in sorted(self.params, key=lambda r: -r.rel_error):
            lines.append(f"  {p.name}: rel {p.rel_error:.3e} absmax {p.max_abs_diff:.3e} ({p.checked_coords} coords)")
        return "\n".join(lines)


def grad_check(loss_fn, params: list[Parameter], *, h: float = 1e-5, tolerance: float = 1e-6,
               max_coords_per_param: int | None = None, rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare autodiff gradients of `loss_fn()` with central differences.

    `loss_fn` must rebuild the graph from the current parameter values on each
    call. Relative error is normalized per parameter tensor:
    max|a - n| / max(max|a|, max|n|, 1e-12), so near-zero entries of an
    otherwise healthy tensor do not blow up the metric. Failures are reported,
    never raised.
    """
    for p in params:
        p.tensor.grad = np.zeros_like(p.data)
    loss = loss_fn()
    loss.backward()
    autodiff = {p.name: p.tensor.grad.copy() for p in params}

    report = GradCheckReport(tolerance=tolerance)
    with T.no_grad():
        for p in params:
            flat = p.tensor.data.reshape(-1)
            n_coords = flat.size
            if max_coords_per_param is not None and n_coords > max_coords_per_param:
                if rng is None:
                    rng = np.random.default_rng(0)
                coords = rng.choice(n_coords, size=max_coords_per_param, replace=False)
            else:
                coords = np.arange(n_coords)
            a = autodiff[p.name].reshape(-1)
            num = np.zeros(len(coords), dtype=np.float64)
            for j, c in enumerate(coords):
                orig = flat[c]
                flat[c] = orig + h
                lp = loss_fn().item()
                flat[c] = orig - h
                lm = loss_fn().item()
                flat[c] = orig
                num[j] = (lp - lm) / (2.0 * h)
            asel = a[coords].astype(np.float64)
            diff = np.abs(asel - num)
            denom = max(np.abs(asel).max(initial=0.0), np.abs(num).max(initial=0.0), 1e-12)
            report.params.append(ParamReport(
                name=p.name,
                rel_error=float(diff.max(initial=0.0) / denom),
                max_abs_diff=float(diff.max(initial=0.0)),
                checked_coords=len(coords),
            ))
    return report
