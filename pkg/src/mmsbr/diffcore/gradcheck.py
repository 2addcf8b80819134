"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, backward


@dataclass
class ParamCheck:
    path: str
    max_rel_err: float
    worst_index: tuple
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    h: float
    checks: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def format(self):
        lines = []
        for c in self.checks:
            status = "pass" if c.passed else "FAIL"
            lines.append(f"{status}  {c.path:<28s} max_rel_err={c.max_rel_err:.3e}")
        lines.append(f"overall: {'pass' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def relative_error(a, n):
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def finite_diff_check(params, loss_fn, h=1e-5, tolerance=1e-3, analytic_grads=None):
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild the loss from the current parameter values and
    be deterministic. ``analytic_grads`` overrides the backward pass (used to
    verify that corrupted gradients are reported).
    """
    if analytic_grads is None:
        with Tape() as tape:
            loss = loss_fn()
        analytic_grads = params.gradient_map(backward(tape, loss))

    report = GradCheckReport(tolerance=tolerance, h=h)
    for path, tensor in params.items():
        grad = analytic_grads[path]
        flat = tensor.data.reshape(-1)
        worst = 0.0
        worst_idx = ()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            analytic = float(grad.reshape(-1)[i])
            err = relative_error(analytic, numeric)
            if err > worst:
                worst = err
                worst_idx = np.unravel_index(i, tensor.shape)
        report.checks.append(
            ParamCheck(path=path, max_rel_err=worst, worst_index=worst_idx, passed=worst <= tolerance)
        )
    return report
