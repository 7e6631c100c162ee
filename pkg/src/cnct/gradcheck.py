"""Central-difference gradient checking for the tensor primitives.

The op under test is a callable mapping a dict of named float64 arrays to
(loss, grads) where loss is a python float and grads maps the same names to
arrays of matching shape. The harness perturbs every element of every input
by +/- step, forms the central difference, and compares it against the
analytic gradient with a relative error that tolerates near-zero pairs:

    rel_err = |analytic - numeric| / max(|analytic| + |numeric|, 1e-3)
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

REL_ERR_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    """Outcome of one grad_check call."""

    passed: bool
    max_rel_err: float
    tolerance: float
    step: float
    per_input: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        detail = ", ".join(f"{k}={v:.3e}" for k, v in sorted(self.per_input.items()))
        return f"grad check {status}: max rel err {self.max_rel_err:.3e} ({detail})"


def grad_check(op, inputs, tolerance=1e-4, step=1e-5):
    """Compare analytic gradients of op against central differences.

    Args:
        op: callable(dict[str, ndarray]) -> (loss, dict[str, ndarray]).
        inputs: dict of float64 arrays; every entry is checked.
        tolerance: maximum admissible relative error.
        step: finite-difference half-step, clamped to [1e-5, 1e-3].

    Returns:
        GradCheckReport. Non-finite analytic gradients or losses are
        recorded as failures rather than raised.
    """
    step = float(min(max(step, 1e-5), 1e-3))
    for name, arr in inputs.items():
        if arr.dtype != np.float64:
            raise ConfigError(
                f"grad_check requires float64 inputs, {name!r} is {arr.dtype}"
            )

    loss0, grads = op(inputs)
    report = GradCheckReport(passed=True, max_rel_err=0.0,
                             tolerance=tolerance, step=step)
    if not np.isfinite(loss0):
        report.passed = False
        report.failures.append(f"loss is not finite: {loss0}")
        return report

    for name, arr in inputs.items():
        g = grads.get(name)
        if g is None:
            report.passed = False
            report.failures.append(f"no analytic gradient returned for {name!r}")
            continue
        if g.shape != arr.shape:
            report.passed = False
            report.failures.append(
                f"gradient for {name!r} has shape {g.shape}, expected {arr.shape}"
            )
            continue
        if not np.all(np.isfinite(g)):
            report.passed = False
            report.failures.append(f"analytic gradient for {name!r} is not finite")
            continue

        worst = 0.0
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp, _ = op(inputs)
            flat[i] = orig - step
            lm, _ = op(inputs)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                report.passed = False
                report.failures.append(
                    f"non-finite loss while perturbing {name!r}[{i}]")
                worst = np.inf
                break
            numeric = (lp - lm) / (2.0 * step)
            analytic = g.reshape(-1)[i]
            denom = max(abs(analytic) + abs(numeric), REL_ERR_FLOOR)
            err = abs(analytic - numeric) / denom
            if err > worst:
                worst = err
        report.per_input[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
        if worst > tolerance:
            report.passed = False
            report.failures.append(
                f"{name!r}: rel err {worst:.3e} exceeds {tolerance:.1e}")
    return report


def projection_loss(y, proj):
    """Scalar loss <y, proj> used to exercise ops with tensor outputs."""
    return float(np.sum(y * proj, dtype=np.float64))
