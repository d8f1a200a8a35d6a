"""Central finite-difference verification of analytic gradients."""
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    checked: int
    flagged: list = field(default_factory=list)
    per_tensor: dict = field(default_factory=dict)

    def passed(self, tol):
        return self.max_rel_err < tol


def _rel_err(a, b, floor):
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(f, inputs, tol=None, h=1e-4, n_coords=32, seed=0, kink=None, floor=1e-6, kink_tol=1e-2):
    """Compare the analytic gradient of scalar ``f`` with central differences.

    ``inputs`` is a Tensor or a dict name -> Tensor (all double precision).
    ``f`` takes no arguments and rebuilds the forward graph from the current
    tensor values each call. Up to ``n_coords`` coordinates per tensor are drawn
    with a seeded generator (all of them when the tensor is smaller).

    ``kink(name, index)`` may return True for coordinates sitting on a known
    non-differentiable point; those are reported in ``flagged`` and excluded
    from the error. Coordinates whose one-sided differences disagree by more
    than ``kink_tol * max(1, |central|)`` are flagged the same way.

    Relative error is |a - n| / max(|a|, |n|, floor). The floor keeps gradients
    far below central-difference roundoff (about 1e-12 at h=1e-4 for an O(1)
    loss) from reading as large relative errors. ``tol``, when given, makes the
    call raise AssertionError on failure.
    """
    if isinstance(inputs, Tensor):
        inputs = {"x": inputs}
    for t in inputs.values():
        t.grad = None
        t.requires_grad = True
    out = f()
    f0 = float(out.data)
    out.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in inputs.items()}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0, 0.0, 0)
    for name, t in inputs.items():
        flat = t.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= n_coords else rng.choice(n, size=n_coords, replace=False)
        worst = 0.0
        for i in idx:
            if kink is not None and kink(name, int(i)):
                report.flagged.append((name, int(i)))
                continue
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            if abs((fp - f0) - (f0 - fm)) / h > kink_tol * max(1.0, abs(num)):
                report.flagged.append((name, int(i)))
                continue
            ana = float(analytic[name].reshape(-1)[i])
            err = _rel_err(ana, num, floor)
            worst = max(worst, err)
            report.max_abs_err = max(report.max_abs_err, abs(ana - num))
            report.checked += 1
        report.per_tensor[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    for t in inputs.values():
        t.grad = None
    if tol is not None and not report.passed(tol):
        raise AssertionError(f"gradient check failed: max rel err {report.max_rel_err:.3e} >= {tol:g} "
                             f"(worst tensors: {sorted(report.per_tensor, key=report.per_tensor.get)[-3:]})")
    return report
