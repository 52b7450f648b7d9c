"""Finite-difference certification of analytic gradients.

Every trainable layer and every model in this package is expected to pass
``grad_check`` in float64: central differences (f(p+eps) - f(p-eps)) / 2eps
against the tape's gradient, relative error normalized by
max(|analytic|, |numeric|, 1e-8).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradReport:
    max_rel_err: float
    worst_param: str = ""
    per_param: dict = field(default_factory=dict)

    def __str__(self):
        return f"grad_check: max rel err {self.max_rel_err:.3e} (worst: {self.worst_param})"


def grad_check(f, params, eps=1e-5, max_entries=None, rng=None):
    """Compare analytic gradients of scalar `f()` against central differences.

    f is a deterministic closure over `params` returning a scalar Variable.
    Checks every entry of every parameter unless `max_entries` caps the number
    of probed entries per parameter (probes chosen by `rng` in that case).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("epsilon outside [1e-6, 1e-3]")
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 parameters")

    for p in params:
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite objective")
    out.backward()
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    report = GradReport(max_rel_err=0.0)
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            idxs = (rng or np.random.default_rng(0)).choice(n, size=max_entries, replace=False)
        else:
            idxs = range(n)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("non-finite objective")
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic[pi].reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        name = getattr(p, "name", "") or f"param{pi}"
        report.per_param[name] = worst
        if worst >= report.max_rel_err:
            report.max_rel_err = worst
            report.worst_param = name
    return report
