"""Adam with bias correction. State lives on the Parameter itself."""

from __future__ import annotations

import numpy as np


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update over `params`; parameters without gradients are skipped."""
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1**p.step)
        v_hat = p.v / (1.0 - beta2**p.step)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
