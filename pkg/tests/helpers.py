"""Shared test oracles, kept independent of the library's autodiff path."""

import numpy as np


def finite_diff_check(build, tensors, rng, n_samples=10, h=1e-5):
    """Compare analytic gradients against central finite differences.

    build() must reconstruct the scalar loss graph from the current data of
    `tensors` (re-seeding any internal randomness).  Returns the worst
    relative error over sampled entries, where the relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1).
    """
    for t in tensors:
        t.zero_grad()
    build().backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        for t in tensors
    ]
    worst = 0.0
    for t, full in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        idxs = rng.choice(flat.size, size=min(n_samples, flat.size), replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = build().item()
            flat[i] = orig - h
            fm = build().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            ana = full.reshape(-1)[i]
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1.0)
            worst = max(worst, rel)
    return worst
