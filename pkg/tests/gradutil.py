"""Finite-difference gradient checking shared by the test modules."""

import numpy as np

from conbimamba import numcore as nc


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-7) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def gradcheck(build, params, step=1e-5, tol=1e-3):
    """Compare autodiff and central differences for every tensor in ``params``.

    ``build()`` must return a scalar Tensor computed from ``params``. Returns
    the worst relative error and asserts it is within ``tol``.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    loss = build()
    nc.backward(loss)
    worst = 0.0
    for p in params:
        auto = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        num = nc.numerical_gradient(lambda: build().item(), p, step)
        err = rel_error(auto, num)
        worst = max(worst, err)
        assert err <= tol, f"{p.name or p.shape}: rel. error {err:.2e}"
    return worst
