"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                            indices: Sequence[int] | None = None) -> float:
    """Max over components of |analytic - central| / (|central| + 1e-12).

    ``x`` is promoted to float64. ``indices`` restricts the comparison to a
    subset of flat positions, which keeps checks on large tensors cheap.
    """
    base = np.array(x.data, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    loss = f(xt)
    loss.backward()
    analytic = np.zeros_like(base) if xt.grad is None else xt.grad.reshape(base.shape)

    flat = base.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in positions:
        plus = flat.copy()
        plus[i] += eps
        minus = flat.copy()
        minus[i] -= eps
        fp = float(f(Tensor(plus.reshape(base.shape))).data)
        fm = float(f(Tensor(minus.reshape(base.shape))).data)
        numeric = (fp - fm) / (2 * eps)
        err = abs(analytic.reshape(-1)[i] - numeric) / (abs(numeric) + 1e-12)
        worst = max(worst, err)
    return worst
