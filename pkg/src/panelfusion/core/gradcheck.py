"""Finite-difference verification of backward()."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ContractError
from .tensor import Tensor


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error between backward() and central differences, both in float64.

    ``f`` is evaluated on a float64 copy of ``x``. Relative error per element is
    ``|a - n| / max(|a|, |n|, floor)``. ``max_elements`` checks a random subset
    for large inputs.
    """
    if not 1e-5 <= h <= 1e-2:
        raise ContractError(f"step h={h} outside [1e-5, 1e-2]")
    base = np.array(x.data, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    out = f(xt)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = np.zeros(base.size) if xt.grad is None else xt.grad.reshape(-1)

    idx = np.arange(base.size)
    if max_elements is not None and base.size > max_elements:
        idx = np.random.default_rng(seed).choice(base.size, max_elements, replace=False)

    flat = base.reshape(-1)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base, dtype=np.float64)).item()
        flat[i] = orig - h
        fm = f(Tensor(base, dtype=np.float64)).item()
        flat[i] = orig
        num = (fp - fm) / (2.0 * h)
        a = analytic[i]
        err = abs(a - num) / max(abs(a), abs(num), floor)
        worst = max(worst, err)
    return worst
