"""Central finite-difference verification of analytic gradients.

This is the tester of the testers: every differentiable unit in the package
is validated against numeric differentiation before its gradients are
trusted anywhere else.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

DEFAULT_H = 1e-5
REL_FLOOR = 1e-3


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    """|a - n| / max(|a| + |n|, floor).

    The floor keeps near-zero gradient entries from amplifying finite
    difference noise into spurious failures.
    """
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), floor)


def check_gradients(
    loss_and_grads: Callable[[], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    h: float = DEFAULT_H,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grads`` must recompute the forward and backward pass from the
    current contents of ``params`` (the same arrays, mutated in place here)
    and return (loss, grads) with grads keyed like params.  The callable must
    be deterministic: any data or randomness has to be frozen outside.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    _, analytic = loss_and_grads()
    analytic = {k: np.array(v, dtype=np.float64, copy=True) for k, v in analytic.items()}
    worst = 0.0
    for name, p in params.items():
        if name not in analytic:
            raise ValueError(f"loss_and_grads returned no gradient for parameter {name!r}")
        if analytic[name].shape != p.shape:
            raise ValueError(
                f"gradient shape {analytic[name].shape} does not match param {name!r} shape {p.shape}"
            )
        flat = p.reshape(-1)
        gflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            loss_plus, _ = loss_and_grads()
            flat[i] = orig - h
            loss_minus, _ = loss_and_grads()
            flat[i] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * h)
            worst = max(worst, relative_error(float(gflat[i]), numeric))
    return worst
