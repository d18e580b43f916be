"""Plain SGD with optional L2 weight decay."""

from __future__ import annotations

from typing import Mapping, MutableMapping

import numpy as np


def sgd_step(
    params: MutableMapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float,
    l2: float = 0.0,
) -> None:
    """In-place update p <- p - lr * (g + l2 * p) for every named parameter.

    Non-finite gradients abort the step: they signal divergence and silently
    folding them in would poison every later update.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if l2 < 0:
        raise ValueError(f"l2 must be >= 0, got {l2}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match param {name!r} shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
        p -= lr * (g + l2 * p)
