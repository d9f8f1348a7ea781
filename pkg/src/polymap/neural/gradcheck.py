"""Central finite-difference verification of backward gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .params import ParamStore
from .tensor import Tensor


def finite_difference_check(
    build_loss: Callable[[], Tensor],
    params: dict[str, Tensor] | ParamStore,
    eps: float = 1e-5,
    max_coords: int = 200,
    rng: np.random.RandomState | None = None,
) -> float:
    """Max relative error between backward gradients and central differences.

    `build_loss` must rebuild the scalar loss graph from the current
    parameter data each call.  At most `max_coords` coordinates are probed,
    sampled across all parameters.  The relative error of a coordinate is
    |analytic - fd| / max(|fd|, 1e-3), so a doubled gradient reports ~1.
    """
    if isinstance(params, ParamStore):
        params = params.params
    if rng is None:
        rng = np.random.RandomState(0)

    for t in params.values():
        t.grad = None
    loss = build_loss()
    loss.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }

    coords = [(name, i) for name, t in params.items() for i in range(t.data.size)]
    if len(coords) > max_coords:
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in picks]

    worst = 0.0
    for name, i in coords:
        data = params[name].data
        orig = data.flat[i]
        data.flat[i] = orig + eps
        up = build_loss().item()
        data.flat[i] = orig - eps
        down = build_loss().item()
        data.flat[i] = orig
        fd = (up - down) / (2.0 * eps)
        a = analytic[name].flat[i]
        rel = abs(a - fd) / max(abs(fd), 1e-3)
        worst = max(worst, rel)
    return worst
