"""Named parameter/buffer store with a decoupled-weight-decay Adam update."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Holds learnable tensors, persistent buffers, and optimizer moments."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.moment1: dict[str, np.ndarray] = {}
        self.moment2: dict[str, np.ndarray] = {}
        self.step = 0

    def add_param(self, name: str, array: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already exists")
        t = Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.moment1[name] = np.zeros_like(t.data)
        self.moment2[name] = np.zeros_like(t.data)
        return t

    def add_buffer(self, name: str, array: np.ndarray) -> np.ndarray:
        if name in self.buffers:
            raise ValueError(f"buffer {name!r} already exists")
        self.buffers[name] = np.asarray(array, dtype=np.float64)
        return self.buffers[name]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def buffer(self, name: str) -> np.ndarray:
        return self.buffers[name]

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def adamw_step(
        self,
        lr: float,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        lr_scales: dict[str, float] | None = None,
    ) -> None:
        """One decoupled-weight-decay adaptive update over all parameters.

        `lr_scales` maps parameter-name prefixes to learning-rate
        multipliers (e.g. a slower backbone-style group).
        """
        self.step += 1
        bc1 = 1.0 - beta1**self.step
        bc2 = 1.0 - beta2**self.step
        for name, p in self.params.items():
            rate = lr
            if lr_scales:
                for prefix, factor in lr_scales.items():
                    if name.startswith(prefix):
                        rate = lr * factor
                        break
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.moment1[name]
            v = self.moment2[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + eps)
            p.data -= rate * (update + weight_decay * p.data)
