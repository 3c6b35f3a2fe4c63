"""Adam optimizer with persistent per-parameter moment state."""

from __future__ import annotations

import numpy as np

from .tensor import Parameter


class Adam:
    """Standard Adam with bias correction.

    Moments are kept per parameter (keyed by name) in the parameter's dtype
    and survive across steps; ``step()`` zeroes the gradients afterwards so
    the next backward pass starts clean.
    """

    def __init__(
        self,
        params: list[Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got {betas}")
        self.params = list(params)
        self.lr = float(lr)
        self.betas = (float(b1), float(b2))
        self.eps = float(eps)
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.zero_grad()

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Moment buffers keyed by parameter name with ``.m``/``.v`` suffixes."""
        out: dict[str, np.ndarray] = {}
        for p in self.params:
            out[p.name + ".m"] = self.m[p.name]
            out[p.name + ".v"] = self.v[p.name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for p in self.params:
            if p.name + ".m" in tensors:
                self.m[p.name] = tensors[p.name + ".m"].astype(p.data.dtype).reshape(p.data.shape)
            if p.name + ".v" in tensors:
                self.v[p.name] = tensors[p.name + ".v"].astype(p.data.dtype).reshape(p.data.shape)
        self.t = int(t)
