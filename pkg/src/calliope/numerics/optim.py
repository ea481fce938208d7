from __future__ import annotations

from typing import Mapping

import numpy as np

from .tensor import ShapeMismatch, Tensor


class Adam:
    """Adam with bias correction over a named set of parameters.

    Parameters without a ``.grad`` are skipped for that step; their moments
    are left untouched.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([self.t], dtype=np.int64)}
        for name in self.params:
            out[f"{prefix}.m.{name}"] = self.m[name]
            out[f"{prefix}.v.{name}"] = self.v[name]
        return out

    def load_state_dict(self, entries: Mapping[str, np.ndarray], prefix: str) -> None:
        self.t = int(entries[f"{prefix}.t"][0])
        for name in self.params:
            self.m[name] = np.array(entries[f"{prefix}.m.{name}"], copy=True)
            self.v[name] = np.array(entries[f"{prefix}.v.{name}"], copy=True)


def adam_step(state: Adam, params: Mapping[str, Tensor] | None = None, grads: Mapping[str, np.ndarray] | None = None) -> None:
    """Functional entry point: optionally install ``grads`` then step ``state``."""
    if params is not None and set(params) != set(state.params):
        raise ShapeMismatch("parameter names do not match optimizer state")
    if grads is not None:
        for name, g in grads.items():
            state.params[name].grad = g
    state.step()


def global_norm(params: Mapping[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return total**0.5


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> tuple[float, bool]:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping and whether clipping happened.
    """
    norm = global_norm(params)
    if norm <= max_norm or norm == 0.0:
        return norm, False
    factor = max_norm / norm
    for p in params.values():
        if p.grad is not None:
            p.grad = (p.grad * factor).astype(p.dtype, copy=False)
    return norm, True
