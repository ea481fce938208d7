from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, no_grad


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between taped gradients and central differences.

    ``x`` is one tensor or a sequence of tensors, passed positionally to ``f``;
    they should be float64 leaves. With ``max_coords`` only that many randomly
    chosen coordinates per tensor are probed. The error of one coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = f(*xs)
        tape.backward(loss, xs)
    analytic = [t.grad.copy() for t in xs]

    def value() -> float:
        with no_grad():
            return float(f(*xs).data)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(xs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            ana = float(a.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst
