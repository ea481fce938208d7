"""Building blocks: parameter containers, attention, and Transformer layers."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from ..numerics import Tensor, default_dtype, ops

NEG_INF = -1e9


class Module:
    """Parameter container.

    Every public :class:`Tensor` attribute is a parameter; public ``Module``
    attributes and dicts of modules are walked recursively to build dotted
    names. Attributes starting with ``_`` are ignored.
    """

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out[full] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(full + "."))
        return out

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, dict):
                for key, sub in value.items():
                    yield f"{name}.{key}", sub
            else:
                yield name, value

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


def param(array: np.ndarray) -> Tensor:
    return Tensor(np.asarray(array, dtype=default_dtype()), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, std: float | None = None, bias: bool = True):
        std = 1.0 / math.sqrt(n_in) if std is None else std
        self.w = param(rng.normal(0.0, std, size=(n_in, n_out)))
        if bias:
            self.b = param(np.zeros(n_out))
        self._bias = bias

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.w, self.b if self._bias else None)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.g = param(np.ones(dim))
        self.b = param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.g, self.b)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.ff1 = Linear(d_model, d_ff, rng)
        self.ff2 = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.ff2(ops.gelu(self.ff1(x)))


def relative_index(length: int, span: int) -> np.ndarray:
    """``index[i, j]`` is the row of a relative table holding distance ``i - j``.

    ``span`` is the number of rows in the table (``2 * max_len - 1``), with
    distance zero in the middle row.
    """
    center = (span - 1) // 2
    if length - 1 > center:
        raise ValueError(f"sequence of length {length} exceeds relative table of {span} rows")
    i = np.arange(length)[:, None]
    j = np.arange(length)[None, :]
    return i - j + center


def rel_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    r: Tensor,
    u: Tensor,
    v_bias: Tensor,
    causal: bool = False,
    key_mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Multi-head attention with relative position terms.

    Shapes: ``q, k, v`` are (B, H, L, dh); ``r`` is (H, 2*Lmax-1, dh) with the
    row for distance ``i - j`` at ``i - j + Lmax - 1``; ``u`` and ``v_bias`` are
    (H, dh). ``key_mask`` is (B, L), true where a key may be attended.

    score(i, j) = (q_i.k_j + q_i.r_{i-j} + u.k_j + v_bias.r_{i-j}) / sqrt(dh)

    Returns the attended values (B, H, L, dh) and the weights (B, H, L, L).
    """
    n_heads, d_head = u.shape
    length = q.shape[-2]
    if q.shape[-3] != n_heads or r.shape[0] != n_heads or r.shape[-1] != d_head or q.shape[-1] != d_head:
        raise ops.ShapeMismatch(f"rel_attention: q {q.shape}, r {r.shape}, u {u.shape}")
    qu = ops.add(q, ops.reshape(u, (n_heads, 1, d_head)))
    qv = ops.add(q, ops.reshape(v_bias, (n_heads, 1, d_head)))
    content = ops.matmul(qu, ops.swap_last(k))
    by_distance = ops.matmul(qv, ops.swap_last(r))
    position = ops.take_along_last(by_distance, relative_index(length, r.shape[1]))
    scores = ops.scale(ops.add(content, position), 1.0 / math.sqrt(d_head))
    mask = np.zeros((length, length), dtype=bool)
    if causal:
        mask = np.triu(np.ones((length, length), dtype=bool), k=1)
    if key_mask is not None:
        mask = mask | ~np.asarray(key_mask, dtype=bool)[:, None, None, :]
    if mask.any():
        scores = ops.masked_fill(scores, mask, NEG_INF)
    weights = ops.softmax(scores, axis=-1)
    return ops.matmul(weights, v), weights


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, length, d = x.shape
    return ops.transpose(ops.reshape(x, (b, length, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, length, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, length, h * dh))


class RelativeSelfAttention(Module):
    def __init__(self, d_model: int, n_heads: int, max_len: int, rng: np.random.Generator):
        d_head = d_model // n_heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.o = Linear(d_model, d_model, rng)
        self.r = param(rng.normal(0.0, 1.0 / math.sqrt(d_head), size=(n_heads, 2 * max_len - 1, d_head)))
        self.u = param(np.zeros((n_heads, d_head)))
        self.v_bias = param(np.zeros((n_heads, d_head)))
        self._n_heads = n_heads

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None, causal: bool = False) -> Tensor:
        h = self._n_heads
        out, _ = rel_attention(
            _split_heads(self.q(x), h),
            _split_heads(self.k(x), h),
            _split_heads(self.v(x), h),
            self.r,
            self.u,
            self.v_bias,
            causal=causal,
            key_mask=key_mask,
        )
        return self.o(_merge_heads(out))


class SourceAttention(Module):
    """Queries from the decoder stream, keys and values from an external memory."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.o = Linear(d_model, d_model, rng)
        self._n_heads = n_heads

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        h = self._n_heads
        q = _split_heads(self.q(x), h)
        k = _split_heads(self.k(memory), h)
        v = _split_heads(self.v(memory), h)
        scores = ops.scale(ops.matmul(q, ops.swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
        return self.o(_merge_heads(ops.matmul(ops.softmax(scores), v)))


class EncoderLayer(Module):
    """Pre-norm Transformer layer with relative self-attention."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, max_len: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d_model)
        self.attn = RelativeSelfAttention(d_model, n_heads, max_len, rng)
        self.ln2 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, rng)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None) -> Tensor:
        x = ops.add(x, self.attn(self.ln1(x), key_mask=key_mask))
        return ops.add(x, self.ff(self.ln2(x)))


class DecoderLayer(Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int, max_len: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d_model)
        self.self_attn = RelativeSelfAttention(d_model, n_heads, max_len, rng)
        self.ln2 = LayerNorm(d_model)
        self.src_attn = SourceAttention(d_model, n_heads, rng)
        self.ln3 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, rng)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        x = ops.add(x, self.self_attn(self.ln1(x), causal=True))
        x = ops.add(x, self.src_attn(self.ln2(x), memory))
        return ops.add(x, self.ff(self.ln3(x)))
