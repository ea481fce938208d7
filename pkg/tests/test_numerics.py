from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calliope.numerics import (
    Adam,
    NonFiniteValue,
    NotScalar,
    ShapeMismatch,
    Tape,
    Tensor,
    checkpoint,
    clip_grad_norm,
    global_norm,
    grad_check,
    no_grad,
    ops,
    precision,
)


def f64(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), dtype=np.float64)


# forward ops


def test_softmax_of_zeros_is_uniform():
    out = ops.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=1e-6)


def test_layer_norm_unit_rows(rng):
    x = Tensor(rng.normal(3.0, 5.0, size=(7, 16)), dtype=np.float64)
    y = ops.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
    np.testing.assert_allclose(y.data.mean(-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(y.data.var(-1), 1.0, atol=1e-5)


def test_cross_entropy_uniform_is_log_vocab():
    logits = Tensor(np.zeros((5, 323)))
    loss = ops.cross_entropy(logits, np.array([0, 17, 200, 321, 322]))
    assert loss.item() == pytest.approx(math.log(323), abs=1e-5)


def test_cross_entropy_ignores_pad():
    logits = Tensor(np.random.default_rng(0).normal(size=(3, 323)), dtype=np.float64)
    full = ops.cross_entropy(logits, np.array([5, 320, 320]))
    single = ops.cross_entropy(Tensor(logits.data[:1]), np.array([5]))
    assert full.item() == pytest.approx(single.item(), rel=1e-12)


def test_non_finite_raises():
    with pytest.raises(NonFiniteValue), np.errstate(divide="ignore"):
        ops.log(Tensor([0.0, 1.0]))
    with pytest.raises(NonFiniteValue):
        ops.mul(Tensor([np.inf]), Tensor([1.0]))


def test_shape_mismatch_raises():
    with pytest.raises(ShapeMismatch):
        ops.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 3))))
    with pytest.raises(ShapeMismatch):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_item_requires_scalar():
    with pytest.raises(NotScalar):
        Tensor([1.0, 2.0]).item()


def test_precision_context_sets_dtype():
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_no_grad_records_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        with no_grad():
            ops.sum(ops.mul(x, x))
        assert len(tape) == 0


# backward


def test_sum_gradient_is_ones(rng):
    x = f64(rng, 3, 4)
    x.requires_grad = True
    with Tape() as tape:
        tape.backward(ops.sum(x), [x])
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_matmul_gradient_closed_form(rng):
    a, b = f64(rng, 3, 4), f64(rng, 4, 5)
    a.requires_grad = b.requires_grad = True
    with Tape() as tape:
        tape.backward(ops.sum(ops.matmul(a, b)), [a, b])
    np.testing.assert_allclose(a.grad, np.ones((3, 5)) @ b.data.T, rtol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ np.ones((3, 5)), rtol=1e-12)


def test_unused_param_gets_zero_grad(rng):
    x, y = f64(rng, 2), f64(rng, 3)
    x.requires_grad = y.requires_grad = True
    with Tape() as tape:
        tape.backward(ops.sum(x), [x, y])
    np.testing.assert_array_equal(y.grad, np.zeros(3))


def test_shared_input_accumulates(rng):
    x = f64(rng, 4)
    x.requires_grad = True
    with Tape() as tape:
        tape.backward(ops.sum(ops.add(x, x)), [x])
    np.testing.assert_array_equal(x.grad, np.full(4, 2.0))


def _composite_cases(rng):
    w = f64(rng, 6, 5, scale=0.5)
    b = f64(rng, 5)
    g = Tensor(1.0 + 0.1 * rng.normal(size=5), dtype=np.float64)
    beta = f64(rng, 5)
    x = f64(rng, 3, 6)

    def ln_chain(x, w, b, g, beta):
        h = ops.gelu(ops.linear(x, w, b))
        return ops.sum(ops.mul(ops.layer_norm(h, g, beta), ops.layer_norm(h, g, beta)))

    def ce_head(x, w, b):
        return ops.cross_entropy(ops.linear(x, w, b), np.array([1, 4, 320]))

    def attention(x, w):
        q = ops.linear(x, w)
        s = ops.softmax(ops.scale(ops.matmul(q, ops.swap_last(q)), 0.5))
        return ops.sum(ops.sigmoid(ops.matmul(s, q)))

    return [
        (ln_chain, [x, w, b, g, beta]),
        (ce_head, [x, w, b]),
        (attention, [x, w]),
    ]


def test_composite_graphs_match_finite_differences(rng):
    for f, args in _composite_cases(rng):
        assert grad_check(f, args) < 1e-3, f.__name__


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["embed", "concat", "slice", "mask", "take", "logsig", "mean"]))
def test_ops_backward_property(seed, op):
    rng = np.random.default_rng(seed)
    x = f64(rng, 4, 6)
    if op == "embed":
        f = lambda t: ops.sum(ops.mul(ops.embedding(t, np.array([[0, 2, 2], [3, 1, 0]])), ops.embedding(t, np.array([[1, 1, 3], [0, 0, 2]]))))
    elif op == "concat":
        f = lambda t: ops.sum(ops.gelu(ops.concat([t, ops.scale(t, 2.0)], axis=0)))
    elif op == "slice":
        f = lambda t: ops.sum(ops.mul(ops.slice_axis(t, 1, 4, axis=1), ops.split(t, 2, axis=1)[0]))
    elif op == "mask":
        f = lambda t: ops.sum(ops.softmax(ops.masked_fill(t, np.eye(4, 6, dtype=bool), -1e9)))
    elif op == "take":
        idx = np.argsort(rng.random((4, 6)), axis=-1)[:, :3]
        f = lambda t: ops.sum(ops.gelu(ops.take_along_last(t, idx)))
    elif op == "logsig":
        f = lambda t: ops.sum(ops.log_sigmoid(t))
    else:
        f = lambda t: ops.mean(ops.mul(ops.reshape(ops.transpose(t, (1, 0)), (3, 8)), ops.reshape(t, (3, 8))))
    assert grad_check(f, x) < 1e-3


def test_broadcast_add_reduces_gradient(rng):
    x, b = f64(rng, 2, 3, 4), f64(rng, 4)
    assert grad_check(lambda x, b: ops.sum(ops.gelu(ops.add(x, b))), [x, b]) < 1e-3


# optimizer


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), dtype=np.float64)
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, 1.0]), dtype=np.float64)
    opt = Adam({"p": p}, lr=1e-2)
    p.grad = np.array([3.0, -0.5])
    opt.step()
    np.testing.assert_allclose(p.data, [1.0 - 1e-2, 1.0 + 1e-2], rtol=1e-6)


def test_adam_minimizes_square():
    w = Tensor(np.array([1.0]), dtype=np.float64)
    opt = Adam({"w": w}, lr=1e-2)
    seen = [abs(w.data[0])]
    for _ in range(100):
        w.grad = 2 * w.data
        opt.step()
        seen.append(abs(w.data[0]))
    assert all(b < a for a, b in zip(seen, seen[1:]))


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), dtype=np.float64)
    b = Tensor(np.zeros(1), dtype=np.float64)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    norm, clipped = clip_grad_norm({"a": a, "b": b}, 1.0)
    assert norm == pytest.approx(5.0) and clipped
    assert global_norm({"a": a, "b": b}) == pytest.approx(1.0)
    norm, clipped = clip_grad_norm({"a": a, "b": b}, 1.0 + 1e-9)
    assert not clipped


def test_adam_state_round_trip(rng):
    p = f64(rng, 3)
    opt = Adam({"p": p})
    p.grad = np.ones(3)
    opt.step()
    other = Adam({"p": Tensor(p.data.copy())})
    other.load_state_dict(opt.state_dict("o"), "o")
    assert other.t == 1
    np.testing.assert_array_equal(other.m["p"], opt.m["p"])
    np.testing.assert_array_equal(other.v["p"], opt.v["p"])


# checkpoint format


def test_checkpoint_round_trip(tmp_path, rng):
    entries = {
        "a.w": rng.normal(size=(3, 4)).astype(np.float32),
        "b": rng.normal(size=5),
        "step": np.array([7], dtype=np.int64),
        "state": np.array([1, 2**63 + 5], dtype=np.uint64),
        "text": np.frombuffer("héllo".encode(), dtype=np.uint8),
        "ids": np.arange(6, dtype=np.int32).reshape(2, 3),
    }
    path = tmp_path / "x.cllp"
    checkpoint.save(path, entries)
    back = checkpoint.load(path)
    assert list(back) == list(entries)
    for k, v in entries.items():
        assert back[k].dtype == v.dtype
        np.testing.assert_array_equal(back[k], v)


def test_checkpoint_layout_by_hand():
    data = checkpoint.dumps({"ab": np.array([1.5], dtype=np.float32)})
    expected = (
        b"CLLP"
        + (1).to_bytes(4, "little")
        + (1).to_bytes(4, "little")
        + (2).to_bytes(4, "little")
        + b"ab"
        + bytes([0, 1])
        + (1).to_bytes(4, "little")
        + np.array([1.5], dtype="<f4").tobytes()
    )
    assert data == expected


def test_checkpoint_rejects_garbage():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"XXXX" + bytes(8))
    good = checkpoint.dumps({"a": np.zeros(4)})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(good[:-3])
