"""Tape primitives: forward values, reverse-mode gradients, error contract.

Gradients are validated against an independent central-finite-difference
oracle evaluated through the same public forward path, never against the
tape's own backward.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adepinn.autodiff import Node, Tape, TapeError, as_tensor

RNG = np.random.default_rng(20240817)


def fd_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f at x, one probe per component."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def assert_close_rel(actual, expected, rel=1e-5, floor=1e-8):
    actual, expected = np.asarray(actual), np.asarray(expected)
    denom = np.maximum(np.maximum(np.abs(actual), np.abs(expected)), floor)
    worst = np.max(np.abs(actual - expected) / denom)
    assert worst < rel, f"worst relative error {worst:.3e} exceeds {rel}"


# -- forward values --------------------------------------------------------

def test_tanh_of_zero_is_zero():
    tape = Tape()
    out = tape.tanh(tape.leaf(np.zeros(3)))
    assert np.array_equal(tape.value(out), np.zeros(3))


def test_matmul_shape_algebra():
    tape = Tape()
    out = tape.matmul(tape.leaf(np.ones((2, 3))), tape.leaf(np.ones((3, 1))))
    assert tape.value(out).shape == (2, 1)


def test_reduce_mean_of_vector():
    tape = Tape()
    out = tape.mean(tape.leaf([2.0, 4.0, 6.0]))
    assert float(tape.value(out)) == 4.0


def test_forward_values_match_numpy():
    a = RNG.uniform(-2, 2, size=(4, 5))
    b = RNG.uniform(-2, 2, size=(4, 5))
    m = RNG.uniform(-2, 2, size=(5, 3))
    tape = Tape()
    ia, ib, im = tape.leaf(a), tape.leaf(b), tape.leaf(m)
    assert np.array_equal(tape.value(tape.add(ia, ib)), a + b)
    assert np.array_equal(tape.value(tape.sub(ia, ib)), a - b)
    assert np.array_equal(tape.value(tape.mul(ia, ib)), a * b)
    assert np.array_equal(tape.value(tape.matmul(ia, im)), a @ m)
    assert np.array_equal(tape.value(tape.tanh(ia)), np.tanh(a))
    assert np.array_equal(tape.value(tape.square(ia)), np.square(a))
    assert np.array_equal(tape.value(tape.exp(ia)), np.exp(a))
    assert np.array_equal(tape.value(tape.scale(ia, -1.5)), -1.5 * a)
    assert np.array_equal(tape.value(tape.sum(ia)), np.asarray(a.sum()))
    assert np.array_equal(tape.value(tape.mean(ia)), np.asarray(a.mean()))


def test_scalar_leaves_stay_zero_dimensional():
    tape = Tape()
    x = tape.leaf(3.5, trainable=True)
    assert tape.value(x).shape == ()
    grads = tape.backward(tape.square(x))
    assert grads[x].shape == ()
    assert grads[x] == pytest.approx(7.0)


def test_broadcasting_add_and_multiply():
    a = RNG.uniform(-1, 1, size=(6, 4))
    row = RNG.uniform(-1, 1, size=(1, 4))
    tape = Tape()
    out = tape.add(tape.leaf(a), tape.leaf(row))
    assert np.array_equal(tape.value(out), a + row)
    out = tape.mul(tape.leaf(a), tape.leaf(2.0))
    assert np.array_equal(tape.value(out), a * 2.0)


def test_node_ids_are_topologically_ordered():
    tape = Tape()
    x = tape.leaf(RNG.uniform(size=(3, 3)), trainable=True)
    y = tape.tanh(tape.matmul(x, tape.leaf(RNG.uniform(size=(3, 3)))))
    tape.mean(tape.square(y))
    for nid, node in enumerate(tape.nodes):
        assert all(i < nid for i in node.inputs)


# -- backward vs finite differences, one primitive at a time ---------------

def tape_scalar(build):
    """Evaluate a scalar-producing tape builder, returning (tape, root id)."""
    tape = Tape()
    root = build(tape)
    return tape, root


@pytest.mark.parametrize("name", [
    "matmul", "add", "subtract", "multiply", "tanh", "square", "exp",
    "scale", "sum", "mean",
])
def test_backward_matches_finite_differences_per_primitive(name):
    x = RNG.uniform(-2, 2, size=(3, 4))
    y = RNG.uniform(-2, 2, size=(4, 2)) if name == "matmul" \
        else RNG.uniform(-2, 2, size=(3, 4))

    def apply(tape, ix, iy):
        if name == "matmul":
            return tape.matmul(ix, iy)
        if name == "add":
            return tape.add(ix, iy)
        if name == "subtract":
            return tape.sub(ix, iy)
        if name == "multiply":
            return tape.mul(ix, iy)
        if name == "tanh":
            return tape.tanh(ix)
        if name == "square":
            return tape.square(ix)
        if name == "exp":
            return tape.exp(ix)
        if name == "scale":
            return tape.scale(ix, -0.7)
        if name == "sum":
            return tape.sum(ix)
        return tape.mean(ix)

    def run(xv, yv):
        tape = Tape()
        ix = tape.leaf(xv, trainable=True)
        iy = tape.leaf(yv, trainable=True)
        root = tape.sum(apply(tape, ix, iy))
        return tape, ix, iy, root

    tape, ix, iy, root = run(x, y)
    grads = tape.backward(root)
    for leaf_id, ref in ((ix, x), (iy, y)):
        def f(v, _leaf=leaf_id):
            xv = v if _leaf == ix else x
            yv = v if _leaf == iy else y
            t, _, _, r = run(xv, yv)
            return float(t.value(r))
        assert_close_rel(grads[leaf_id], fd_gradient(f, ref.copy()))


def test_backward_matches_finite_differences_with_broadcasting():
    a = RNG.uniform(-2, 2, size=(5, 3))
    row = RNG.uniform(-2, 2, size=(1, 3))
    scalar = np.asarray(0.8)

    def run(av, rv, sv):
        tape = Tape()
        ia = tape.leaf(av, trainable=True)
        ir = tape.leaf(rv, trainable=True)
        isc = tape.leaf(sv, trainable=True)
        out = tape.mul(tape.add(ia, ir), tape.sub(ia, isc))
        return tape, (ia, ir, isc), tape.mean(out)

    tape, ids, root = run(a, row, scalar)
    grads = tape.backward(root)
    assert grads[ids[0]].shape == a.shape
    assert grads[ids[1]].shape == row.shape
    assert grads[ids[2]].shape == ()
    for pos, ref in enumerate((a, row, scalar)):
        def f(v, _pos=pos):
            args = [a, row, scalar]
            args[_pos] = v
            t, _, r = run(*args)
            return float(t.value(r))
        assert_close_rel(grads[ids[pos]], fd_gradient(f, ref.copy()))


def test_two_layer_tanh_network_gradients_match_finite_differences():
    w1 = RNG.uniform(-1, 1, size=(3, 8))
    b1 = RNG.uniform(-1, 1, size=(8,))
    w2 = RNG.uniform(-1, 1, size=(8, 1))
    x = RNG.uniform(-1, 1, size=(10, 3))

    def run(w1v, b1v, w2v):
        tape = Tape()
        i1 = tape.leaf(w1v, trainable=True)
        ib = tape.leaf(b1v, trainable=True)
        i2 = tape.leaf(w2v, trainable=True)
        h = tape.tanh(tape.add(tape.matmul(tape.leaf(x), i1), ib))
        return tape, (i1, ib, i2), tape.mean(tape.square(tape.matmul(h, i2)))

    tape, ids, root = run(w1, b1, w2)
    grads = tape.backward(root)
    for pos, ref in enumerate((w1, b1, w2)):
        def f(v, _pos=pos):
            args = [w1, b1, w2]
            args[_pos] = v
            t, _, r = run(*args)
            return float(t.value(r))
        assert_close_rel(grads[ids[pos]], fd_gradient(f, ref.copy()))


def test_square_gradient_trivial_value():
    tape = Tape()
    x = tape.leaf(3.0, trainable=True)
    grads = tape.backward(tape.square(x))
    assert float(grads[x]) == pytest.approx(6.0, abs=1e-12)


def test_unreachable_trainable_leaf_gets_zero_gradient_of_matching_shape():
    tape = Tape()
    bystander = tape.leaf(RNG.uniform(size=(2, 3)), trainable=True)
    root = tape.sum(tape.leaf(np.ones(4)))
    grads = tape.backward(root)
    assert np.array_equal(grads[bystander], np.zeros((2, 3)))


def test_constant_subgraphs_do_not_pollute_gradients():
    # A large constant branch merged into the loss must leave the trainable
    # gradient exactly what the trainable branch alone produces.
    x = RNG.uniform(-1, 1, size=(4, 4))
    noise = RNG.uniform(-1, 1, size=(4, 4))
    tape = Tape()
    ix = tape.leaf(x, trainable=True)
    loss_a = tape.mean(tape.square(ix))
    tape_b = Tape()
    ixb = tape_b.leaf(x, trainable=True)
    const = tape_b.mean(tape_b.tanh(tape_b.leaf(noise)))
    loss_b = tape_b.add(tape_b.mean(tape_b.square(ixb)), const)
    ga = tape.backward(loss_a)[ix]
    gb = tape_b.backward(loss_b)[ixb]
    assert np.array_equal(ga, gb)


def test_backward_is_linear_in_the_root():
    x = RNG.uniform(-2, 2, size=(4, 3))
    a, b = 1.7, -0.42

    def build(tape, ix):
        f = tape.mean(tape.square(ix))
        g = tape.sum(tape.mul(ix, tape.tanh(ix)))
        return f, g

    t1 = Tape()
    i1 = t1.leaf(x, trainable=True)
    f1, g1 = build(t1, i1)
    combined = t1.add(t1.scale(f1, a), t1.scale(g1, b))
    lhs = t1.backward(combined)[i1]

    t2 = Tape()
    i2 = t2.leaf(x, trainable=True)
    f2, _ = build(t2, i2)
    gf = t2.backward(f2)[i2]
    t3 = Tape()
    i3 = t3.leaf(x, trainable=True)
    _, g3 = build(t3, i3)
    gg = t3.backward(g3)[i3]
    np.testing.assert_allclose(lhs, a * gf + b * gg, rtol=1e-12, atol=1e-14)


def test_identical_tapes_give_bit_identical_gradients():
    def build():
        rng = np.random.default_rng(99)
        tape = Tape()
        x = tape.leaf(rng.uniform(-1, 1, size=(16, 8)), trainable=True)
        w = tape.leaf(rng.uniform(-1, 1, size=(8, 8)), trainable=True)
        h = tape.tanh(tape.matmul(x, w))
        root = tape.mean(tape.square(h))
        return tape, (x, w), root

    t1, ids1, r1 = build()
    t2, ids2, r2 = build()
    g1, g2 = t1.backward(r1), t2.backward(r2)
    for a, b in zip(ids1, ids2):
        assert np.array_equal(g1[a], g2[b])


def test_gradient_accumulates_over_multiple_consumers():
    # x feeds the root through two paths: d/dx [x*x + 3x] = 2x + 3.
    tape = Tape()
    x = tape.leaf(np.array([1.0, -2.0, 0.5]), trainable=True)
    root = tape.sum(tape.add(tape.mul(x, x), tape.scale(x, 3.0)))
    g = tape.backward(root)[x]
    np.testing.assert_allclose(g, 2.0 * np.array([1.0, -2.0, 0.5]) + 3.0,
                               rtol=0, atol=1e-15)


# -- error contract --------------------------------------------------------

def test_unknown_op_is_rejected():
    with pytest.raises(TapeError, match="unknown op"):
        Tape().record("convolve", ())


def test_matmul_shape_mismatch_reports_both_shapes():
    tape = Tape()
    a = tape.leaf(np.ones((2, 3)))
    b = tape.leaf(np.ones((4, 5)))
    with pytest.raises(TapeError) as err:
        tape.matmul(a, b)
    assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)


def test_broadcast_mismatch_reports_both_shapes():
    tape = Tape()
    a = tape.leaf(np.ones((2, 3)))
    b = tape.leaf(np.ones((4, 3)))
    with pytest.raises(TapeError) as err:
        tape.add(a, b)
    assert "(2, 3)" in str(err.value) and "(4, 3)" in str(err.value)


def test_non_finite_result_identifies_the_node():
    tape = Tape()
    x = tape.leaf(np.array([1.0, 1000.0]))
    with pytest.raises(TapeError) as err:
        tape.exp(x)  # overflows to inf
    msg = str(err.value)
    assert "non-finite" in msg and "node 1" in msg and "elementwise-exp" in msg


def test_arity_and_leaf_input_errors():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(TapeError, match="takes one input"):
        tape.record("elementwise-tanh", (x, x))
    with pytest.raises(TapeError, match="takes two inputs"):
        tape.record("add", (x,))
    with pytest.raises(TapeError, match="leaf takes no inputs"):
        tape.record("leaf", (x,), np.ones(2))
    with pytest.raises(TapeError, match="not on the tape"):
        tape.record("elementwise-square", (99,))


def test_scalar_scale_payload_validation():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(TapeError, match="payload"):
        tape.scale(x, float("nan"))
    with pytest.raises(TapeError, match="payload"):
        tape.record("scalar-scale", (x,), "fast")


def test_reduce_mean_of_empty_tensor_is_rejected():
    tape = Tape()
    x = tape.leaf(np.zeros((0, 3)))
    with pytest.raises(TapeError, match="empty"):
        tape.mean(x)


def test_backward_requires_scalar_root():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)), trainable=True)
    with pytest.raises(TapeError, match="scalar"):
        tape.backward(x)
    with pytest.raises(TapeError, match="not on the tape"):
        tape.backward(123)


def test_tape_is_frozen_during_backward():
    tape = Tape()
    x = tape.leaf(np.ones(2), trainable=True)
    root = tape.sum(x)

    captured = {}
    original = Tape._vjp

    def spy(self, node, g):
        if "hit" not in captured:
            captured["hit"] = True
            with pytest.raises(TapeError, match="frozen"):
                self.leaf(np.ones(1))
        yield from original(self, node, g)

    Tape._vjp = spy
    try:
        tape.backward(root)
    finally:
        Tape._vjp = original
    assert captured.get("hit")


# -- property-based checks -------------------------------------------------

@given(st.lists(st.floats(min_value=-2, max_value=2, allow_nan=False),
                min_size=1, max_size=12),
       st.lists(st.floats(min_value=-2, max_value=2, allow_nan=False),
                min_size=1, max_size=12))
@settings(max_examples=60, deadline=None)
def test_elementwise_ops_agree_with_numpy(xs, ys):
    n = min(len(xs), len(ys))
    a, b = np.asarray(xs[:n]), np.asarray(ys[:n])
    tape = Tape()
    ia, ib = tape.leaf(a), tape.leaf(b)
    assert np.array_equal(tape.value(tape.add(ia, ib)), a + b)
    assert np.array_equal(tape.value(tape.mul(ia, ib)), a * b)
    assert np.array_equal(tape.value(tape.sub(ia, ib)), a - b)


@given(st.integers(min_value=1, max_value=5),
       st.integers(min_value=1, max_value=5),
       st.integers(min_value=0, max_value=2 ** 31 - 1))
@settings(max_examples=40, deadline=None)
def test_sum_gradient_is_ones_and_mean_gradient_uniform(rows, cols, seed):
    x = np.random.default_rng(seed).uniform(-2, 2, size=(rows, cols))
    tape = Tape()
    ix = tape.leaf(x, trainable=True)
    g = tape.backward(tape.sum(ix))[ix]
    assert np.array_equal(g, np.ones_like(x))
    tape = Tape()
    ix = tape.leaf(x, trainable=True)
    g = tape.backward(tape.mean(ix))[ix]
    np.testing.assert_allclose(g, np.full_like(x, 1.0 / x.size), rtol=0, atol=0)


def test_as_tensor_coerces_and_preserves_scalars():
    assert as_tensor([1, 2]).dtype == np.float64
    assert as_tensor(2).shape == ()
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    out = as_tensor(arr)
    assert out.dtype == np.float64 and out.flags["C_CONTIGUOUS"]


def test_node_dataclass_round_trip():
    node = Node("leaf", (), np.zeros(2), trainable=True)
    assert node.op == "leaf" and node.trainable and node.inputs == ()
