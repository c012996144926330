"""Gradient correctness and error behavior of the autodiff core."""

from __future__ import annotations

import numpy as np
import pytest

from sigpep import autodiff as ad
from sigpep.autodiff import (CalledBeforeForward, Graph, NonFiniteValue,
                             NonScalarOutput, ParameterStore, ShapeMismatch,
                             Tensor, finite_difference_gradient)

RNG = np.random.Generator(np.random.PCG64(1234))


def check_param_grad(build, params: dict, inputs: dict | None = None,
                     tol: float = 1e-4) -> None:
    """Analytic vs central-difference gradients for every parameter."""
    inputs = inputs or {}
    graph = Graph(build, {k: np.asarray(v, dtype=np.float64) for k, v in params.items()})
    graph.evaluate(inputs)
    grads = graph.backward()
    for name in params:
        fd = finite_difference_gradient(graph, inputs, name)
        a, f = grads[name], fd
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(f)))
        err = np.max(np.abs(a - f) / denom)
        assert err <= tol, f"{name}: gradient error {err:.3e}"


# ---------------------------------------------------------------------------
# per-op finite-difference checks


def test_matmul_grad():
    for _ in range(10):
        a = RNG.standard_normal((3, 4))
        b = RNG.standard_normal((4, 5))
        seed = RNG.standard_normal((3, 5))
        check_param_grad(
            lambda i, P: {"y": ad.tsum(ad.mul(ad.matmul(P["a"], P["b"]),
                                              ad.constant(seed)))},
            {"a": a, "b": b})


def test_matmul_transpose_b_grad():
    a = RNG.standard_normal((3, 4))
    b = RNG.standard_normal((5, 4))
    check_param_grad(
        lambda i, P: {"y": ad.tsum(ad.matmul(P["a"], P["b"], transpose_b=True))},
        {"a": a, "b": b})


def test_matmul_3d_by_2d_flattened_grad():
    a = RNG.standard_normal((2, 3, 4))
    b = RNG.standard_normal((4, 5))
    check_param_grad(lambda i, P: {"y": ad.tsum(ad.matmul(P["a"], P["b"]))},
                     {"a": a, "b": b})
    # and the transposed variant used by the cosine head
    b2 = RNG.standard_normal((5, 4))
    check_param_grad(
        lambda i, P: {"y": ad.tsum(ad.matmul(P["a"], P["b"], transpose_b=True))},
        {"a": a, "b": b2})


def test_matmul_batched_grad():
    a = RNG.standard_normal((2, 3, 4))
    b = RNG.standard_normal((2, 4, 3))
    check_param_grad(
        lambda i, P: {"y": ad.tsum(ad.matmul(P["a"], P["b"]))}, {"a": a, "b": b})
    check_param_grad(
        lambda i, P: {"y": ad.tsum(ad.matmul(P["a"], P["b"], transpose_b=True))},
        {"a": a, "b": RNG.standard_normal((2, 3, 4))})


def test_identity_matmul_passes_gradient_through():
    a = Tensor(RNG.standard_normal((4, 4)))
    out = ad.tsum(ad.matmul(a, ad.constant(np.eye(4))))
    ad.backward_from(out)
    np.testing.assert_allclose(a.grad, np.ones((4, 4)), atol=1e-12)


def test_add_mul_broadcast_grad():
    a = RNG.standard_normal((3, 4))
    b = RNG.standard_normal((4,))       # broadcast bias
    c = RNG.standard_normal((3, 1))     # broadcast column
    check_param_grad(
        lambda i, P: {"y": ad.tsum(ad.mul(ad.add(P["a"], P["b"]), P["c"]))},
        {"a": a, "b": b, "c": c})


def test_concat_and_slice_grad():
    a = RNG.standard_normal((2, 3))
    b = RNG.standard_normal((2, 5))

    def build(i, P):
        cat = ad.concat([P["a"], P["b"]], axis=-1)
        part = ad.index(cat, (slice(None), slice(1, 6)))
        return {"y": ad.tsum(ad.mul(part, part))}

    check_param_grad(build, {"a": a, "b": b})


def test_slice_accumulate_matches_vjp():
    # the in-place accumulate path must agree with the materializing vjp
    x = RNG.standard_normal((4, 6))
    t = Tensor(x)
    s1 = ad.index(t, (slice(None), slice(0, 3)))
    s2 = ad.index(t, (slice(None), slice(2, 6)))
    out = ad.add(ad.tsum(ad.mul(s1, s1)), ad.tsum(s2))
    ad.backward_from(out)
    expected = np.zeros_like(x)
    expected[:, 0:3] += 2 * x[:, 0:3]
    expected[:, 2:6] += 1.0
    np.testing.assert_allclose(t.grad, expected, atol=1e-12)


def test_reshape_grad():
    a = RNG.standard_normal((2, 3, 4))
    seed = RNG.standard_normal((6, 4))
    check_param_grad(
        lambda i, P: {"y": ad.tsum(ad.mul(ad.reshape(P["a"], (6, 4)),
                                          ad.constant(seed)))},
        {"a": a})


@pytest.mark.parametrize("op", [ad.tanh, ad.sigmoid, ad.relu, ad.exp])
def test_elementwise_grads(op):
    for _ in range(5):
        a = RNG.standard_normal((3, 5))
        check_param_grad(lambda i, P: {"y": ad.tsum(op(P["a"]))}, {"a": a})


def test_log_power_grads():
    a = RNG.uniform(0.5, 2.0, (3, 4))
    check_param_grad(lambda i, P: {"y": ad.tsum(ad.log(P["a"]))}, {"a": a})
    check_param_grad(lambda i, P: {"y": ad.tsum(ad.power(P["a"], 1.7))}, {"a": a})


def test_softmax_rows_grad_and_values():
    a = RNG.standard_normal((4, 6))
    seed = RNG.standard_normal((4, 6))
    check_param_grad(
        lambda i, P: {"y": ad.tsum(ad.mul(ad.softmax_rows(P["a"]),
                                          ad.constant(seed)))},
        {"a": a})
    out = ad.softmax_rows(Tensor(np.zeros((2, 4)))).data
    np.testing.assert_allclose(out, np.full((2, 4), 0.25), atol=1e-12)


def test_softmax_shift_invariance():
    a = RNG.standard_normal((3, 5))
    s1 = ad.softmax_rows(Tensor(a)).data
    s2 = ad.softmax_rows(Tensor(a + 1000.0)).data
    np.testing.assert_allclose(s1, s2, atol=1e-12)


def test_mean_sum_grads():
    a = RNG.standard_normal((3, 4))
    check_param_grad(lambda i, P: {"y": ad.tmean(ad.mul(P["a"], P["a"]))}, {"a": a})
    check_param_grad(lambda i, P: {"y": ad.tmean(ad.tsum(P["a"], axis=1))}, {"a": a})
    # sum of x: gradient is all ones
    t = Tensor(a)
    ad.backward_from(ad.tsum(t))
    np.testing.assert_allclose(t.grad, np.ones_like(a), atol=1e-12)


def test_sum_of_squares_hand_gradient():
    t = Tensor(np.array([1.0, 2.0]).reshape(1, 2))
    ad.backward_from(ad.tsum(ad.mul(t, t)))
    np.testing.assert_allclose(t.grad, [[2.0, 4.0]], atol=1e-12)


def test_tanh_at_zero():
    assert float(ad.tanh(Tensor(np.zeros(()))).data) == 0.0
    assert float(ad.sigmoid(Tensor(np.zeros(()))).data) == 0.5


def test_conv1d_same_grad():
    x = RNG.standard_normal((2, 7, 3))
    w = RNG.standard_normal((3, 3, 4))
    b = RNG.standard_normal(4)
    seed = RNG.standard_normal((2, 7, 4))
    check_param_grad(
        lambda i, P: {"y": ad.tsum(ad.mul(ad.conv1d_same(P["x"], P["w"], P["b"]),
                                          ad.constant(seed)))},
        {"x": x, "w": w, "b": b})


def test_conv1d_same_matches_direct_sum():
    # K=3 'same' conv against an explicit loop
    x = RNG.standard_normal((1, 5, 2))
    w = RNG.standard_normal((3, 2, 3))
    out = ad.conv1d_same(Tensor(x), Tensor(w)).data
    ref = np.zeros((1, 5, 3))
    xp = np.pad(x, [(0, 0), (1, 1), (0, 0)])
    for pos in range(5):
        for k in range(3):
            ref[0, pos] += xp[0, pos + k] @ w[k]
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_even_kernel_padding_is_right_heavy():
    x = np.ones((1, 4, 1))
    w = np.ones((2, 1, 1))
    out = ad.conv1d_same(Tensor(x), Tensor(w)).data[0, :, 0]
    # K=2: pad 0 left, 1 right; last output sees one real tap
    np.testing.assert_allclose(out, [2, 2, 2, 1], atol=1e-12)


def test_l2_normalize_rows_grad_and_orthogonality():
    a = RNG.standard_normal((4, 6)) * 3.0
    seed = RNG.standard_normal((4, 6))
    check_param_grad(
        lambda i, P: {"y": ad.tsum(ad.mul(ad.l2_normalize_rows(P["a"]),
                                          ad.constant(seed)))},
        {"a": a})
    # the jacobian maps x itself to zero: norm is scale-invariant
    t = Tensor(a)
    out = ad.l2_normalize_rows(t)
    ad.backward_from(ad.tsum(ad.mul(out, ad.constant(a))))
    # d/dx sum(x_hat . x) where seed is x: component along x must vanish
    proj = (t.grad * a).sum(axis=-1)
    np.testing.assert_allclose(proj, np.zeros(4), atol=1e-9)


def test_l2_normalize_near_zero_rows_pass_through():
    x = np.array([[1e-20, 0.0, 0.0], [3.0, 4.0, 0.0]])
    out = ad.l2_normalize_rows(Tensor(x)).data
    np.testing.assert_allclose(out[0], x[0], atol=1e-25)
    np.testing.assert_allclose(np.linalg.norm(out[1]), 1.0, atol=1e-12)


def test_masked_fill_grad_blocks_masked_entries():
    a = RNG.standard_normal((3, 4))
    mask = RNG.random((3, 4)) < 0.4
    t = Tensor(a)
    ad.backward_from(ad.tsum(ad.masked_fill(t, mask, -1e9)))
    np.testing.assert_allclose(t.grad, (~mask).astype(float), atol=1e-12)


def test_diamond_fanout_accumulates():
    # y = sum(x*x) + sum(x): grad = 2x + 1
    x = RNG.standard_normal((3, 3))
    t = Tensor(x)
    ad.backward_from(ad.add(ad.tsum(ad.mul(t, t)), ad.tsum(t)))
    np.testing.assert_allclose(t.grad, 2 * x + 1, atol=1e-12)


def test_deep_chain_fd():
    x = RNG.standard_normal((2, 5))

    def build(i, P):
        h = ad.tanh(ad.matmul(P["x"], P["w1"]))
        h = ad.sigmoid(ad.add(h, P["b"]))
        h = ad.softmax_rows(ad.matmul(h, P["w2"]))
        return {"y": ad.tmean(ad.mul(h, h))}

    check_param_grad(build, {"x": x, "w1": RNG.standard_normal((5, 4)),
                             "b": RNG.standard_normal(4),
                             "w2": RNG.standard_normal((4, 3))})


# ---------------------------------------------------------------------------
# errors and graph API


def test_shape_mismatch_errors():
    with pytest.raises(ShapeMismatch):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    with pytest.raises(ShapeMismatch):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    with pytest.raises(ShapeMismatch):
        ad.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)
    with pytest.raises(ShapeMismatch):
        ad.reshape(Tensor(np.zeros((2, 3))), (4, 4))
    with pytest.raises(ShapeMismatch):
        ad.conv1d_same(Tensor(np.zeros((1, 5, 2))), Tensor(np.zeros((3, 4, 2))))


def test_non_finite_output_names_first_offending_node():
    def build(i, P):
        bad = ad.log(ad.constant(np.array([[0.0]]), name="zero"), name="culprit")
        return {"y": ad.tsum(ad.add(bad, P["w"]))}

    g = Graph(build, {"w": np.ones((1, 1))})
    with pytest.raises(NonFiniteValue, match="culprit"):
        g.evaluate({})


def test_backward_before_evaluate():
    g = Graph(lambda i, P: {"y": ad.tsum(P["w"])}, {"w": np.ones(3)})
    with pytest.raises(CalledBeforeForward):
        g.backward()


def test_fd_requires_scalar_output():
    g = Graph(lambda i, P: {"y": ad.mul(P["w"], P["w"])}, {"w": np.ones(3)})
    g.evaluate({})
    with pytest.raises(NonScalarOutput):
        finite_difference_gradient(g, {}, "w")


def test_backward_seed_shape_checked():
    t = Tensor(np.zeros((2, 2)))
    out = ad.mul(t, t)
    with pytest.raises(ShapeMismatch):
        ad.backward_from(out, seed=np.ones((3, 3)))


def test_graph_deterministic():
    def build(i, P):
        return {"y": ad.tsum(ad.tanh(ad.matmul(i["x"], P["w"])))}

    w = RNG.standard_normal((4, 4))
    x = RNG.standard_normal((3, 4))
    g1, g2 = Graph(build, {"w": w.copy()}), Graph(build, {"w": w.copy()})
    y1, y2 = g1.evaluate({"x": x}), g2.evaluate({"x": x})
    assert np.array_equal(y1["y"], y2["y"])
    assert np.array_equal(g1.backward()["w"], g2.backward()["w"])


def test_input_gradients():
    def build(i, P):
        return {"y": ad.tsum(ad.mul(i["x"], P["w"]))}

    x, w = RNG.standard_normal((2, 3)), RNG.standard_normal((2, 3))
    g = Graph(build, {"w": w})
    gi = g.input_gradients({"x": x})
    np.testing.assert_allclose(gi["x"], w, atol=1e-12)


def test_parameter_store_roundtrip():
    s = ParameterStore({"a": np.ones(2), "b": np.zeros((2, 2))})
    assert s.names() == ["a", "b"]
    c = s.copy()
    c["a"][0] = 5.0
    assert s["a"][0] == 1.0  # deep copy
    assert "b" in s and len(s) == 2
