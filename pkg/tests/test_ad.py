import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phidvae import ad
from phidvae.codec import MLP
from phidvae.errors import DimensionError, NumericError, UnsupportedOperationError

from _util import fd_gradient, grad_rel_err, random_spd, rel_err


def test_matmul_identity_and_hand_case():
    A = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(ad.matmul(np.eye(3), A), A)
    out = ad.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    assert np.array_equal(out, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_trace_gradient_is_identity_map():
    A = np.random.default_rng(0).standard_normal((4, 3))
    g = ad.gradient(lambda p: 0.5 * ad.sum(p["A"] * p["A"]), {"A": A})["A"]
    assert rel_err(g, A) < 1e-12
    assert grad_rel_err(lambda p: 0.5 * ad.sum(ad.matmul(ad.transpose(p["A"]), p["A"]) * np.eye(3)), {"A": A}) < 1e-6


def test_solve_spd_cases():
    b = np.array([[1.0], [2.0], [3.0]])
    assert np.allclose(ad.solve_spd(np.eye(3), b), b)
    assert np.allclose(ad.solve_spd(np.diag([2.0, 4.0]), np.array([2.0, 4.0])[:, None])[:, 0], [1.0, 1.0])


def test_solve_spd_gradient():
    rng = np.random.default_rng(1)
    p = {"a": random_spd(rng, 4), "b": rng.standard_normal((4, 2))}
    w = rng.standard_normal((4, 2))
    assert grad_rel_err(lambda q: ad.sum(ad.solve_spd(q["a"], q["b"]) * w), p) < 1e-6


def test_solve_spd_not_positive_definite():
    a = np.diag([1.0, 2.0, -1.0, 3.0])
    with pytest.raises(NumericError) as exc:
        ad.solve_spd(a, np.ones((4, 1)))
    assert exc.value.pivot == 2


def test_logdet_cases_and_gradient():
    assert abs(ad.logdet_spd(np.eye(4))) < 1e-15
    assert abs(ad.logdet_spd(np.diag([np.e, np.e ** 2])) - 3.0) < 1e-14
    a = random_spd(np.random.default_rng(2), 5)
    assert grad_rel_err(lambda q: ad.logdet_spd(q["a"]), {"a": a}) < 1e-6
    with pytest.raises(NumericError):
        ad.logdet_spd(-np.eye(2))


def test_cholesky_and_general_solve_gradients():
    rng = np.random.default_rng(3)
    a = random_spd(rng, 4)
    w = rng.standard_normal((4, 4))
    assert grad_rel_err(lambda q: ad.sum(ad.cholesky(q["a"]) * w), {"a": a}) < 1e-6
    g = rng.standard_normal((4, 4)) + 4 * np.eye(4)
    b = rng.standard_normal((4, 3))
    assert grad_rel_err(lambda q: ad.sum(ad.solve(q["g"], q["b"]) ** 2), {"g": g, "b": b}) < 1e-6


def test_polynomial_gradient():
    assert float(ad.gradient(lambda p: p["x"] * p["x"], {"x": np.array(3.0)})["x"]) == 6.0


def test_quadratic_form_gradient():
    rng = np.random.default_rng(4)
    W, v = rng.standard_normal((3, 4)), rng.standard_normal(4)
    g = ad.gradient(lambda p: ad.sum(ad.matvec(p["W"], v) ** 2), {"W": W})["W"]
    assert rel_err(g, 2 * np.outer(W @ v, v)) < 1e-12
    assert rel_err(g, fd_gradient(lambda p: ad.sum(ad.matvec(p["W"], v) ** 2), {"W": W})) < 1e-6


def test_mlp_loss_gradient():
    rng = np.random.default_rng(5)
    net = MLP(5, 3, (7, 6), "net")
    p = ad.ParamSet(net.init(rng))
    x, t = rng.standard_normal((4, 5)), rng.standard_normal((4, 3))
    g = ad.gradient(lambda q: ad.sum((net.forward(q, x) - t) ** 2), p).flatten()
    n = fd_gradient(lambda q: ad.sum((net.forward(q, x) - t) ** 2), p, eps=1e-6)
    assert np.max(np.abs(g - n)) / np.max(np.abs(n)) < 1e-5


def test_leaky_relu_values():
    assert np.allclose(ad.leaky_relu(np.array([-1.0, 2.0]), slope=0.01), [-0.01, 2.0])


def test_batched_matmul_gradient_sums_over_broadcast():
    rng = np.random.default_rng(6)
    p = {"A": rng.standard_normal((3, 3)), "B": rng.standard_normal((5, 3, 2))}
    assert grad_rel_err(lambda q: ad.sum(ad.matmul(q["A"], q["B"]) ** 2), p) < 1e-7


def test_structural_ops_gradients():
    rng = np.random.default_rng(7)
    p = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((3, 2))}
    w = rng.standard_normal((3, 6))

    def f(q):
        c = ad.concat(q["a"], q["b"], axis=-1)
        s = ad.stack(ad.roll(c, 1, axis=-1), c, axis=0)
        d = ad.diag_embed(ad.getitem(c, (0, slice(0, 3))))
        return ad.sum(ad.getitem(s, 0) * w) + ad.sum(d * d) + ad.sum(ad.sigmoid(q["a"]))

    assert grad_rel_err(f, p) < 1e-7


def test_non_scalar_output_rejected():
    with pytest.raises(DimensionError):
        ad.gradient(lambda p: p["x"] * 2.0, {"x": np.ones(3)})


def test_unregistered_numpy_call_rejected():
    with pytest.raises(UnsupportedOperationError):
        ad.gradient(lambda p: np.sum(np.sort(p["x"])), {"x": np.ones(3)})


def test_plain_arrays_bypass_tape():
    out = ad.exp(np.zeros(2))
    assert isinstance(out, np.ndarray) and not ad.is_traced(out)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31))
def test_matmul_gradient_property(n, k, m, seed):
    rng = np.random.default_rng(seed)
    p = {"a": rng.standard_normal((n, k)), "b": rng.standard_normal((k, m))}
    w = rng.standard_normal((n, m))
    assert grad_rel_err(lambda q: ad.sum(ad.matmul(q["a"], q["b"]) * w), p) < 1e-7


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 3), st.integers(1, 3)), min_size=1, max_size=4), st.integers(0, 2 ** 31))
def test_paramset_flatten_roundtrip(shapes, seed):
    rng = np.random.default_rng(seed)
    p = ad.ParamSet({f"s{i}": rng.standard_normal(s) for i, s in enumerate(shapes)})
    q = p.unflatten(p.flatten())
    assert q.shapes == p.shapes
    assert all(np.array_equal(p[k], q[k]) for k in p)
    with pytest.raises(DimensionError):
        p.unflatten(np.zeros(p.size + 1))
