import numpy as np
import pytest

from phidvae import ad, dynamics as dy, fem
from phidvae.errors import DivergenceError

from _util import grad_rel_err, rel_err

LAM_L = np.array([10.0, 28.0, 8.0 / 3.0])


def null_system(n=6, rho=0.0):
    mesh = fem.Mesh1D(n)
    return fem.AssembledSystem(M=fem.assemble_mass(mesh), G=fem.assemble_forcing_cov(mesh, rho, 0.2),
                               param_names=("c",), mesh=mesh)


def advection_model(n=32, scheme="crank_nicolson", dt=0.02, rho=0.02):
    return dy.TransitionModel(fem.advection_system(fem.Mesh1D(n), rho, 0.1), scheme, dt, 1)


def kdv_model(n=16, scheme="crank_nicolson"):
    return dy.TransitionModel(fem.kdv_system(fem.Mesh1D(n, (0.0, 2.0)), 0.01, 0.2), scheme, 0.01, 1)


def test_lorenz_drift_values():
    assert np.array_equal(dy.lorenz_drift(np.zeros(3), LAM_L), np.zeros(3))
    assert np.allclose(dy.lorenz_drift(np.ones(3), LAM_L), [0.0, 26.0, -5.0 / 3.0], atol=1e-14)


def test_lorenz_jacobian_fd():
    u = np.array([1.3, -0.4, 20.0])
    num = np.column_stack([(dy.lorenz_drift(u + 1e-6 * e, LAM_L) - dy.lorenz_drift(u - 1e-6 * e, LAM_L)) / 2e-6
                           for e in np.eye(3)])
    assert rel_err(dy.lorenz_jacobian(u, LAM_L), num) < 1e-7


def test_em_mean_lorenz():
    m = dy.TransitionModel(dy.LorenzSystem(0.2), "explicit", 0.001, 1)
    mean, Q = dy.em_mean_cov(np.ones(3), m, LAM_L)
    assert np.allclose(mean, 1.0 + 0.001 * np.array([0.0, 26.0, -5.0 / 3.0]), atol=1e-15)
    assert np.allclose(Q, 0.001 * 0.04 * np.eye(3))


def test_em_identity_dynamics():
    m = dy.TransitionModel(null_system(), "explicit", 0.1, 1)
    u = np.random.default_rng(0).standard_normal(6)
    mean, Q = dy.em_mean_cov(u, m, [1.0])
    assert np.allclose(mean, u) and not np.any(Q)


@pytest.mark.parametrize("scheme", dy.SCHEMES)
def test_residual_identity(scheme):
    m = dy.TransitionModel(null_system(), scheme, 0.1, 1)
    u = np.random.default_rng(1).standard_normal(6)
    assert not np.any(dy.residual(u, u, m, [1.0]))
    Jn, Jp = dy.jacobians(u, u, m, [1.0])
    assert np.allclose(Jn, m.system.M) and np.allclose(Jp, -m.system.M)


def test_cn_step_has_zero_residual():
    m = advection_model()
    u = np.random.default_rng(2).standard_normal(32)
    un = dy.step_mean(u, m, [0.5])
    assert np.max(np.abs(dy.residual(un, u, m, [0.5]))) < 1e-12


def test_implicit_euler_residual_is_linear():
    m = advection_model(scheme="implicit_euler")
    rng = np.random.default_rng(3)
    up, a, b = rng.standard_normal((3, 32))
    M, A = m.system.M, 0.5 * m.system.linear["c"]
    lhs = dy.residual(a + 2.0 * b, up, m, [0.5]) - dy.residual(a, up, m, [0.5])
    assert rel_err(lhs, 2.0 * (M + m.dt * A) @ b) < 1e-12


def test_linear_cn_jacobians():
    m = advection_model()
    u = np.zeros(32)
    Jn, Jp = dy.jacobians(u, u, m, [0.5])
    A = 0.5 * m.system.linear["c"]
    assert np.allclose(Jn, m.system.M + 0.5 * m.dt * A)
    assert np.allclose(Jp, -m.system.M + 0.5 * m.dt * A)


def test_kdv_cn_jacobian_fd():
    m = kdv_model()
    rng = np.random.default_rng(4)
    un, up = rng.standard_normal((2, 16))
    lam = np.array([1.0, 0.022 ** 2])
    Jn, Jp = dy.jacobians(un, up, m, lam)
    e = np.eye(16) * 1e-6
    num_n = np.column_stack([(dy.residual(un + d, up, m, lam) - dy.residual(un - d, up, m, lam)) / 2e-6 for d in e])
    num_p = np.column_stack([(dy.residual(un, up + d, m, lam) - dy.residual(un, up - d, m, lam)) / 2e-6 for d in e])
    assert rel_err(Jn, num_n) < 1e-6 and rel_err(Jp, num_p) < 1e-6


def test_step_mean_gradient_through_newton():
    m = kdv_model()
    u = np.cos(np.pi * fem.Mesh1D(16, (0.0, 2.0)).nodes)
    w = np.random.default_rng(5).standard_normal(16)

    def f(p):
        lam = ad.concat(p["a"], np.array([0.022 ** 2]))
        return ad.sum(dy.step_mean(p["u"], m, lam) * w)

    assert grad_rel_err(f, {"a": np.array([1.1]), "u": u}) < 1e-6


def test_simulate_constant_without_forcing():
    m = dy.TransitionModel(null_system(), "crank_nicolson", 0.1, 1)
    u0 = np.arange(6.0)
    tr = dy.simulate(m, [1.0], u0, 5, seed=3)
    assert tr.shape == (6, 6) and np.allclose(tr, u0)


def test_simulate_seeded_determinism():
    m = advection_model()
    u0 = np.sin(2 * np.pi * fem.Mesh1D(32).nodes)
    a = dy.simulate(m, [0.5], u0, 20, seed=7)
    b = dy.simulate(m, [0.5], u0, 20, seed=7)
    c = dy.simulate(m, [0.5], u0, 20, seed=8)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def advection_translation_error(n_u=64, c=0.5, dt=0.02, steps=100):
    mesh = fem.Mesh1D(n_u)
    m = dy.TransitionModel(fem.advection_system(mesh, 0.02, 0.1), "crank_nicolson", dt, 1)
    u0 = np.exp(-((mesh.nodes - 0.5) ** 2) / 0.1)
    tr = dy.simulate(m, [c], u0, steps, noise_scale=0.0)
    pts = np.linspace(0.0, 1.0, 200, endpoint=False)
    H = fem.interp_operator(mesh, pts)
    errs = []
    for k in range(0, steps + 1, steps // 4):
        shifted = (pts - c * k * dt) % 1.0
        errs.append(np.max(np.abs(H @ tr[k] - np.exp(-((shifted - 0.5) ** 2) / 0.1))))
    return max(errs), 2 * mesh.h


def test_advection_translates_profile():
    err, tol = advection_translation_error()
    assert err < tol


def test_newton_divergence_reports_step():
    m = kdv_model(8)
    with pytest.raises(DivergenceError) as exc:
        dy.newton_solve(np.full(8, 1e200), m, np.array([1.0, 0.022 ** 2]), step=4)
    assert exc.value.step == 4


def test_model_params_assemble():
    mp = dy.ModelParams(("sigma", "r", "b"), LAM_L, free=np.array([True, False, True]))
    full = mp.assemble(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.allclose(full, [[1.0, 28.0, 2.0], [3.0, 28.0, 4.0]])
    assert mp.free_names == ("sigma", "b")


def test_transition_model_validation():
    with pytest.raises(ValueError):
        dy.TransitionModel(null_system(), "leapfrog")
    with pytest.raises(ValueError):
        dy.TransitionModel(dy.LorenzSystem(), "crank_nicolson")
