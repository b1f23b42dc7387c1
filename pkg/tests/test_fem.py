import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phidvae import fem
from phidvae.errors import MeshError

from _util import rel_err
from oracles import adaptive_forcing_entry, symbolic_mass_advection


@pytest.mark.parametrize("n", [3, 4, 8, 64])
def test_mass_matches_symbolic_integration(n):
    mesh = fem.Mesh1D(n)
    M = fem.assemble_mass(mesh)
    diag, off, _, _ = symbolic_mass_advection(mesh.h)
    idx = np.arange(n)
    assert np.allclose(np.diag(M), diag, rtol=1e-10, atol=0)
    assert np.allclose(M[idx, (idx + 1) % n], off, rtol=1e-10, atol=0)
    assert np.allclose(M[idx, (idx - 1) % n], off, rtol=1e-10, atol=0)
    assert np.allclose(M.sum(axis=1), mesh.h, rtol=1e-12)


def test_mass_spd():
    M = fem.assemble_mass(fem.Mesh1D(8))
    assert np.array_equal(M, M.T)
    assert np.linalg.eigvalsh(M).min() > 0


def test_mesh_too_small():
    with pytest.raises(MeshError):
        fem.assemble_mass(fem.Mesh1D(2))
    with pytest.raises(MeshError):
        fem.third_derivative_stencil(fem.Mesh1D(4))


def test_non_periodic_rejected():
    with pytest.raises(MeshError):
        fem.assemble_advection(fem.Mesh1D(8, periodic=False), 1.0)


def test_advection_entries():
    assert not np.any(fem.assemble_advection(fem.Mesh1D(8), 0.0))
    A = fem.assemble_advection(fem.Mesh1D(4), 1.0)
    _, _, a_next, a_prev = symbolic_mass_advection(0.25)
    for i in range(4):
        assert abs(A[i, (i + 1) % 4] - a_next) <= 1e-10 * abs(a_next)
        assert abs(A[i, (i - 1) % 4] - a_prev) <= 1e-10 * abs(a_prev)
    assert np.allclose(A.sum(axis=1), 0.0, atol=1e-15)
    assert np.array_equal(A, -A.T)


def test_kdv_operators_on_constants():
    mesh = fem.Mesh1D(16, (0.0, 2.0))
    A, F, J = fem.assemble_kdv(mesh, 1.0, 0.022 ** 2)
    u = np.full(16, 0.7)
    assert np.allclose(F(u), 0.0, atol=1e-15)
    assert np.allclose(A @ u, 0.0, atol=1e-12)


def test_kdv_jacobian_matches_fd():
    rng = np.random.default_rng(0)
    mesh = fem.Mesh1D(8, (0.0, 2.0))
    _, F, J = fem.assemble_kdv(mesh, 1.3)
    u = rng.standard_normal(8)
    num = np.column_stack([(F(u + 1e-6 * e) - F(u - 1e-6 * e)) / 2e-6 for e in np.eye(8)])
    assert rel_err(J(u), num) < 1e-6


def test_kdv_nonlinear_is_exact_galerkin_integral():
    # <u_h d/ds u_h, phi_j> by dense Gauss quadrature over the two elements touching node j
    rng = np.random.default_rng(1)
    mesh = fem.Mesh1D(10, (0.0, 2.0))
    u = rng.standard_normal(10)
    pts, wts, B = fem.quadrature(mesh, order=6)
    uh = B @ u
    h = mesh.h
    elem = np.repeat(np.arange(10), 6)
    duh = (u[(elem + 1) % 10] - u[elem]) / h
    ref = B.T @ (wts * uh * duh)
    assert rel_err(fem.kdv_nonlinear(u), ref) < 1e-12


def test_third_derivative_on_cubic_like_mode():
    mesh = fem.Mesh1D(256, (0.0, 2.0))
    s = mesh.nodes
    D3 = fem.third_derivative_stencil(mesh)
    k = np.pi
    assert np.max(np.abs(D3 @ np.sin(k * s) + k ** 3 * np.cos(k * s))) < 1e-3 * k ** 3


def test_forcing_cov_zero_and_psd():
    assert not np.any(fem.assemble_forcing_cov(fem.Mesh1D(16), 0.0, 0.1))
    G = fem.assemble_forcing_cov(fem.Mesh1D(16), 0.02, 0.1)
    assert np.array_equal(G, G.T)
    assert np.linalg.eigvalsh(G).min() >= -1e-12
    with pytest.raises(ValueError):
        fem.assemble_forcing_cov(fem.Mesh1D(16), 0.02, 0.0)


def test_forcing_cov_matches_adaptive_quadrature():
    G = fem.assemble_forcing_cov(fem.Mesh1D(64), 0.02, 0.1)
    for i, j in [(5, 5), (5, 8), (0, 63)]:
        ref = adaptive_forcing_entry(i, j, 64, 0.02, 0.1)
        assert abs(G[i, j] - ref) < 1e-4 * abs(ref)


def test_interp_operator_cases():
    mesh = fem.Mesh1D(8)
    H = fem.interp_operator(mesh, [mesh.nodes[3]])
    assert np.array_equal(H[0], np.eye(8)[3])
    H = fem.interp_operator(mesh, [0.5 * (mesh.nodes[3] + mesh.nodes[4])])
    assert np.allclose(H[0, 3:5], 0.5) and H[0].sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        fem.interp_operator(fem.Mesh1D(8, periodic=False), [0.95])


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 40), st.lists(st.floats(0.0, 0.8749), min_size=1, max_size=10))
def test_interp_linear_exactness(n, pts):
    # on a non-periodic mesh the nodes span [0, (n-1) h]; keep the points inside
    mesh = fem.Mesh1D(n, periodic=False)
    pts = np.asarray(pts) * (n - 1) * mesh.h / 0.875
    H = fem.interp_operator(mesh, pts)
    assert np.allclose(H @ mesh.nodes, pts, atol=1e-12)
    assert np.allclose(H.sum(axis=1), 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 30), st.floats(0.1, 5.0))
def test_mass_row_sums_property(n, length):
    mesh = fem.Mesh1D(n, (0.0, length))
    assert np.allclose(fem.assemble_mass(mesh).sum(axis=1), mesh.h)
    assert np.allclose(fem.assemble_advection(mesh, 0.7).sum(axis=1), 0.0, atol=1e-14)


def test_system_force_jacobian_matches_fd():
    mesh = fem.Mesh1D(12, (0.0, 2.0))
    sys_ = fem.kdv_system(mesh, 0.01, 0.2)
    lam = np.array([1.2, 0.022 ** 2])
    u = np.random.default_rng(2).standard_normal(12)
    num = np.column_stack([(sys_.force(u + 1e-6 * e, lam) - sys_.force(u - 1e-6 * e, lam)) / 2e-6
                           for e in np.eye(12)])
    assert rel_err(sys_.force_jacobian(u, lam), num) < 1e-6
