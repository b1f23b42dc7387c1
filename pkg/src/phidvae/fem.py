"""Linear ("hat") finite elements on uniform periodic 1D meshes.

Assembles the operators of the semi-discrete stochastic system

    M du/dt + A u + F(u) = b + xi,    xi ~ N(0, delta(t - t') G)

together with the interpolating observation operator H.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ad
from .errors import MeshError

_GAUSS_POINTS = 4


@dataclass(frozen=True)
class Mesh1D:
    n_u: int
    domain: tuple = (0.0, 1.0)
    periodic: bool = True

    def __post_init__(self):
        if self.n_u < 1:
            raise MeshError(f"n_u must be positive, got {self.n_u}")
        if not self.domain[1] > self.domain[0]:
            raise MeshError(f"empty domain {self.domain}")

    @property
    def length(self):
        return float(self.domain[1] - self.domain[0])

    @property
    def h(self):
        return self.length / self.n_u

    @property
    def nodes(self):
        return self.domain[0] + self.h * np.arange(self.n_u)


def _require_periodic(mesh, what):
    if not mesh.periodic:
        raise MeshError(f"{what}: only periodic boundaries are supported")


def _circulant(n, stencil):
    """Matrix with ``out[i, (i + k) % n] += v`` for each ``k: v`` in stencil."""
    out = np.zeros((n, n))
    rows = np.arange(n)
    for k, v in stencil.items():
        np.add.at(out, (rows, (rows + k) % n), v)
    return out


def assemble_mass(mesh):
    if mesh.n_u < 3:
        raise MeshError(f"mesh too small for periodic assembly: n_u={mesh.n_u} < 3")
    _require_periodic(mesh, "mass matrix")
    h = mesh.h
    return _circulant(mesh.n_u, {-1: h / 6.0, 0: 2.0 * h / 3.0, 1: h / 6.0})


def assemble_advection(mesh, c=1.0):
    """A_ij = c <d/ds phi_j, phi_i>; skew-symmetric."""
    _require_periodic(mesh, "advection operator")
    if mesh.n_u < 3:
        raise MeshError(f"mesh too small for periodic assembly: n_u={mesh.n_u} < 3")
    return _circulant(mesh.n_u, {-1: -0.5 * c, 1: 0.5 * c})


def third_derivative_stencil(mesh):
    """Central five-point circulant approximation of d^3/ds^3."""
    _require_periodic(mesh, "dispersion operator")
    if mesh.n_u < 5:
        raise MeshError(f"five-point stencil needs n_u >= 5, got {mesh.n_u}")
    s = 1.0 / (2.0 * mesh.h ** 3)
    return _circulant(mesh.n_u, {-2: -s, -1: 2 * s, 1: -2 * s, 2: s})


def kdv_nonlinear(u, alpha=1.0):
    """F(u)_j = alpha <u_h d/ds u_h, phi_j>, integrated exactly on each element.

    For piecewise-linear u_h this is alpha/6 (u_{j+1} - u_{j-1})(u_{j-1} + u_j + u_{j+1}).
    Works on traced values and batches of states (last axis is the node index).
    """
    up = ad.roll(u, -1, axis=-1)
    um = ad.roll(u, 1, axis=-1)
    return _scale(alpha, (up - um) * (um + u + up)) / 6.0


def kdv_nonlinear_jacobian(u, alpha=1.0):
    up = ad.roll(u, -1, axis=-1)
    um = ad.roll(u, 1, axis=-1)
    d0 = ad.diag_embed(up - um)
    # diag(v) @ P with (P u)_j = u_{j+1} is diag(v) rolled one column right
    dp = ad.roll(ad.diag_embed(2.0 * up + u), 1, axis=-1)
    dm = ad.roll(ad.diag_embed(-2.0 * um - u), -1, axis=-1)
    return _scale(alpha, d0 + dp + dm, matrix=True) / 6.0


def _scale(alpha, x, matrix=False):
    if np.ndim(ad.value(alpha)) == 0:
        return alpha * x
    a = ad.reshape(alpha, np.shape(ad.value(alpha)) + ((1, 1) if matrix else (1,)))
    return a * x


def assemble_kdv(mesh, alpha=1.0, beta=0.022 ** 2):
    """Returns (A_disp, F, J_F) for u_t + alpha u u_s + beta u_sss = 0.

    The dispersion term is the mass matrix times the five-point third-derivative
    stencil, so M^{-1} A_disp is the finite-difference operator itself.
    """
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    D3 = third_derivative_stencil(mesh)
    A_disp = beta * assemble_mass(mesh) @ D3

    def F(u):
        return kdv_nonlinear(u, alpha)

    def J_F(u):
        return kdv_nonlinear_jacobian(u, alpha)

    return A_disp, F, J_F


def squared_exponential(d, rho, ell):
    return rho ** 2 * np.exp(-0.5 * (d / ell) ** 2)


def quadrature(mesh, order=_GAUSS_POINTS):
    """Gauss-Legendre points, weights and basis values (n_q x n_u) over all elements."""
    xi, w = np.polynomial.legendre.leggauss(order)
    t = 0.5 * (xi + 1.0)
    n, h = mesh.n_u, mesh.h
    starts = mesh.nodes
    pts = (starts[:, None] + h * t[None, :]).ravel()
    wts = np.tile(0.5 * h * w, n)
    B = np.zeros((n * order, n))
    q = np.arange(n * order)
    elem = q // order
    B[q, elem] = 1.0 - np.tile(t, n)
    B[q, (elem + 1) % n] += np.tile(t, n)
    return pts, wts, B


def assemble_forcing_cov(mesh, rho, ell):
    """G_ij = <phi_i, <k(.,.), phi_j>> for the squared-exponential kernel."""
    if ell <= 0:
        raise ValueError(f"length scale must be positive, got {ell}")
    if rho < 0:
        raise ValueError(f"rho must be non-negative, got {rho}")
    _require_periodic(mesh, "forcing covariance")
    pts, wts, B = quadrature(mesh)
    d = np.abs(pts[:, None] - pts[None, :])
    d = np.minimum(d, mesh.length - d)
    K = squared_exponential(d, rho, ell)
    WB = wts[:, None] * B
    G = WB.T @ K @ WB
    return 0.5 * (G + G.T)


def interp_operator(mesh, obs_points):
    """Rows hold hat-function weights so that (H u)_j = u_h(obs_points[j])."""
    pts = np.atleast_1d(np.asarray(obs_points, dtype=np.float64))
    n, h = mesh.n_u, mesh.h
    t = (pts - mesh.domain[0]) / h
    if mesh.periodic:
        t = np.mod(t, n)
    elif np.any(t < 0) or np.any(t > n - 1):
        raise ValueError("observation point outside the mesh")
    near = np.abs(t - np.round(t)) < 1e-12
    t = np.where(near, np.round(t), t)
    i = np.floor(t).astype(int)
    w = t - i
    H = np.zeros((pts.size, n))
    rows = np.arange(pts.size)
    np.add.at(H, (rows, i % n), 1.0 - w)
    np.add.at(H, (rows, (i + 1) % n), w)
    return H


def uniform_points(mesh, n_x):
    return mesh.domain[0] + mesh.length * np.arange(n_x) / n_x


@dataclass(frozen=True)
class AssembledSystem:
    """Semi-discrete system M u' + sum_k lam_k A_k u + sum_k lam_k F_k(u) = b + noise.

    ``linear`` maps a parameter name to its unit operator A_k, ``nonlinear``
    maps a name to an evaluator pair (F_k, J_k) at unit coefficient.  Parameter
    vectors passed to :meth:`force` follow the order of ``param_names``.
    """

    M: np.ndarray
    G: np.ndarray
    param_names: tuple
    linear: dict = field(default_factory=dict)
    nonlinear: dict = field(default_factory=dict)
    b: np.ndarray = None
    H: np.ndarray = None
    R: np.ndarray = None
    mesh: Mesh1D = None

    @property
    def n(self):
        return self.M.shape[0]

    def _coef(self, lam, name):
        return ad.getitem(lam, (Ellipsis, self.param_names.index(name)))

    def linear_operator(self, lam):
        A = np.zeros_like(self.M)
        for name, Ak in self.linear.items():
            A = A + _scale(self._coef(lam, name), Ak, matrix=True)
        return A

    def force(self, u, lam):
        """A(lam) u + F(u; lam) - b."""
        out = 0.0
        for name, Ak in self.linear.items():
            out = out + _scale(self._coef(lam, name), ad.matvec(Ak, u))
        for name, (Fk, _) in self.nonlinear.items():
            out = out + _scale(self._coef(lam, name), Fk(u))
        if self.b is not None:
            out = out - self.b
        if not self.linear and not self.nonlinear:
            out = out + 0.0 * u
        return out

    def force_jacobian(self, u, lam):
        K = self.linear_operator(lam)
        for name, (_, Jk) in self.nonlinear.items():
            K = K + _scale(self._coef(lam, name), Jk(u), matrix=True)
        return K


def advection_system(mesh, rho, ell, obs_points=None, R=None):
    H = interp_operator(mesh, obs_points) if obs_points is not None else None
    return AssembledSystem(
        M=assemble_mass(mesh), G=assemble_forcing_cov(mesh, rho, ell), param_names=("c",),
        linear={"c": assemble_advection(mesh, 1.0)}, H=H, R=R, mesh=mesh,
    )


def kdv_system(mesh, rho, ell, obs_points=None, R=None):
    M = assemble_mass(mesh)
    H = interp_operator(mesh, obs_points) if obs_points is not None else None
    return AssembledSystem(
        M=M, G=assemble_forcing_cov(mesh, rho, ell), param_names=("alpha", "beta"),
        linear={"beta": M @ third_derivative_stencil(mesh)},
        nonlinear={"alpha": (kdv_nonlinear, kdv_nonlinear_jacobian)},
        H=H, R=R, mesh=mesh,
    )
