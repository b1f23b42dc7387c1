"""Time-discretised stochastic transition models for the latent physics.

All schemes are written as a residual

    R(u_n, u_{n-1}) = e_{n-1},    e ~ N(0, dt G)

with, for the force K(u) = A u + F(u) - b,

    explicit EM     M (u_n - u_{n-1}) + dt K(u_{n-1})
    implicit Euler  M (u_n - u_{n-1}) + dt K(u_n)
    Crank-Nicolson  M (u_n - u_{n-1}) + dt K((u_n + u_{n-1}) / 2)

Parameter vectors ``lam`` may carry leading batch dimensions.
"""

from dataclasses import dataclass

import numpy as np

from . import ad
from .errors import DimensionError, DivergenceError, NumericError

EXPLICIT = "explicit"
IMPLICIT_EULER = "implicit_euler"
CRANK_NICOLSON = "crank_nicolson"
SCHEMES = (EXPLICIT, IMPLICIT_EULER, CRANK_NICOLSON)

NEWTON_TOL = 1e-10
NEWTON_MAXITER = 50


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters with a diagonal Gaussian prior.

    Only entries flagged in ``free`` are estimated; the rest stay at ``values``.
    """

    names: tuple
    values: np.ndarray
    prior_mean: np.ndarray = None
    prior_var: np.ndarray = None
    free: np.ndarray = None

    def __post_init__(self):
        n = len(self.names)
        vals = np.asarray(self.values, dtype=np.float64).reshape(n)
        object.__setattr__(self, "values", vals)
        pm = vals if self.prior_mean is None else np.asarray(self.prior_mean, dtype=np.float64)
        pv = np.ones(n) if self.prior_var is None else np.asarray(self.prior_var, dtype=np.float64)
        free = np.zeros(n, bool) if self.free is None else np.asarray(self.free, dtype=bool)
        if pm.shape != (n,) or pv.shape != (n,) or free.shape != (n,):
            raise DimensionError("prior_mean, prior_var and free must match names")
        if np.any(pv <= 0):
            raise ValueError("prior variances must be positive")
        object.__setattr__(self, "prior_mean", pm)
        object.__setattr__(self, "prior_var", pv)
        object.__setattr__(self, "free", free)

    @property
    def n_free(self):
        return int(self.free.sum())

    @property
    def free_names(self):
        return tuple(n for n, f in zip(self.names, self.free) if f)

    def assemble(self, free_values):
        """Full parameter vector(s) from values of the free entries (last axis)."""
        if self.n_free == 0:
            return self.values
        fv = free_values
        batch = np.shape(ad.value(fv))[:-1]
        cols, j = [], 0
        for k in range(len(self.names)):
            if self.free[k]:
                cols.append(ad.getitem(fv, (Ellipsis, j)))
                j += 1
            else:
                cols.append(np.full(batch, self.values[k]))
        return ad.stack(*cols, axis=-1)


class LorenzSystem:
    """Lorenz-63 drift as a system with identity mass: K(u) = -f(u)."""

    param_names = ("sigma", "r", "b")

    def __init__(self, noise_sd=0.2):
        self.M = np.eye(3)
        self.G = noise_sd ** 2 * np.eye(3)
        self.identity_mass = True

    n = 3

    def force(self, u, lam):
        return -lorenz_drift(u, lam)

    def force_jacobian(self, u, lam):
        return -lorenz_jacobian(u, lam)


def _split3(u):
    return (ad.getitem(u, (Ellipsis, 0)), ad.getitem(u, (Ellipsis, 1)), ad.getitem(u, (Ellipsis, 2)))


def lorenz_drift(u, lam):
    """(-s u1 + s u2, -u1 u3 + r u1 - u2, u1 u2 - b u3)."""
    if np.shape(ad.value(u))[-1] != 3:
        raise DimensionError(f"Lorenz state must have length 3, got {np.shape(ad.value(u))}")
    u1, u2, u3 = _split3(u)
    s, r, b = _split3(lam)
    return ad.stack(s * (u2 - u1), u1 * (r - u3) - u2, u1 * u2 - b * u3, axis=-1)


def lorenz_jacobian(u, lam):
    u1, u2, u3 = _split3(u)
    s, r, b = _split3(lam)
    batch = np.broadcast_shapes(np.shape(ad.value(u))[:-1], np.shape(ad.value(lam))[:-1])
    zero, one = np.zeros(batch), np.ones(batch)
    rows = (
        ad.stack(-s + zero, s + zero, zero, axis=-1),
        ad.stack(r - u3, -one, -u1 + zero, axis=-1),
        ad.stack(u2 + zero, u1 + zero, -b + zero, axis=-1),
    )
    return ad.stack(*rows, axis=-2)


@dataclass(frozen=True)
class TransitionModel:
    """A system with a time-stepping scheme.

    ``substeps`` model steps of length ``dt`` are taken between consecutive
    observations.
    """

    system: object
    scheme: str = CRANK_NICOLSON
    dt: float = 0.01
    substeps: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if isinstance(self.system, LorenzSystem) and self.scheme != EXPLICIT:
            raise ValueError("the Lorenz system is only paired with the explicit scheme")

    @property
    def n(self):
        return self.system.n

    @property
    def Q(self):
        """Covariance of the residual noise per step, dt G."""
        return self.dt * self.system.G

    @property
    def identity_mass(self):
        return getattr(self.system, "identity_mass", False)


def _mass_solve(model, v):
    if model.identity_mass:
        return v
    return ad.getitem(ad.solve(model.system.M, ad.reshape(v, np.shape(ad.value(v)) + (1,))), (Ellipsis, 0))


def em_mean_cov(u_prev, model, lam):
    """Gaussian moments of one explicit Euler-Maruyama step.

    mean = u - dt M^{-1} K(u),  Q = dt M^{-1} G M^{-T}.
    """
    if model.scheme != EXPLICIT:
        raise ValueError("em_mean_cov requires the explicit scheme")
    sys = model.system
    mean = u_prev - model.dt * _mass_solve(model, sys.force(u_prev, lam))
    if model.identity_mass:
        Q = model.dt * sys.G
    else:
        Minv = np.linalg.inv(sys.M)
        Q = model.dt * Minv @ sys.G @ Minv.T
    return mean, 0.5 * (Q + Q.T)


def residual(u_n, u_prev, model, lam):
    sys, dt = model.system, model.dt
    Mdu = ad.matvec(sys.M, u_n - u_prev) if not model.identity_mass else u_n - u_prev
    if model.scheme == EXPLICIT:
        at = u_prev
    elif model.scheme == IMPLICIT_EULER:
        at = u_n
    else:
        at = 0.5 * (u_n + u_prev)
    return Mdu + dt * sys.force(at, lam)


def jacobians(u_n, u_prev, model, lam):
    """(dR/du_n, dR/du_prev) evaluated at the given states."""
    sys, dt = model.system, model.dt
    M = sys.M
    if model.scheme == EXPLICIT:
        K = sys.force_jacobian(u_prev, lam)
        return M + 0.0 * ad.value(K), -M + dt * K
    if model.scheme == IMPLICIT_EULER:
        K = sys.force_jacobian(u_n, lam)
        return M + dt * K, -M + 0.0 * ad.value(K)
    K = sys.force_jacobian(0.5 * (u_n + u_prev), lam)
    return M + (0.5 * dt) * K, -M + (0.5 * dt) * K


def newton_solve(u_prev, model, lam, rhs=None, guess=None, step=None):
    """Solve R(u, u_prev) = rhs for u on plain arrays.

    Newton with backtracking: a step is halved (up to 30 times) until the
    residual infinity-norm decreases.
    """
    u_prev = np.asarray(ad.value(u_prev), dtype=np.float64)
    lam = np.asarray(ad.value(lam), dtype=np.float64)
    u = np.array(u_prev if guess is None else guess, dtype=np.float64)
    if lam.ndim > 1:
        u = np.broadcast_to(u, lam.shape[:-1] + u.shape[-1:]).copy()

    def res(v):
        r = residual(v, u_prev, model, lam)
        return r if rhs is None else r - rhs

    r = res(u)
    err = _inf_norm(r)
    for _ in range(NEWTON_MAXITER):
        if not np.all(np.isfinite(err)):
            break
        if np.all(err <= NEWTON_TOL):
            return u
        Jn, _ = jacobians(u, u_prev, model, lam)
        try:
            du = np.linalg.solve(Jn, r[..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
        t = np.ones(err.shape)
        for _ in range(30):
            u_new = u - t[..., None] * du
            r_new = res(u_new)
            err_new = _inf_norm(r_new)
            worse = ~(err_new < err) & (err > NEWTON_TOL)
            if not np.any(worse):
                break
            t = np.where(worse, 0.5 * t, t)
        u, r, err = u_new, r_new, err_new
    if np.all(np.isfinite(err)) and np.all(err <= NEWTON_TOL):
        return u
    raise DivergenceError(f"Newton iteration did not converge (step {step})", step=step)


def _inf_norm(r):
    return np.max(np.abs(r), axis=-1) if r.size else np.zeros(r.shape[:-1])


def step_mean(u_prev, model, lam, step=None):
    """Deterministic step, differentiable in ``u_prev`` and ``lam``.

    Implicit schemes are solved by Newton on plain arrays, then one Newton
    update is recorded from the converged point, which carries the
    implicit-function derivative -J_n^{-1} dR.
    """
    if model.scheme == EXPLICIT:
        return em_mean_cov(u_prev, model, lam)[0]
    u0 = newton_solve(u_prev, model, lam, step=step)
    if not (ad.is_traced(u_prev) or ad.is_traced(lam)):
        return u0
    Jn0, _ = jacobians(u0, ad.value(u_prev), model, ad.value(lam))
    r = residual(u0, u_prev, model, lam)
    corr = ad.solve(Jn0, ad.reshape(r, np.shape(ad.value(r)) + (1,)))
    return u0 - ad.getitem(corr, (Ellipsis, 0))


def noise_factor(G):
    """Square root L with L L^T = G for a symmetric PSD G."""
    w, V = np.linalg.eigh(0.5 * (G + G.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def simulate(model, lam, u0, N, seed=0, noise_scale=1.0):
    """Simulate ``N`` model steps; returns an (N + 1, n) trajectory including u0.

    Noise enters the residual as e ~ N(0, dt G) scaled by ``noise_scale``;
    with ``noise_scale=0`` this is the deterministic solver.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    rng = np.random.default_rng(seed)
    lam = np.asarray(lam, dtype=np.float64)
    L = noise_factor(model.Q) * noise_scale
    out = np.empty((N + 1, model.n))
    out[0] = u = np.asarray(u0, dtype=np.float64)
    for k in range(1, N + 1):
        e = L @ rng.standard_normal(model.n) if noise_scale else None
        if model.scheme == EXPLICIT:
            u = em_mean_cov(u, model, lam)[0]
            if e is not None:
                u = u + (e if model.identity_mass else np.linalg.solve(model.system.M, e))
        else:
            u = newton_solve(u, model, lam, rhs=e, step=k)
        if not np.all(np.isfinite(u)):
            raise DivergenceError(f"non-finite state at step {k}", step=k)
        out[k] = u
    return out


def _lorenz_parts(u, lam):
    u1, u2, u3 = u[..., 0], u[..., 1], u[..., 2]
    s, r, b = lam[..., 0], lam[..., 1], lam[..., 2]
    batch = np.broadcast_shapes(u.shape[:-1], lam.shape[:-1])
    f = np.empty(batch + (3,))
    f[..., 0] = s * (u2 - u1)
    f[..., 1] = u1 * (r - u3) - u2
    f[..., 2] = u1 * u2 - b * u3
    J = np.empty(batch + (3, 3))
    J[..., 0, 0] = -s
    J[..., 0, 1] = s
    J[..., 0, 2] = 0.0
    J[..., 1, 0] = r - u3
    J[..., 1, 1] = -1.0
    J[..., 1, 2] = -u1
    J[..., 2, 0] = u2
    J[..., 2, 1] = u1
    J[..., 2, 2] = -b
    return f, J


def _lorenz_prop_fwd(m, C, lam, dt=0.001, steps=1, Q=None):
    batch = np.broadcast_shapes(m.shape[:-1], C.shape[:-2], lam.shape[:-1])
    m = np.broadcast_to(m, batch + (3,))
    C = np.broadcast_to(C, batch + (3, 3))
    eye = np.eye(3)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(steps):
            f, J = _lorenz_parts(m, lam)
            A = eye + dt * J
            m = m + dt * f
            C = A @ C @ np.swapaxes(A, -1, -2) + Q
            C = 0.5 * (C + np.swapaxes(C, -1, -2))
    out = np.concatenate([m[..., None], C], axis=-1)
    if not np.all(np.isfinite(out)):
        raise NumericError("Lorenz prediction overflowed (unstable parameters or state)")
    return out


def _lorenz_prop_vjp(g, out, m, C, lam, dt=0.001, steps=1, Q=None):
    batch = out.shape[:-2]
    lam_b = np.broadcast_to(lam, batch + (3,))
    eye = np.eye(3)
    # forward sweep again, keeping the per-step inputs
    ms, Cs = [], []
    mk = np.broadcast_to(m, batch + (3,))
    Ck = np.broadcast_to(C, batch + (3, 3))
    for _ in range(steps):
        ms.append(mk)
        Cs.append(Ck)
        f, J = _lorenz_parts(mk, lam_b)
        A = eye + dt * J
        mk = mk + dt * f
        Ck = A @ Ck @ np.swapaxes(A, -1, -2) + Q
        Ck = 0.5 * (Ck + np.swapaxes(Ck, -1, -2))
    gm = np.array(g[..., 0])
    gC = np.array(g[..., 1:])
    glam = np.zeros(batch + (3,))
    for k in range(steps - 1, -1, -1):
        mk, Ck = ms[k], Cs[k]
        f, J = _lorenz_parts(mk, lam_b)
        A = eye + dt * J
        gS = 0.5 * (gC + np.swapaxes(gC, -1, -2))
        gA = 2.0 * gS @ A @ Ck
        gC = np.swapaxes(A, -1, -2) @ gS @ A
        gJ = dt * gA
        u1, u2, u3 = mk[..., 0], mk[..., 1], mk[..., 2]
        # mean: m' = m + dt f(m, lam)
        gm_new = gm + dt * (np.swapaxes(J, -1, -2) @ gm[..., None])[..., 0]
        glam[..., 0] += dt * gm[..., 0] * (u2 - u1)
        glam[..., 1] += dt * gm[..., 1] * u1
        glam[..., 2] -= dt * gm[..., 2] * u3
        # covariance: A = I + dt J(m, lam)
        glam[..., 0] += -gJ[..., 0, 0] + gJ[..., 0, 1]
        glam[..., 1] += gJ[..., 1, 0]
        glam[..., 2] -= gJ[..., 2, 2]
        gm_new[..., 0] += -gJ[..., 1, 2] + gJ[..., 2, 1]
        gm_new[..., 1] += gJ[..., 2, 0]
        gm_new[..., 2] -= gJ[..., 1, 0]
        gm = gm_new
    return gm, gC, glam


lorenz_em_propagate = ad._register("lorenz_em_propagate", _lorenz_prop_fwd, _lorenz_prop_vjp)
lorenz_em_propagate.__doc__ = """Mean and covariance after ``steps`` explicit EM steps of the Lorenz model.

Returns an array (..., 3, 4) whose first column is the mean and whose last
three columns are the covariance.  Equivalent to repeated tangent-linear
prediction, with a fused adjoint sweep for the gradient.
"""
