"""Extended Kalman filter for the latent state-space model.

Prediction solves the transition residual for the mean and propagates the
covariance with the tangent-linear model

    C_pred = J_n^{-1} (J_prev C J_prev^T + Q) J_n^{-T};

the update is the standard Kalman update with innovation covariance
S = H C_pred H^T + R.  The log marginal likelihood is the sum of innovation
log-densities.  Every step is built from :mod:`phidvae.ad` operations, so the
whole recursion can be differentiated with respect to the pseudo-observations
and the physical parameters.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ad
from .dynamics import EXPLICIT, LorenzSystem, jacobians, lorenz_em_propagate, residual, step_mean
from .errors import DivergenceError, NumericError

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class GaussianState:
    m: object
    C: object


@dataclass
class FilterResult:
    states: list
    predicted: list
    loglik: object
    increments: list = field(default_factory=list)


def _col(v):
    return ad.reshape(v, np.shape(ad.value(v)) + (1,))


def _uncol(v):
    return ad.getitem(v, (Ellipsis, 0))


def predict_once(state, model, lam, step=None):
    m_hat = step_mean(state.m, model, lam, step=step)
    Jn, Jp = jacobians(m_hat, state.m, model, lam)
    B = ad.matmul(ad.matmul(Jp, state.C), ad.transpose(Jp)) + model.Q
    if model.scheme == EXPLICIT and model.identity_mass:
        C_hat = B
    else:
        X = ad.solve(Jn, B)
        C_hat = ad.transpose(ad.solve(Jn, ad.transpose(X)))
    return GaussianState(m_hat, ad.symmetrize(C_hat))


_PROPAGATORS = {}


def _is_linear(model):
    nonlinear = getattr(model.system, "nonlinear", None)
    return nonlinear is not None and len(nonlinear) == 0


def linear_propagator(model, lam):
    """Composite (Phi, offset, Q) of ``model.substeps`` steps of a linear model.

    m -> Phi m + offset and C -> Phi C Phi^T + Q reproduce the step-by-step
    prediction exactly.  Cached per model and parameter value.
    """
    lam = np.asarray(lam, dtype=np.float64)
    key = (id(model.system), model.scheme, model.dt, model.substeps, lam.shape, lam.tobytes())
    hit = _PROPAGATORS.get(key)
    if hit is not None and hit[0] is model.system:
        return hit[1]
    n = model.n
    zero = np.zeros(lam.shape[:-1] + (n,))
    Jn, Jp = jacobians(zero, zero, model, lam)
    Jn, Jp = np.asarray(Jn), np.asarray(Jp)
    step_phi = -np.linalg.solve(Jn, Jp)
    step_off = -np.linalg.solve(Jn, np.asarray(residual(zero, zero, model, lam))[..., None])[..., 0]
    Jinv = np.linalg.inv(Jn)
    step_q = Jinv @ model.Q @ np.swapaxes(Jinv, -1, -2)
    phi, off, q = step_phi, step_off, step_q
    for _ in range(model.substeps - 1):
        phi = step_phi @ phi
        off = (step_phi @ off[..., None])[..., 0] + step_off
        q = step_phi @ q @ np.swapaxes(step_phi, -1, -2) + step_q
    out = (phi, off, 0.5 * (q + np.swapaxes(q, -1, -2)))
    if len(_PROPAGATORS) > 64:
        _PROPAGATORS.clear()
    _PROPAGATORS[key] = (model.system, out)
    return out


def predict(state, model, lam, step=None):
    """Advance the filtering distribution over one observation interval."""
    if _is_linear(model) and not ad.is_traced(lam):
        phi, off, q = linear_propagator(model, ad.value(lam))
        m = ad.matvec(phi, state.m) + off
        C = ad.matmul(ad.matmul(phi, state.C), np.swapaxes(phi, -1, -2)) + q
        return GaussianState(m, ad.symmetrize(C))
    if isinstance(model.system, LorenzSystem) and model.scheme == EXPLICIT:
        out = lorenz_em_propagate(state.m, state.C, lam, dt=model.dt, steps=model.substeps, Q=model.Q)
        return GaussianState(ad.getitem(out, (Ellipsis, 0)), ad.getitem(out, (Ellipsis, slice(1, None))))
    for _ in range(model.substeps):
        state = predict_once(state, model, lam, step=step)
    return state


def _common_batch(*mats):
    """Broadcast matrices (..., r, c) to one leading batch shape."""
    shapes = [np.shape(ad.value(a)) for a in mats]
    batch = np.broadcast_shapes(*(s[:-2] for s in shapes))
    return [a if s[:-2] == batch else a + np.zeros(batch + s[-2:]) for a, s in zip(mats, shapes)]


def update(pred, x, H, R):
    """Kalman update; returns (posterior state, innovation log-density)."""
    n_x = np.shape(H)[0]
    HC = ad.matmul(H, pred.C)
    S = ad.symmetrize(ad.matmul(HC, ad.transpose(H))) + R
    v = x - ad.matvec(H, pred.m)
    Z = ad.solve_spd(S, ad.concat(*_common_batch(HC, _col(v)), axis=-1))
    n_u = np.shape(ad.value(HC))[-1]
    K_t = ad.getitem(Z, (Ellipsis, slice(0, n_u)))
    z = ad.getitem(Z, (Ellipsis, slice(n_u, n_u + 1)))
    m = pred.m + _uncol(ad.matmul(ad.transpose(HC), z))
    C = ad.symmetrize(pred.C - ad.matmul(ad.transpose(HC), K_t))
    quad = ad.sum(_uncol(z) * v, axis=-1)
    loglik = -0.5 * (n_x * LOG_2PI + ad.logdet_spd(S) + quad)
    return GaussianState(m, C), loglik


def run_filter(model, lam, x_seq, H, R, prior, keep_states=True, reduce=None):
    """Filter pseudo-observations ``x_seq`` (..., N, n_x) from ``prior`` at time 0.

    ``lam`` and ``x_seq`` may carry matching leading batch dimensions; the
    log-likelihood then has that batch shape.  With ``reduce`` given, only
    ``reduce(state)`` is kept for each filtering state.
    """
    N = np.shape(ad.value(x_seq))[-2]
    state = prior
    states, predicted, incs = [], [], []
    total = 0.0
    for n in range(N):
        try:
            pred = predict(state, model, lam, step=n + 1)
            x_n = ad.getitem(x_seq, (Ellipsis, n, slice(None)))
            state, inc = update(pred, x_n, H, R)
        except DivergenceError as exc:
            raise DivergenceError(f"filter step {n + 1}: {exc}", step=n + 1) from exc
        except NumericError as exc:
            raise NumericError(f"filter step {n + 1}: {exc}", pivot=exc.pivot) from exc
        total = total + inc
        incs.append(inc)
        if reduce is not None:
            states.append(reduce(state))
        elif keep_states:
            states.append(state)
            predicted.append(pred)
    return FilterResult(states, predicted, total, incs)


@dataclass
class MixturePosterior:
    """Uniform mixture of Gaussians.

    ``means`` is (K, n); ``covs`` (K, n, n) may be omitted when only the
    marginal variances ``variances`` (K, n) are kept.
    """

    means: np.ndarray
    covs: np.ndarray = None
    variances: np.ndarray = None

    def __post_init__(self):
        if self.variances is None and self.covs is not None:
            self.variances = np.einsum("kii->ki", self.covs)

    @property
    def weights(self):
        k = self.means.shape[0]
        return np.full(k, 1.0 / k)

    @property
    def n_components(self):
        return self.means.shape[0]

    def mean(self):
        return self.means.mean(axis=0)

    def cov(self):
        if self.covs is None:
            raise ValueError("mixture was built without full covariances")
        mu = self.mean()
        second = (self.covs + self.means[:, :, None] * self.means[:, None, :]).mean(axis=0)
        return second - np.outer(mu, mu)

    def var(self):
        """Marginal variances by the law of total variance."""
        v = self.variances.mean(axis=0) + (self.means ** 2).mean(axis=0) - self.mean() ** 2
        return np.clip(v, 0.0, None)

    def sd(self):
        return np.sqrt(self.var())


def _flat_components(a, k, tail):
    a = np.asarray(a)
    return np.array(np.broadcast_to(a, (k,) + tail) if a.ndim == len(tail) else a.reshape((-1,) + tail))


def _mixtures(model, lams, xs, H, R, prior, full_cov, chunk):
    K = xs.shape[0]
    n = model.n
    parts = []
    for lo in range(0, K, chunk):
        hi = min(K, lo + chunk)
        k = hi - lo

        def reduce(st, k=k):
            m = _flat_components(st.m, k, (n,))
            C = _flat_components(st.C, k, (n, n))
            return (m, C) if full_cov else (m, np.einsum("kii->ki", C))

        res = run_filter(model, lams[lo:hi], xs[lo:hi], H, R, prior, reduce=reduce)
        parts.append(res.states)
    out = []
    for n_t in range(len(parts[0])):
        m = np.concatenate([p[n_t][0] for p in parts])
        second = np.concatenate([p[n_t][1] for p in parts])
        out.append(MixturePosterior(m, second, None) if full_cov else MixturePosterior(m, None, second))
    return out


def _chunk_size(n):
    # components filtered together; bounds the batched covariance to ~32 MB
    return max(1, 32 * 2 ** 20 // (8 * n * n))


def marginal_filter_encoder(model, lam, x_samples, H, R, prior, full_cov=True):
    """Per-time mixtures over M encoder samples ``x_samples`` (M, N, n_x)."""
    x_samples = np.asarray(x_samples, dtype=np.float64)
    if x_samples.ndim == 2:
        x_samples = x_samples[None]
    M = x_samples.shape[0]
    lams = np.broadcast_to(np.asarray(lam, dtype=np.float64), (M, np.size(lam)))
    return _mixtures(model, lams, x_samples, H, R, prior, full_cov, _chunk_size(model.n))


def marginal_filter_joint(model, x_samples, lam_samples, H, R, prior, full_cov=True):
    """Per-time mixtures over all M_x * M_lam pairs of encoder and parameter samples."""
    x_samples = np.asarray(x_samples, dtype=np.float64)
    lam_samples = np.atleast_2d(np.asarray(lam_samples, dtype=np.float64))
    if x_samples.ndim == 2:
        x_samples = x_samples[None]
    mx, ml = x_samples.shape[0], lam_samples.shape[0]
    xs = np.repeat(x_samples, ml, axis=0)
    ls = np.tile(lam_samples, (mx, 1))
    return _mixtures(model, ls, xs, H, R, prior, full_cov, _chunk_size(model.n))
