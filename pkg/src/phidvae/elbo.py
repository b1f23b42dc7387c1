"""Evidence lower bound, Adam, and the training loop.

For one encoder sample x_{1:N} ~ q(x | y) and M parameter samples
Lambda_j ~ q_lambda the loss is

    sum_n [log p(y_n | x_n) - log q(x_n | y_n)]
      + (1/M) sum_j log p(x_{1:N} | Lambda_j) - KL(q_lambda || p(Lambda)),

with log p(x | Lambda) from the extended Kalman filter.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import ad
from .errors import DimensionError, NumericError, TrainingError
from .kalman import GaussianState, predict, run_filter

LOG_2PI = float(np.log(2.0 * np.pi))
ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class Problem:
    """Everything the ELBO needs besides the trainable parameters and data."""

    codec: object
    model: object
    params: object  # dynamics.ModelParams
    H: np.ndarray
    R: np.ndarray
    prior: object  # kalman.GaussianState over u_0

    @property
    def n_free(self):
        return self.params.n_free


def kl_gaussian_diag(mu, sigma, prior_mean, prior_var):
    """KL(N(mu, diag sigma^2) || N(prior_mean, diag prior_var))."""
    prior_var = np.asarray(prior_var, dtype=np.float64)
    if np.any(prior_var <= 0):
        raise ValueError("prior variances must be positive")
    s0 = np.sqrt(prior_var)
    d = mu - prior_mean
    return ad.sum(np.log(s0) - ad.log(sigma) + (sigma * sigma + d * d) / (2.0 * prior_var) - 0.5)


def gaussian_logpdf_diag(x, mean, var):
    """log N(x; mean, diag var) summed over the last axis."""
    d = x - mean
    return ad.sum(-0.5 * (LOG_2PI + ad.log(var * np.ones(np.shape(ad.value(d))))) - 0.5 * d * d / var, axis=-1)


def mc_kl_fallback(mu, sigma, prior_logpdf, M, rng, loglik=None):
    """Monte-Carlo estimate of E_q[log p(x | L) + log p(L) - log q(L)].

    Without ``loglik`` this estimates -KL(q || p).  ``prior_logpdf`` and
    ``loglik`` map samples (M, d) to values (M,).
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    eps = rng.standard_normal((M, np.shape(ad.value(mu))[-1]))
    lam = mu + sigma * eps
    logq = gaussian_logpdf_diag(lam, mu, sigma * sigma)
    terms = prior_logpdf(lam) - logq
    if loglik is not None:
        terms = terms + loglik(lam)
    return ad.mean(terms)


@dataclass
class ElboTerms:
    elbo: object
    reconstruction: object
    log_q: object
    loglik: object
    kl: object
    x: object = None
    lam: object = None


def draw_noise(problem, n_frames, rng, M_lambda):
    """Standard-normal draws for one ELBO evaluation, in a fixed order."""
    eps_x = rng.standard_normal((n_frames, problem.codec.n_x))
    eps_l = rng.standard_normal((M_lambda, problem.n_free)) if problem.n_free else None
    return eps_x, eps_l


def elbo_terms(theta, Y, problem, eps_x, eps_l=None, kl="analytic"):
    """ELBO and its pieces for given parameters and noise draws.

    ``theta`` holds the codec slots and, when parameters are estimated,
    ``lam.mu`` and ``lam.logsig``.
    """
    codec = problem.codec
    x, logq = codec.sample(theta, Y, eps_x)
    rec = codec.loglik(theta, x, Y)
    mp = problem.params
    if mp.n_free == 0:
        ll = run_filter(problem.model, mp.values, x, problem.H, problem.R, problem.prior,
                        keep_states=False).loglik
        return ElboTerms(rec - logq + ll, rec, logq, ll, 0.0, x, mp.values)
    mu = theta["lam.mu"]
    sigma = ad.exp(theta["lam.logsig"])
    if eps_l is None:
        raise ValueError("parameter noise required when parameters are estimated")
    samples = mu + sigma * eps_l
    lam = mp.assemble(samples)
    lls = run_filter(problem.model, lam, x, problem.H, problem.R, problem.prior, keep_states=False).loglik
    ll = ad.mean(lls)
    pm, pv = mp.prior_mean[mp.free], mp.prior_var[mp.free]
    if kl == "analytic":
        kl_val = kl_gaussian_diag(mu, sigma, pm, pv)
    elif kl == "mc":
        logp = gaussian_logpdf_diag(samples, pm, pv)
        logq_l = gaussian_logpdf_diag(samples, mu, sigma * sigma)
        kl_val = -ad.mean(logp - logq_l)
    else:
        raise ValueError(f"unknown kl mode {kl!r}")
    return ElboTerms(rec - logq + ll - kl_val, rec, logq, ll, kl_val, x, lam)


def elbo(theta, Y, problem, rng, M_lambda=4, kl="analytic"):
    """Single-sample ELBO estimate; draws its noise from ``rng``."""
    eps_x, eps_l = draw_noise(problem, np.shape(Y)[0], rng, M_lambda)
    return elbo_terms(theta, Y, problem, eps_x, eps_l, kl=kl).elbo


# optimisation


@dataclass
class AdamState:
    m: ad.ParamSet
    v: ad.ParamSet
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(params.map(np.zeros_like), params.map(np.zeros_like), 0)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam descent step. ``lr`` is a float or a slot -> float map."""
    if params.shapes != grads.shapes:
        raise DimensionError("parameter and gradient layouts differ")
    t = state.t + 1
    m = state.m.map(lambda m_, g: ADAM_B1 * m_ + (1.0 - ADAM_B1) * g, grads)
    v = state.v.map(lambda v_, g: ADAM_B2 * v_ + (1.0 - ADAM_B2) * g * g, grads)
    c1, c2 = 1.0 - ADAM_B1 ** t, 1.0 - ADAM_B2 ** t
    new = {}
    for k in params:
        step = lr[k] if isinstance(lr, dict) else lr
        new[k] = params[k] - step * (m[k] / c1) / (np.sqrt(v[k] / c2) + ADAM_EPS)
    return ad.ParamSet(new), AdamState(m, v, t)


def clip_global_norm(grads, max_norm):
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm and norm > max_norm:
        return grads.map(lambda g: g * (max_norm / norm)), norm
    return grads, norm


# training


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_lambda: float = None
    epochs: int = 200
    M_lambda: int = 4
    M_x: int = 1
    seed: int = 0
    clip_norm: float = 100.0
    kl: str = "analytic"
    checkpoint_every: int = 0
    record_wallclock: bool = False
    max_redraws: int = 10

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.lr_lambda is not None and not self.lr_lambda > 0:
            raise ValueError("lr_lambda must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.M_lambda < 1 or self.M_x < 1:
            raise ValueError("sample counts must be >= 1")
        if self.max_redraws < 0:
            raise ValueError("max_redraws must be >= 0")

    def learning_rates(self, params):
        lr_l = self.lr if self.lr_lambda is None else self.lr_lambda
        return {k: (lr_l if k.startswith("lam.") else self.lr) for k in params}


INIT_FRAMES = 5


def prior_predictive_x(problem, K):
    """H m_n for n = 1..K, predicted from the u_0 prior at the prior mean of the parameters."""
    mp = problem.params
    lam = mp.values if mp.n_free == 0 else np.asarray(mp.assemble(mp.prior_mean[mp.free]))
    state = GaussianState(problem.prior.m, problem.prior.C)
    out = []
    for n in range(K):
        state = predict(state, problem.model, lam, step=n + 1)
        out.append(np.asarray(problem.H) @ np.asarray(ad.value(state.m)))
    return np.array(out)


def init_theta(problem, rng, Y=None):
    """Codec weights from ``rng``; q_lambda starts at the prior.

    With ``Y`` given, codecs that support it are initialised from the data,
    matched to the prior predictive means of the first few pseudo-observations.
    """
    theta = dict(problem.codec.init(rng))
    mp = problem.params
    if Y is not None and hasattr(problem.codec, "init_from_data"):
        theta.update(problem.codec.init_from_data(Y, prior_predictive_x(problem, min(INIT_FRAMES, len(Y)))))
    if mp.n_free:
        theta["lam.mu"] = mp.prior_mean[mp.free].copy()
        theta["lam.logsig"] = 0.5 * np.log(mp.prior_var[mp.free])
    return ad.ParamSet(theta)


def lambda_moments(theta):
    if "lam.mu" not in theta:
        return np.zeros(0), np.zeros(0)
    return np.asarray(ad.value(theta["lam.mu"])), np.exp(np.asarray(ad.value(theta["lam.logsig"])))


def normalized_mse(y_hat, y):
    return float(np.sum((y_hat - y) ** 2) / np.sum(y ** 2))


def reconstruction_nmse(theta, problem, Y, target=None):
    """Decoder mean at the encoder mean against ``target`` (default ``Y``)."""
    target = Y if target is None else target
    return normalized_mse(problem.codec.reconstruct(theta, Y), target)


@dataclass
class TrainState:
    theta: ad.ParamSet
    adam: AdamState
    rng: np.random.Generator
    epoch: int = 0
    metrics: list = field(default_factory=list)


def new_train_state(problem, config, Y=None):
    rng = np.random.default_rng(config.seed)
    theta = init_theta(problem, rng, Y)
    return TrainState(theta, AdamState.zeros_like(theta), rng, 0, [])


def _metrics_row(epoch, value, theta, problem, Y, target, t0, config):
    mu, sd = lambda_moments(theta)
    return {
        "epoch": epoch,
        "elbo": value,
        "nmse": reconstruction_nmse(theta, problem, Y, target),
        "mu_lambda": mu.tolist(),
        "sigma_lambda": sd.tolist(),
        "wallclock_s": (time.perf_counter() - t0) if config.record_wallclock else None,
    }


def _evaluate_once(theta, Y, problem, config, rng, with_grad):
    eps_x, eps_l = draw_noise(problem, np.shape(Y)[0], rng, config.M_lambda)

    def loss(p):
        return -elbo_terms(p, Y, problem, eps_x, eps_l, kl=config.kl).elbo

    if with_grad:
        val, grads = ad.value_and_gradient(loss, theta)
        return -val, grads
    return -float(np.asarray(ad.value(loss(theta))).reshape(())), None


def _evaluate(theta, Y, problem, config, rng, with_grad):
    """ELBO (and gradient), redrawing the noise when the filter fails.

    Wide parameter posteriors put mass on unstable models (e.g. b < 0 for
    Lorenz) whose filter blows up.  Redrawing up to ``config.max_redraws``
    times restricts the estimate to the numerically stable region.
    """
    for attempt in range(config.max_redraws + 1):
        try:
            return _evaluate_once(theta, Y, problem, config, rng, with_grad)
        except NumericError:
            if attempt == config.max_redraws:
                raise


def train(Y, problem, config, state=None, target=None, on_checkpoint=None, log=None):
    """Maximise the ELBO; returns the final TrainState.

    ``metrics`` gets one row per epoch describing the parameters at the start
    of that epoch, plus a final row, so ``epochs + 1`` rows in total.
    ``on_checkpoint(state)`` is called every ``config.checkpoint_every`` epochs.
    """
    Y = np.asarray(Y, dtype=np.float64)
    state = state or new_train_state(problem, config, Y)
    lrs = config.learning_rates(state.theta)
    t0 = time.perf_counter()
    while state.epoch < config.epochs:
        e = state.epoch
        try:
            value, grads = _evaluate(state.theta, Y, problem, config, state.rng, True)
        except NumericError as exc:
            raise TrainingError(f"epoch {e}: {exc}", epoch=e,
                                snapshot={"theta": state.theta, "metrics": list(state.metrics)}) from exc
        gflat = grads.flatten()
        if not (np.isfinite(value) and np.all(np.isfinite(gflat))):
            raise TrainingError(f"epoch {e}: non-finite loss or gradient", epoch=e,
                                snapshot={"theta": state.theta, "elbo": value, "metrics": list(state.metrics)})
        state.metrics.append(_metrics_row(e, value, state.theta, problem, Y, target, t0, config))
        if log is not None:
            log(state.metrics[-1])
        grads, _ = clip_global_norm(grads, config.clip_norm)
        theta, adam = adam_step(state.theta, grads, state.adam, lrs)
        state.theta, state.adam, state.epoch = theta, adam, e + 1
        if on_checkpoint is not None and config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
            on_checkpoint(state)
    if len(state.metrics) == config.epochs:
        try:
            value, _ = _evaluate(state.theta, Y, problem, config, state.rng, False)
        except NumericError as exc:
            raise TrainingError(f"final evaluation: {exc}", epoch=config.epochs) from exc
        state.metrics.append(_metrics_row(config.epochs, value, state.theta, problem, Y, target, t0, config))
        if log is not None:
            log(state.metrics[-1])
    return state
