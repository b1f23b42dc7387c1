"""Post-training evaluation: reconstructions and the marginal filtering posterior."""

from dataclasses import dataclass

import numpy as np

from . import ad
from .elbo import lambda_moments, normalized_mse
from .kalman import GaussianState, marginal_filter_joint, predict


@dataclass
class EvalResult:
    y_hat: np.ndarray
    frame_nmse: np.ndarray
    nmse: float
    post_mean: np.ndarray
    post_sd: np.ndarray
    rmse_filter: float = None
    rmse_prior: float = None


def frame_nmse(y_hat, y):
    return np.sum((y_hat - y) ** 2, axis=1) / np.maximum(np.sum(y ** 2, axis=1), 1e-300)


def posterior_samples(theta, problem, Y, rng, M_x, M_lambda):
    """Encoder samples (M_x, N, n_x) and parameter vectors (M_lambda', n_params)."""
    xs = np.stack([
        np.asarray(ad.value(problem.codec.sample(theta, Y, rng.standard_normal((Y.shape[0], problem.codec.n_x)))[0]))
        for _ in range(M_x)
    ])
    mp = problem.params
    if mp.n_free == 0:
        return xs, mp.values[None, :]
    mu, sd = lambda_moments(theta)
    free = mu + sd * rng.standard_normal((M_lambda, mp.n_free))
    return xs, np.asarray(mp.assemble(free))


def prior_only_means(problem, lam, N):
    """Mean trajectory predicted from the u_0 prior with no updates."""
    state = GaussianState(problem.prior.m, problem.prior.C)
    out = []
    for n in range(N):
        state = predict(state, problem.model, lam, step=n + 1)
        out.append(np.asarray(ad.value(state.m)))
    return np.array(out)


def evaluate(theta, problem, Y, rng, M_x=8, M_lambda=8, target=None, truth_u=None):
    """Reconstruction errors and per-time mixture posterior moments.

    ``target`` is the reference for the normalised MSE (default ``Y``).
    """
    Y = np.asarray(Y, dtype=np.float64)
    target = Y if target is None else target
    y_hat = problem.codec.reconstruct(theta, Y)
    xs, lams = posterior_samples(theta, problem, Y, rng, M_x, M_lambda)
    mix = marginal_filter_joint(problem.model, xs, lams, problem.H, problem.R, problem.prior, full_cov=False)
    mean = np.array([m.mean() for m in mix])
    sd = np.array([m.sd() for m in mix])
    res = EvalResult(y_hat, frame_nmse(y_hat, target), normalized_mse(y_hat, target), mean, sd)
    if truth_u is not None:
        mp = problem.params
        lam_c = mp.values if mp.n_free == 0 else np.asarray(mp.assemble(lambda_moments(theta)[0]))
        prior_mean = prior_only_means(problem, lam_c, Y.shape[0])
        res.rmse_filter = float(np.sqrt(np.mean((mean - truth_u) ** 2)))
        res.rmse_prior = float(np.sqrt(np.mean((prior_mean - truth_u) ** 2)))
    return res
