"""Amortised encoders q(x_n | y_n) and decoders p(y_n | x_n).

Networks are fully connected with LeakyReLU hidden layers.  Parameters live
in flat dictionaries keyed ``"<prefix>.W<k>"`` / ``"<prefix>.b<k>"`` so they
can be merged into one :class:`~phidvae.ad.ParamSet` with the physical
parameters.  All functions act row-wise, so a whole sequence (N, n_y) is
processed in one call; the same weights serve every time index.
"""

from dataclasses import dataclass

import numpy as np

from . import ad
from .errors import DimensionError, NumericError

LOG_2PI = float(np.log(2.0 * np.pi))
SLOPE = 0.01
PROB_EPS = 1e-7
LOGSIG_BIAS = -1.0


@dataclass(frozen=True)
class MLP:
    """n_in -> hidden... -> n_out, optionally with a log-sd head sharing the trunk."""

    n_in: int
    n_out: int
    hidden: tuple = (128, 128)
    prefix: str = "enc"
    log_sigma_head: bool = False

    @property
    def sizes(self):
        return (self.n_in,) + tuple(self.hidden) + (self.n_out,)

    def slot_shapes(self):
        out, sizes = {}, self.sizes
        for k in range(len(sizes) - 1):
            out[f"{self.prefix}.W{k}"] = (sizes[k], sizes[k + 1])
            out[f"{self.prefix}.b{k}"] = (sizes[k + 1],)
        if self.log_sigma_head:
            out[f"{self.prefix}.Ws"] = (sizes[-2], self.n_out)
            out[f"{self.prefix}.bs"] = (self.n_out,)
        return out

    def init(self, rng):
        """Glorot-uniform weights, zero biases, log-sd bias at LOGSIG_BIAS."""
        params = {}
        for name, shape in self.slot_shapes().items():
            if len(shape) == 2:
                a = np.sqrt(6.0 / (shape[0] + shape[1]))
                params[name] = rng.uniform(-a, a, size=shape)
            else:
                params[name] = np.zeros(shape)
        if self.log_sigma_head:
            params[f"{self.prefix}.bs"] = np.full(self.n_out, LOGSIG_BIAS)
        return params

    def zeros(self):
        return {k: np.zeros(s) for k, s in self.slot_shapes().items()}

    def trunk(self, params, z):
        if np.shape(ad.value(z))[-1] != self.n_in:
            raise DimensionError(f"{self.prefix}: expected input width {self.n_in}, got {np.shape(ad.value(z))}")
        p = self.prefix
        for k in range(len(self.hidden)):
            z = ad.leaky_relu(ad.matmul(z, params[f"{p}.W{k}"]) + params[f"{p}.b{k}"], slope=SLOPE)
        return z

    def forward(self, params, z):
        """Output head (and log-sd head when present)."""
        h = self.trunk(params, z)
        k = len(self.hidden)
        out = ad.matmul(h, params[f"{self.prefix}.W{k}"]) + params[f"{self.prefix}.b{k}"]
        if not self.log_sigma_head:
            return out
        logsig = ad.matmul(h, params[f"{self.prefix}.Ws"]) + params[f"{self.prefix}.bs"]
        return out, logsig


def _check_finite(x, what):
    if not np.all(np.isfinite(ad.value(x))):
        raise NumericError(f"non-finite {what}")


def encode(y, enc, params):
    """Encoder moments (mu, sigma); sigma is a standard deviation."""
    mu, logsig = enc.forward(params, y)
    sigma = ad.exp(logsig)
    _check_finite(mu, "encoder mean")
    _check_finite(sigma, "encoder scale")
    return mu, sigma


def reparam_sample(mu, sigma, eps):
    return mu + sigma * eps


def _episode_sum(v):
    """Sum over frames and entries (the last two axes); leading axes are samples."""
    nd = np.ndim(ad.value(v))
    return ad.sum(v) if nd <= 2 else ad.sum(v, axis=(-2, -1))


def _episode_size(v):
    shape = np.shape(ad.value(v))
    return int(np.prod(shape[-2:], dtype=int))


def gaussian_diag_logpdf(x, mu, sigma):
    """log N(x; mu, diag(sigma^2)) summed over frames and entries."""
    z = (x - mu) / sigma
    n = _episode_size(z)
    return -0.5 * n * LOG_2PI - _episode_sum(ad.log(sigma * np.ones(np.shape(ad.value(z))))) - 0.5 * _episode_sum(z * z)


def decode_bernoulli(x, dec, params):
    """Pixel probabilities in (0, 1)."""
    return ad.sigmoid(dec.forward(params, x))


def bernoulli_loglik(y, probs):
    p = ad.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    return _episode_sum(y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p))


def decode_gaussian(x, dec, params, eta):
    if not eta > 0:
        raise ValueError("eta must be positive")
    return dec.forward(params, x), eta ** 2


def gaussian_loglik(y, mean, var):
    r = y - mean
    n = _episode_size(r)
    return -0.5 * n * np.log(2.0 * np.pi * var) - 0.5 * _episode_sum(r * r) / var


@dataclass(frozen=True)
class LinearDecoder:
    """p(y | x) = N(w x, eta^2 I) with w of shape (n_y, n_x)."""

    n_y: int
    n_x: int
    eta: float = 0.005
    prefix: str = "dec"

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")

    def slot_shapes(self):
        return {f"{self.prefix}.w": (self.n_y, self.n_x)}

    def init(self, rng):
        a = np.sqrt(6.0 / (self.n_y + self.n_x))
        return {f"{self.prefix}.w": rng.uniform(-a, a, size=(self.n_y, self.n_x))}

    def mean(self, params, x):
        return ad.matmul(x, ad.transpose(params[f"{self.prefix}.w"]))


def pinv_encode(y, dec, params):
    """Moments of the inverted linear decoder: ((w^T w)^-1 w^T y, eta^2 (w^T w)^-1).

    ``y`` may be a single vector or rows (N, n_y); the covariance is shared.
    """
    w = params[f"{dec.prefix}.w"]
    P = ad.matmul(ad.transpose(w), w)
    try:
        L = ad.cholesky(P)
    except NumericError as exc:
        raise NumericError(f"decoder weights are rank deficient: {exc}", pivot=exc.pivot) from exc
    wty = ad.matmul(y, w)
    if np.ndim(ad.value(y)) > 1:
        mu = ad.transpose(ad.solve_spd(P, ad.transpose(wty)))
    else:
        mu = ad.getitem(ad.solve_spd(P, ad.reshape(wty, (dec.n_x, 1))), (Ellipsis, 0))
    cov = dec.eta ** 2 * ad.solve_spd(P, np.eye(dec.n_x))
    return mu, cov, L


class BernoulliCodec:
    """MLP encoder with diagonal Gaussian output and MLP Bernoulli decoder."""

    kind = "bernoulli"

    def __init__(self, n_y, n_x, hidden=(128, 128)):
        self.n_y, self.n_x = n_y, n_x
        self.enc = MLP(n_y, n_x, tuple(hidden), "enc", log_sigma_head=True)
        self.dec = MLP(n_x, n_y, tuple(hidden), "dec")

    def slot_shapes(self):
        return {**self.enc.slot_shapes(), **self.dec.slot_shapes()}

    def init(self, rng):
        return {**self.enc.init(rng), **self.dec.init(rng)}

    def sample(self, params, Y, eps):
        """One reparameterised x per frame and sum_n log q(x_n | y_n).

        ``eps`` may carry a leading sample axis (S, N, n_x); x and log q gain it too.
        """
        mu, sigma = encode(Y, self.enc, params)
        x = reparam_sample(mu, sigma, eps)
        return x, gaussian_diag_logpdf(x, mu, sigma)

    def encoder_mean(self, params, Y):
        return encode(Y, self.enc, params)[0]

    def loglik(self, params, x, Y):
        return bernoulli_loglik(Y, decode_bernoulli(x, self.dec, params))

    def reconstruct(self, params, Y):
        """Decoder mean at the encoder mean."""
        return ad.value(decode_bernoulli(self.encoder_mean(params, Y), self.dec, params))


class GaussianCodec(BernoulliCodec):
    """MLP encoder with an MLP Gaussian decoder N(mu(x), eta^2 I)."""

    kind = "gaussian"

    def __init__(self, n_y, n_x, hidden=(128, 128), eta=0.005):
        super().__init__(n_y, n_x, hidden)
        self.eta = eta

    def loglik(self, params, x, Y):
        mean, var = decode_gaussian(x, self.dec, params, self.eta)
        return gaussian_loglik(Y, mean, var)

    def reconstruct(self, params, Y):
        return ad.value(self.dec.forward(params, self.encoder_mean(params, Y)))


class LinearCodec:
    """Linear Gaussian decoder with the tied pseudo-inverse encoder."""

    kind = "linear"

    def __init__(self, n_y, n_x, eta=0.005):
        self.n_y, self.n_x = n_y, n_x
        self.dec = LinearDecoder(n_y, n_x, eta)

    def slot_shapes(self):
        return self.dec.slot_shapes()

    def init(self, rng):
        return self.dec.init(rng)

    def init_from_data(self, Y, x_ref):
        """Decoder w = V D from the leading right singular vectors V of ``Y``.

        ``x_ref`` (K, n_x) are reference pseudo-observations for the first K
        frames; D is the least-squares scale (and sign) of each column that
        makes the pseudo-inverse encodings match them.
        """
        Y = np.asarray(Y, dtype=np.float64)
        _, S, Vt = np.linalg.svd(Y, full_matrices=False)
        V = Vt[:self.n_x].T
        x_ref = np.atleast_2d(np.asarray(x_ref, dtype=np.float64))
        proj = Y[:x_ref.shape[0]] @ V
        fallback = S[:self.n_x] / np.sqrt(Y.shape[0])
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.sum(proj * x_ref, axis=0) / np.sum(x_ref * x_ref, axis=0)
        bad = ~np.isfinite(d) | (np.abs(d) < 1e-8 * fallback)
        d = np.where(bad, fallback, d)
        return {f"{self.dec.prefix}.w": V * d}

    def sample(self, params, Y, eps):
        # cov = eta^2 P^-1 with P = L L^T, so x = mu + eta L^-T eps
        mu, _, L = pinv_encode(Y, self.dec, params)
        eta = self.dec.eta
        noise = ad.transpose(ad.solve(ad.transpose(L), ad.transpose(eps)))
        x = mu + eta * noise
        n = np.shape(eps)[-2] if np.ndim(eps) > 1 else 1
        logdet_cov = self.n_x * np.log(eta ** 2) - 2.0 * ad.sum(ad.log(ad.diagonal(L)))
        logq = -0.5 * n * (self.n_x * LOG_2PI + logdet_cov) - 0.5 * _episode_sum(eps * eps)
        return x, logq

    def encoder_mean(self, params, Y):
        return pinv_encode(Y, self.dec, params)[0]

    def loglik(self, params, x, Y):
        return gaussian_loglik(Y, self.dec.mean(params, x), self.dec.eta ** 2)

    def reconstruct(self, params, Y):
        return ad.value(self.dec.mean(params, self.encoder_mean(params, Y)))


def make_codec(kind, n_y, n_x, hidden=(128, 128), eta=0.005):
    if kind == "bernoulli":
        return BernoulliCodec(n_y, n_x, hidden)
    if kind == "gaussian":
        return GaussianCodec(n_y, n_x, hidden, eta)
    if kind == "linear":
        return LinearCodec(n_y, n_x, eta)
    raise ValueError(f"unknown codec {kind!r}")
