"""Build latent models and ELBO problems from a resolved configuration."""

from dataclasses import dataclass

import numpy as np

from . import fem
from .codec import make_codec
from .config import param_names
from .dynamics import LorenzSystem, ModelParams, TransitionModel
from .errors import ConfigError
from .kalman import GaussianState
from .elbo import Problem


@dataclass
class LatentSetup:
    model: TransitionModel
    params: ModelParams
    H: np.ndarray
    R: np.ndarray
    mesh: object = None


def build_latent(cfg, free=None):
    """Transition model over one observation interval, parameters, H and R."""
    exp = cfg["experiment"]
    n_x = cfg["model.n_x"]
    R = cfg["model.r_sd"] ** 2 * np.eye(n_x)
    names = param_names(exp)
    free_names = cfg["model.free"] if free is None else free
    params = ModelParams(
        names,
        np.asarray(cfg["data.lambda_true"], dtype=np.float64),
        prior_mean=np.asarray(cfg["model.prior_mean"], dtype=np.float64),
        prior_var=np.asarray(cfg["model.prior_sd"], dtype=np.float64) ** 2,
        free=np.array([n in free_names for n in names]),
    )
    if exp == "lorenz":
        if n_x != 1:
            raise ConfigError("the Lorenz model observes only the first state (n_x = 1)", ["model.n_x"])
        system = LorenzSystem(cfg["model.noise_sd"])
        model = TransitionModel(system, "explicit", cfg["model.dt"], cfg["data.obs_every"])
        H = np.zeros((1, 3))
        H[0, 0] = 1.0
        return LatentSetup(model, params, H, R)
    mesh = fem.Mesh1D(cfg["model.n_u"], tuple(cfg["model.domain"]))
    H = fem.interp_operator(mesh, fem.uniform_points(mesh, n_x))
    build = fem.advection_system if exp == "advection" else fem.kdv_system
    system = build(mesh, cfg["model.rho"], cfg["model.ell"])
    model = TransitionModel(system, cfg["model.scheme"], cfg["model.dt"], cfg["data.obs_every"])
    return LatentSetup(model, params, H, R, mesh)


def initial_state(cfg, mesh=None):
    exp = cfg["experiment"]
    if exp == "lorenz":
        return np.asarray(cfg["data.u0"], dtype=np.float64)
    s = mesh.nodes
    if exp == "advection":
        # width constant 0.1, centred mid-domain
        centre = 0.5 * (mesh.domain[0] + mesh.domain[1])
        return np.exp(-((s - centre) ** 2) / 0.1)
    return np.cos(np.pi * s)


def build_problem(cfg, u0, n_y):
    """ELBO problem for an episode with initial state ``u0`` and frame size ``n_y``."""
    lat = build_latent(cfg)
    n_u = lat.model.n
    prior = GaussianState(np.asarray(u0, dtype=np.float64), cfg["model.prior_u0_sd"] ** 2 * np.eye(n_u))
    codec = make_codec(cfg["codec.kind"], n_y, cfg["model.n_x"], tuple(cfg["codec.hidden"]), cfg["codec.eta"])
    return Problem(codec, lat.model, lat.params, lat.H, lat.R, prior), lat
