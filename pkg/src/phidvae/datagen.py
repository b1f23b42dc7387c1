"""Synthetic datasets: Lorenz-63 velocity fields and advection / KdV videos."""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .config import build_config
from .dynamics import simulate
from .experiments import build_latent, initial_state
from .fem import interp_operator


@dataclass
class Episode:
    """One observed sequence with its ground truth and generation record."""

    y: np.ndarray
    truth_u: np.ndarray = None
    truth_x: np.ndarray = None
    clean_y: np.ndarray = None
    u0: np.ndarray = None
    gen_config: dict = field(default_factory=dict)
    frame_shape: tuple = None

    @property
    def N(self):
        return self.y.shape[0]

    @property
    def n_y(self):
        return self.y.shape[1]

    def __post_init__(self):
        for name in ("truth_u", "truth_x", "clean_y"):
            a = getattr(self, name)
            if a is not None and a.shape[0] != self.y.shape[0]:
                raise ValueError(f"{name} has {a.shape[0]} rows, y has {self.y.shape[0]}")


# Lorenz velocity field


def stream_grid(n=10, lim=4.0):
    s = np.linspace(-lim, lim, n)
    return np.meshgrid(s, s, indexing="ij")


def lorenz_velocity_field(u1, l=8.0, d=8.0, n=10, lim=4.0):
    """Velocities (-d psi/d s2, d psi/d s1) on an n x n grid, flattened to 2 n^2.

    psi(s1, s2) = u1 sin(pi s1 / l) sin(pi s2 / d).  ``u1`` may be an array;
    the field is appended along a new last axis.
    """
    s1, s2 = stream_grid(n, lim)
    a1, a2 = np.pi / l, np.pi / d
    v1 = -a2 * np.sin(a1 * s1) * np.cos(a2 * s2)
    v2 = a1 * np.cos(a1 * s1) * np.sin(a2 * s2)
    w = np.concatenate([v1.ravel(), v2.ravel()])
    return np.asarray(u1, dtype=np.float64)[..., None] * w


# frames


@dataclass(frozen=True)
class FrameGrid:
    width: int
    height: int
    u_min: float
    u_max: float

    @property
    def n_y(self):
        return self.width * self.height

    def row_heights(self):
        """Physical height of each row's centre, top row first."""
        dh = (self.u_max - self.u_min) / self.height
        return self.u_max - (np.arange(self.height) + 0.5) * dh

    def column_points(self, mesh):
        return mesh.domain[0] + (np.arange(self.width) + 0.5) * mesh.length / self.width


def render_frame(u_nodes, mesh, grid):
    """Binary image (height, width): a pixel is lit when its row lies below u_h."""
    H = interp_operator(mesh, grid.column_points(mesh))
    return render_columns(H @ np.asarray(u_nodes, dtype=np.float64), grid)


def render_columns(u_cols, grid):
    u_cols = np.asarray(u_cols, dtype=np.float64)
    lit = grid.row_heights()[:, None] < u_cols[..., None, :]
    return lit.astype(np.float64)


def salt_pepper(img, p, seed=0):
    """Flip each pixel independently with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flip = rng.random(np.shape(img)) < p
    img = np.asarray(img, dtype=np.float64)
    return np.where(flip, 1.0 - img, img)


def count_local_maxima(u):
    u = np.asarray(u)
    return int(np.sum((u > np.roll(u, 1)) & (u > np.roll(u, -1))))


# datasets


def _streams(seed):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]


def generate_from_config(cfg):
    """Episode for a resolved configuration (see :mod:`phidvae.config`)."""
    exp = cfg["experiment"]
    rng_dyn, rng_obs, rng_pix = _streams(cfg["seed"])
    lat = build_latent(cfg)
    u0 = initial_state(cfg, lat.mesh)
    N, every = cfg["data.N"], cfg["data.obs_every"]
    step_model = type(lat.model)(lat.model.system, lat.model.scheme, lat.model.dt, 1)
    noise = 1.0 if cfg["data.stochastic"] else 0.0
    traj = simulate(step_model, lat.params.values, u0, N * every,
                    seed=int(rng_dyn.integers(2 ** 63)), noise_scale=noise)
    truth_u = traj[every::every]
    gen = dict(cfg)
    gen["t_obs"] = lat.model.dt * every
    if exp == "lorenz":
        truth_x = truth_u[:, :1] + cfg["model.r_sd"] * rng_obs.standard_normal((N, 1))
        y = lorenz_velocity_field(truth_x[:, 0], cfg["data.stream_l"], cfg["data.stream_d"],
                                  cfg["data.grid_n"], cfg["data.grid_lim"])
        gen["stream_constant"] = 1.0
        return Episode(y, truth_u, truth_x, y.copy(), u0, gen, None)
    truth_x = truth_u @ lat.H.T
    grid = FrameGrid(cfg["data.frame_width"], cfg["data.frame_height"], cfg["data.u_min"], cfg["data.u_max"])
    Hc = interp_operator(lat.mesh, grid.column_points(lat.mesh))
    cols = truth_u @ Hc.T
    clipped = int(np.sum(np.any((cols > grid.u_max) | (cols < grid.u_min), axis=1)))
    gen["clipped_frames"] = clipped
    if clipped:
        warnings.warn(f"{clipped} frames exceed the vertical range [{grid.u_min}, {grid.u_max}]")
    clean = render_columns(cols, grid).reshape(N, -1)
    y = salt_pepper(clean, cfg["data.noise_p"], rng_pix)
    return Episode(y, truth_u, truth_x, clean, u0, gen, (grid.height, grid.width))


def generate_dataset(experiment, overrides=(), seed=0):
    """Episode for ``experiment`` with its default configuration and ``key=value`` overrides."""
    if isinstance(overrides, dict):
        overrides = [f"{k}={v}" for k, v in overrides.items()]
    cfg = build_config(experiment, overrides=list(overrides), seed=seed)
    return generate_from_config(cfg)
