"""Run configuration: flat ``dotted.key = value`` text, or JSON.

Each experiment has a full default table; files and ``--override`` pairs only
change keys that already exist.  An override key may be given by any unique
dotted suffix, so ``n_u=32`` resolves to ``model.n_u``.
"""

import copy
import json
from pathlib import Path

from .errors import ConfigError

EXPERIMENTS = ("lorenz", "advection", "kdv")

_COMMON = {
    "experiment": "",
    "seed": 0,
    "train.lr": 1e-3,
    "train.lr_lambda": 0.0,
    "train.epochs": 200,
    "train.M_lambda": 4,
    "train.M_x": 1,
    "train.clip_norm": 100.0,
    "train.max_redraws": 10,
    "train.kl": "analytic",
    "train.checkpoint_every": 10,
    "train.record_wallclock": False,
    "eval.M_x": 8,
    "eval.M_lambda": 8,
    "codec.hidden": [128, 128],
    "codec.eta": 0.005,
    "data.noise_p": 0.05,
}

_DEFAULTS = {
    "lorenz": {
        "data.N": 150,
        "data.obs_every": 40,
        "data.lambda_true": [10.0, 28.0, 8.0 / 3.0],
        "data.u0": [-3.7277, -3.8239, 21.1507],
        "data.stochastic": True,
        "data.stream_l": 8.0,
        "data.stream_d": 8.0,
        "data.grid_n": 10,
        "data.grid_lim": 4.0,
        "model.n_u": 3,
        "model.n_x": 1,
        "model.dt": 0.001,
        "model.scheme": "explicit",
        "model.noise_sd": 0.2,
        "model.r_sd": 0.4,
        "model.prior_u0_sd": 0.4,
        "model.prior_mean": [30.0, 20.0, 5.0],
        "model.prior_sd": [12.0, 10.0, 3.0],
        "model.free": ["sigma", "r", "b"],
        "codec.kind": "linear",
        "train.lr": 1e-4,
    },
    "advection": {
        "data.N": 200,
        "data.obs_every": 10,
        "data.lambda_true": [0.5],
        "data.stochastic": False,
        "data.frame_width": 28,
        "data.frame_height": 28,
        "data.u_min": -0.2,
        "data.u_max": 1.2,
        "model.n_u": 64,
        "model.n_x": 64,
        "model.domain": [0.0, 1.0],
        "model.dt": 0.02,
        "model.scheme": "crank_nicolson",
        "model.rho": 0.02,
        "model.ell": 0.1,
        "model.r_sd": 0.1,
        "model.prior_u0_sd": 0.1,
        "model.prior_mean": [0.5],
        "model.prior_sd": [1.0],
        "model.free": [],
        "codec.kind": "bernoulli",
        "train.lr": 1e-3,
    },
    "kdv": {
        "data.N": 100,
        "data.obs_every": 1,
        "data.lambda_true": [1.0, 0.022 ** 2],
        "data.stochastic": False,
        "data.frame_width": 64,
        "data.frame_height": 28,
        "data.u_min": -2.5,
        "data.u_max": 2.5,
        "model.n_u": 600,
        "model.n_x": 40,
        "model.domain": [0.0, 2.0],
        "model.dt": 0.01,
        "model.scheme": "crank_nicolson",
        "model.rho": 0.01,
        "model.ell": 0.2,
        "model.r_sd": 0.05,
        "model.prior_u0_sd": 0.05,
        "model.prior_mean": [1.5, 0.022 ** 2],
        "model.prior_sd": [0.3, 1.0],
        "model.free": ["alpha"],
        "codec.kind": "bernoulli",
        # codec steps of 5e-3 throw the filter state out of Newton's reach
        "train.lr": 5e-4,
        "train.lr_lambda": 0.01,
    },
}


def default_config(experiment):
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; expected one of {EXPERIMENTS}", ["experiment"])
    cfg = copy.deepcopy(_COMMON)
    cfg.update(copy.deepcopy(_DEFAULTS[experiment]))
    cfg["experiment"] = experiment
    return cfg


def _parse_scalar(text, like):
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def parse_value(text, like):
    """Parse ``text`` to the type of the default ``like``."""
    if isinstance(like, list):
        if isinstance(text, list):
            items = text
        else:
            text = text.strip().strip("[]")
            items = [t for t in text.split(",") if t.strip()] if text else []
        elem = like[0] if like else ""
        return [_parse_scalar(str(t), elem) if isinstance(t, str) else t for t in items]
    if not isinstance(text, str):
        if isinstance(like, float) and isinstance(text, int) and not isinstance(text, bool):
            return float(text)
        if type(text) is not type(like) and not (isinstance(like, str)):
            raise ValueError(f"expected {type(like).__name__}, got {text!r}")
        return text
    return _parse_scalar(text, like)


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def read_pairs(path):
    """Key/value pairs from a flat text or JSON config file."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        try:
            return _flatten(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    pairs, bad = {}, []
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            bad.append(f"line {no}")
            continue
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    if bad:
        raise ConfigError(f"{path}: malformed lines {', '.join(bad)}", bad)
    return pairs


def resolve_key(cfg, key):
    if key in cfg:
        return key
    hits = [k for k in cfg if k.endswith("." + key)]
    if len(hits) == 1:
        return hits[0]
    if len(hits) > 1:
        raise ConfigError(f"ambiguous key {key!r}: matches {hits}", [key])
    raise ConfigError(f"unknown key {key!r}", [key])


def apply_pairs(cfg, pairs):
    """Set every pair in ``cfg``; collects all bad keys before raising."""
    bad, messages = [], []
    for key, raw in pairs.items():
        if key == "experiment":
            continue
        try:
            full = resolve_key(cfg, key)
            cfg[full] = parse_value(raw, cfg[full])
        except ConfigError as exc:
            bad.extend(exc.keys)
            messages.append(str(exc))
        except ValueError as exc:
            bad.append(key)
            messages.append(f"{key}: {exc}")
    if bad:
        raise ConfigError("invalid configuration: " + "; ".join(messages), bad)
    return cfg


def parse_overrides(items):
    pairs, bad = {}, []
    for item in items or ():
        if "=" not in item:
            bad.append(item)
            continue
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    if bad:
        raise ConfigError(f"overrides must look like key=value: {bad}", bad)
    return pairs


def build_config(experiment=None, path=None, overrides=(), seed=None):
    """Resolve defaults, then file values, then overrides, then ``seed``."""
    file_pairs = read_pairs(path) if path else {}
    over = parse_overrides(overrides)
    exp = experiment or over.get("experiment") or file_pairs.get("experiment")
    if not exp:
        raise ConfigError("no experiment given", ["experiment"])
    cfg = default_config(str(exp).strip())
    apply_pairs(cfg, file_pairs)
    apply_pairs(cfg, over)
    if seed is not None:
        cfg["seed"] = int(seed)
    validate(cfg)
    return cfg


def validate(cfg):
    bad = []

    def need(key, ok):
        if not ok:
            bad.append(key)

    need("data.N", cfg["data.N"] >= 1)
    need("data.obs_every", cfg["data.obs_every"] >= 1)
    need("data.noise_p", 0.0 <= cfg["data.noise_p"] <= 1.0)
    need("model.dt", cfg["model.dt"] > 0)
    need("model.r_sd", cfg["model.r_sd"] > 0)
    need("model.prior_u0_sd", cfg["model.prior_u0_sd"] > 0)
    need("model.n_x", cfg["model.n_x"] >= 1)
    need("train.lr", cfg["train.lr"] > 0)
    need("train.lr_lambda", cfg["train.lr_lambda"] >= 0)
    need("train.epochs", cfg["train.epochs"] >= 1)
    need("train.M_lambda", cfg["train.M_lambda"] >= 1)
    need("train.kl", cfg["train.kl"] in ("analytic", "mc"))
    need("codec.eta", cfg["codec.eta"] > 0)
    n_par = len(cfg["data.lambda_true"])
    need("model.prior_mean", len(cfg["model.prior_mean"]) == n_par)
    need("model.prior_sd", len(cfg["model.prior_sd"]) == n_par and all(s > 0 for s in cfg["model.prior_sd"]))
    names = param_names(cfg["experiment"])
    need("model.free", all(f in names for f in cfg["model.free"]))
    if cfg["experiment"] == "lorenz":
        need("model.n_u", cfg["model.n_u"] == 3)
        need("model.scheme", cfg["model.scheme"] == "explicit")
        need("data.u0", len(cfg["data.u0"]) == 3)
    else:
        need("model.n_u", cfg["model.n_u"] >= 5)
        need("model.ell", cfg["model.ell"] > 0)
        need("model.rho", cfg["model.rho"] >= 0)
        need("model.scheme", cfg["model.scheme"] in ("explicit", "implicit_euler", "crank_nicolson"))
        need("data.u_max", cfg["data.u_max"] > cfg["data.u_min"])
        need("model.domain", len(cfg["model.domain"]) == 2 and cfg["model.domain"][1] > cfg["model.domain"][0])
    if bad:
        raise ConfigError(f"invalid values for {bad}", bad)
    return cfg


def param_names(experiment):
    return {"lorenz": ("sigma", "r", "b"), "advection": ("c",), "kdv": ("alpha", "beta")}[experiment]


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def dumps(cfg):
    """Flat text form; ``read_pairs`` on it reproduces ``cfg``."""
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in cfg.items())


def loads(text, experiment=None):
    """Inverse of :func:`dumps` (also accepts JSON)."""
    if text.lstrip().startswith("{"):
        pairs = _flatten(json.loads(text))
    else:
        pairs = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                k, v = line.split("=", 1)
                pairs[k.strip()] = v.strip()
    cfg = default_config(experiment or str(pairs["experiment"]).strip())
    return apply_pairs(cfg, pairs)
