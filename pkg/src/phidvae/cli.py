"""Command line: ``gen``, ``train`` and ``eval``.

    phidvae gen   --experiment kdv --seed 1 --override n_u=128 --out runs/kdv/data
    phidvae train --episode runs/kdv/data --out runs/kdv/train
    phidvae eval  --checkpoint runs/kdv/train/final.ckpt --episode runs/kdv/data --out runs/kdv/eval
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import report, storage
from .config import apply_pairs, build_config, dumps, parse_overrides, read_pairs, validate
from .datagen import generate_from_config
from .elbo import AdamState, TrainConfig, TrainState, init_theta, train
from .errors import CheckpointError, ConfigError, DimensionError, TrainingError
from .evaluation import evaluate
from .experiments import build_problem

log = logging.getLogger("phidvae")


def _add_common(p):
    p.add_argument("--config", help="flat key = value file or JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="set a config key (a unique dotted suffix is enough); repeatable")
    p.add_argument("--out", required=True, help="output directory")


def _parser():
    ap = argparse.ArgumentParser(prog="phidvae", description=__doc__.splitlines()[0])
    ap.add_argument("-q", "--quiet", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)
    g = sub.add_parser("gen", help="generate an episode")
    g.add_argument("--experiment", choices=("lorenz", "advection", "kdv"))
    _add_common(g)
    t = sub.add_parser("train", help="train on an episode")
    t.add_argument("--episode", required=True)
    t.add_argument("--resume", action="store_true", help="continue from the newest checkpoint in --out")
    _add_common(t)
    e = sub.add_parser("eval", help="evaluate a checkpoint on an episode")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episode", required=True)
    _add_common(e)
    return ap


def _run_config(base, args):
    """``base`` config updated by --config, --override and --seed."""
    cfg = dict(base)
    if args.config:
        pairs = read_pairs(args.config)
        pairs.pop("experiment", None)
        apply_pairs(cfg, pairs)
    apply_pairs(cfg, parse_overrides(args.override))
    if args.seed is not None:
        cfg["seed"] = args.seed
    return validate(cfg)


def _config_from_episode(episode):
    exp = episode.gen_config["experiment"]
    base = build_config(exp)
    known = {k: v for k, v in episode.gen_config.items() if k in base}
    base.update(known)
    return base


def _check_episode(cfg, episode, problem):
    bad = []
    if episode.N != cfg["data.N"]:
        bad.append("data.N")
    if episode.frame_shape is not None:
        if "data.frame_width" in cfg and episode.frame_shape != (cfg["data.frame_height"], cfg["data.frame_width"]):
            bad.extend(["data.frame_width", "data.frame_height"])
    if episode.u0 is not None and episode.u0.shape[0] != problem.model.n:
        bad.append("model.n_u")
    if bad:
        raise ConfigError(f"episode and configuration disagree on {bad}", bad)


def train_config(cfg):
    return TrainConfig(
        lr=cfg["train.lr"], lr_lambda=cfg["train.lr_lambda"] or None, epochs=cfg["train.epochs"],
        M_lambda=cfg["train.M_lambda"], M_x=cfg["train.M_x"], seed=cfg["seed"],
        clip_norm=cfg["train.clip_norm"], kl=cfg["train.kl"], max_redraws=cfg["train.max_redraws"],
        checkpoint_every=cfg["train.checkpoint_every"], record_wallclock=cfg["train.record_wallclock"],
    )


def cmd_gen(args):
    cfg = build_config(args.experiment, args.config, args.override, args.seed)
    episode = generate_from_config(cfg)
    out = storage.save_episode(episode, args.out)
    log.info("wrote episode %s: y %s", out, episode.y.shape)
    return 0


def _latest_checkpoint(out):
    ckpts = sorted((out / "checkpoints").glob("epoch_*.ckpt"))
    return ckpts[-1] if ckpts else None


def cmd_train(args):
    episode = storage.load_episode(args.episode)
    cfg = _run_config(_config_from_episode(episode), args)
    try:
        problem, lat = build_problem(cfg, episode.u0, episode.n_y)
    except DimensionError as exc:
        raise ConfigError(f"episode and configuration disagree: {exc}", ["model.n_u"]) from exc
    _check_episode(cfg, episode, problem)
    tc = train_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dumps(cfg))
    free = list(problem.params.free_names)

    state = None
    if args.resume and _latest_checkpoint(out) is not None:
        header, theta, adam, rng = storage.load_checkpoint(_latest_checkpoint(out))
        storage.check_layout(theta, init_theta(problem, np.random.default_rng(0)).shapes)
        state = TrainState(theta, adam or AdamState.zeros_like(theta), rng, header["epoch"], header["metrics"])
        log.info("resuming at epoch %d", state.epoch)

    def save(st, path):
        storage.save_checkpoint(path, st.theta, st.adam, st.rng, st.epoch, st.metrics, cfg,
                                extra={"free": free, "episode": str(args.episode)})

    def on_checkpoint(st):
        save(st, out / "checkpoints" / f"epoch_{st.epoch:05d}.ckpt")

    def progress(row):
        log.info("epoch %d elbo %.6g nmse %.4g mu %s sigma %s", row["epoch"], row["elbo"], row["nmse"],
                 np.round(row["mu_lambda"], 4), np.round(row["sigma_lambda"], 4))

    try:
        state = train(episode.y, problem, tc, state=state, target=episode.clean_y,
                      on_checkpoint=on_checkpoint, log=progress)
    except TrainingError as exc:
        snap = exc.snapshot or {}
        if snap.get("metrics"):
            storage.write_csv(out / "metrics.csv", storage.metrics_header(free), storage.metrics_rows(snap["metrics"]))
        raise
    save(state, out / "final.ckpt")
    storage.write_csv(out / "metrics.csv", storage.metrics_header(free), storage.metrics_rows(state.metrics))
    truth = [problem.params.values[problem.params.names.index(n)] for n in free]
    report.plot_metrics(state.metrics, free, out / "metrics.png", truth=truth)
    log.info("wrote %s", out / "metrics.csv")
    return 0


def cmd_eval(args):
    episode = storage.load_episode(args.episode)
    header, theta, _, _ = storage.load_checkpoint(args.checkpoint)
    if not header.get("config"):
        raise CheckpointError(f"{args.checkpoint}: no configuration recorded")
    cfg = _run_config(header["config"], args)
    problem, lat = build_problem(cfg, episode.u0, episode.n_y)
    storage.check_layout(theta, init_theta(problem, np.random.default_rng(0)).shapes)
    _check_episode(cfg, episode, problem)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dumps(cfg))
    rng = np.random.default_rng([cfg["seed"], 1])
    res = evaluate(theta, problem, episode.y, rng, cfg["eval.M_x"], cfg["eval.M_lambda"],
                   target=episode.clean_y, truth_u=episode.truth_u)
    storage.write_csv(out / "eval.csv", ["frame", "nmse"],
                      [[n + 1, float(v)] for n, v in enumerate(res.frame_nmse)])
    summary = [["nmse", res.nmse]]
    if res.rmse_filter is not None:
        summary += [["rmse_posterior_mean", res.rmse_filter], ["rmse_prior_only", res.rmse_prior]]
    storage.write_csv(out / "summary.csv", ["metric", "value"], summary)
    n_u = res.post_mean.shape[1]
    head = [f"mean_{j}" for j in range(n_u)] + [f"sd_{j}" for j in range(n_u)]
    storage.write_csv(out / "posterior.csv", head,
                      [[float(v) for v in np.concatenate([m, s])] for m, s in zip(res.post_mean, res.post_sd)])
    t = np.arange(1, episode.N + 1) * cfg["model.dt"] * cfg["data.obs_every"]
    if episode.frame_shape:
        rdir = out / "reconstructions"
        rdir.mkdir(exist_ok=True)
        for n, row in enumerate(res.y_hat):
            storage.write_pgm(rdir / f"recon_{n + 1:04d}.pgm", row.reshape(episode.frame_shape))
        report.plot_frames(episode.y, res.y_hat, episode.frame_shape, out / "frames.png")
        dom = cfg["model.domain"]
        report.plot_field(res.post_mean, out / "posterior_mean.png", extent=(t[0], t[-1], dom[0], dom[1]))
        report.plot_posterior(t, res.post_mean, res.post_sd, out / "posterior.png", truth=episode.truth_u,
                              components=(n_u // 4, n_u // 2))
    else:
        report.plot_posterior(t, res.post_mean, res.post_sd, out / "posterior.png", truth=episode.truth_u,
                              components=range(n_u), labels=["u1", "u2", "u3"][:n_u])
    log.info("nmse %.6g", res.nmse)
    if res.rmse_filter is not None:
        log.info("posterior mean RMSE %.4g, prior-only RMSE %.4g", res.rmse_filter, res.rmse_prior)
    return 0


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    cmd = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval}[args.cmd]
    try:
        return cmd(args)
    except (ConfigError, CheckpointError, TrainingError, FileNotFoundError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
