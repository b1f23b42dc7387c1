"""Figures written next to the CSV outputs (matplotlib, non-interactive)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_metrics(metrics, free_names, path, truth=None):
    epochs = [r["epoch"] for r in metrics]
    n_par = len(free_names)
    fig, axes = plt.subplots(1, 2 + n_par, figsize=(4 * (2 + n_par), 3.2))
    axes[0].plot(epochs, [r["elbo"] for r in metrics])
    axes[0].set_title("ELBO")
    axes[1].plot(epochs, [r["nmse"] for r in metrics])
    axes[1].set_yscale("log")
    axes[1].set_title("normalised MSE")
    for j, name in enumerate(free_names):
        ax = axes[2 + j]
        mu = np.array([r["mu_lambda"][j] for r in metrics])
        sd = np.array([r["sigma_lambda"][j] for r in metrics])
        ax.plot(epochs, mu)
        ax.fill_between(epochs, mu - 2 * sd, mu + 2 * sd, alpha=0.3)
        if truth is not None:
            ax.axhline(truth[j], color="k", ls="--", lw=1)
        ax.set_title(name)
    for ax in axes:
        ax.set_xlabel("epoch")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_posterior(t, mean, sd, path, truth=None, components=(0,), labels=None):
    """Posterior mean +- 2 sd over time for selected state components."""
    comps = list(components)
    fig, axes = plt.subplots(len(comps), 1, figsize=(7, 2.4 * len(comps)), squeeze=False)
    for ax, k in zip(axes[:, 0], comps):
        ax.plot(t, mean[:, k], label="posterior mean")
        ax.fill_between(t, mean[:, k] - 2 * sd[:, k], mean[:, k] + 2 * sd[:, k], alpha=0.3)
        if truth is not None:
            ax.plot(t, truth[:, k], "k--", lw=1, label="truth")
        ax.set_ylabel(labels[k] if labels else f"u[{k}]")
    axes[0, 0].legend(loc="upper right", fontsize=8)
    axes[-1, 0].set_xlabel("t")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_field(mean, path, extent=None, title="posterior mean"):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    im = ax.imshow(mean.T, aspect="auto", origin="lower", extent=extent)
    fig.colorbar(im, ax=ax)
    ax.set_xlabel("t")
    ax.set_ylabel("s")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_frames(Y, Y_hat, frame_shape, path, indices=None):
    N = Y.shape[0]
    idx = list(indices) if indices is not None else list(np.linspace(0, N - 1, 5).astype(int))
    fig, axes = plt.subplots(2, len(idx), figsize=(2 * len(idx), 4), squeeze=False)
    for j, n in enumerate(idx):
        axes[0, j].imshow(Y[n].reshape(frame_shape), cmap="gray", vmin=0, vmax=1)
        axes[1, j].imshow(Y_hat[n].reshape(frame_shape), cmap="gray", vmin=0, vmax=1)
        axes[0, j].set_title(f"n={n + 1}")
        for ax in axes[:, j]:
            ax.set_xticks([])
            ax.set_yticks([])
    axes[0, 0].set_ylabel("data")
    axes[1, 0].set_ylabel("reconstruction")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
