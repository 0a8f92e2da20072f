"""Plot emission and latent dumps; both are derived from metrics files and checkpoints."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from flap.experiment.metrics import read_metrics, success_curves  # noqa: E402


def emit_plots(metric_paths, out_dir) -> list[Path]:
    """Success rate vs. epoch, one curve per method with +-1 std shading; PNG and SVG."""
    metric_paths = [Path(p) for p in metric_paths]
    if not metric_paths:
        raise ValueError("emit_plots needs at least one metrics file")
    rows = [r for p in metric_paths for r in read_metrics(p)]
    curves = success_curves(rows)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in sorted(curves):
        c = curves[method]
        ax.plot(c["epoch"], c["mean"], label=method)
        ax.fill_between(c["epoch"], c["mean"] - c["std"], c["mean"] + c["std"], alpha=0.2)
    ax.set_xlabel("fine-tuning epoch")
    ax.set_ylabel("success rate")
    ax.set_ylim(-0.05, 1.05)
    ax.legend()
    fig.tight_layout()
    paths = [out_dir / "success_rate.png", out_dir / "success_rate.svg"]
    for p in paths:
        fig.savefig(p)
    plt.close(fig)
    return paths


def dump_latents(agent, observations: np.ndarray, path, labels=None) -> Path:
    """Write encoder means (one row per observation) for external embedding tools."""
    z = agent.latent(np.asarray(observations, dtype=np.float32)).numpy()
    header = ",".join([f"z{i}" for i in range(z.shape[1])] + (["label"] if labels is not None else []))
    cols = [z] if labels is None else [z, np.asarray(labels, dtype=float)[:, None]]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.hstack(cols), delimiter=",", header=header, comments="", fmt="%.8g")
    return path
