"""Static report figures: loss curves and metric bars."""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dataset_io import write_ppm  # noqa: E402

LOSS_KEYS = ("L_rgb", "L_corr", "L_lang", "L_ce", "L_total")
METRIC_KEYS = ("psnr", "ssim", "miou", "fwiou", "acc", "ate_rmse")


def _figure_to_array(fig):
    fig.canvas.draw()
    rgba = np.asarray(fig.canvas.buffer_rgba())
    return rgba[..., :3].astype(np.float64) / 255.0


def plot_report(loss_rows, report, out_dir):
    """Write loss curves and metric bars as SVG and PPM; returns the written paths.

    ``loss_rows`` is a list of dicts with an ``iter`` key and loss columns;
    ``report`` a dict of metric name to value (may be empty).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    fig, ax = plt.subplots(figsize=(6, 4), dpi=80)
    if loss_rows:
        it = np.array([float(r["iter"]) for r in loss_rows])
        order = np.argsort(it, kind="stable")
        for k in LOSS_KEYS:
            if k in loss_rows[0]:
                ax.plot(it[order], np.array([float(r[k]) for r in loss_rows])[order], label=k)
        ax.legend(loc="upper right", fontsize=8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title("training losses")
    paths += _save(fig, out / "losses")

    fig, ax = plt.subplots(figsize=(6, 4), dpi=80)
    names = [k for k in METRIC_KEYS if report and k in report and np.isfinite(float(report[k]))]
    vals = [float(report[k]) for k in names]
    ax.bar(np.arange(len(names)), vals, color="tab:blue")
    ax.set_xticks(np.arange(len(names)))
    ax.set_xticklabels(names)
    for i, v in enumerate(vals):
        ax.text(i, v, f"{v:.3g}", ha="center", va="bottom", fontsize=8)
    ax.set_title("evaluation")
    paths += _save(fig, out / "metrics")
    return paths


def _save(fig, stem):
    svg = stem.with_suffix(".svg")
    ppm = stem.with_suffix(".ppm")
    fig.savefig(svg, format="svg")
    write_ppm(ppm, _figure_to_array(fig))
    plt.close(fig)
    return [svg, ppm]
