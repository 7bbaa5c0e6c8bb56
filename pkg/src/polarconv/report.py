"""Figure rendering for run artifacts (convergence curves, attack summary)."""

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read_metrics(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        rows = list(reader)
    step = [int(r["step"]) for r in rows]
    return step, rows


def training_curves(csv_paths, labels, out_png):
    """Loss and accuracy curves for one or more metrics.csv files."""
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    for path, label in zip(csv_paths, labels):
        step, rows = _read_metrics(path)
        ax_loss.plot(step, [float(r["train_loss"]) for r in rows],
                     label=f"{label} train", alpha=0.7)
        ax_loss.plot(step, [float(r["eval_loss"]) for r in rows],
                     label=f"{label} eval", linestyle="--")
        ax_acc.plot(step, [float(r["eval_acc"]) for r in rows], label=f"{label} eval")
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=8)
    ax_acc.set_xlabel("step")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1)
    ax_acc.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def attack_bars(results: dict, out_png):
    """Bar chart of clean / FGSM / BIM accuracy."""
    keys = ["clean", "fgsm", "bim"]
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.bar(keys, [results[k] for k in keys], color=["#4c72b0", "#dd8452", "#c44e52"])
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    for i, k in enumerate(keys):
        ax.text(i, results[k] + 0.01, f"{results[k]:.3f}", ha="center", fontsize=9)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def export_combined_csv(run_dirs, out_csv, out_png=None):
    """Merge metrics.csv files from several run directories into one CSV
    (a `run` column is prepended) and optionally render a comparison figure."""
    run_dirs = [Path(d) for d in run_dirs]
    paths = [d / "metrics.csv" for d in run_dirs]
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"no metrics.csv under {p.parent}")
    per_run = []
    columns = []
    for d, p in zip(run_dirs, paths):
        with open(p, newline="") as f:
            rows = list(csv.DictReader(f))
        per_run.append((d.name, rows))
        for col in rows[0].keys():
            if col not in columns:
                columns.append(col)
    lines = [",".join(["run"] + columns)]
    for name, rows in per_run:
        for row in rows:
            lines.append(",".join([name] + [row.get(c, "") for c in columns]))
    Path(out_csv).write_text("\n".join(lines) + "\n")
    if out_png:
        training_curves(paths, [d.name for d in run_dirs], out_png)
    return Path(out_csv)
