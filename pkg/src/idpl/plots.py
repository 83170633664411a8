"""Static figures for a run directory: losses, per-round mIoU, class IoU,
segmentation triptychs and hyperparameter sweeps.

Every figure goes through the Agg backend, so output depends only on the inputs.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from idpl.datamodel import IGNORE, ValidationError  # noqa: E402
from idpl.synthdata import load_label_png  # noqa: E402

# Cityscapes-style colours; unlabeled pixels are black and no class uses black.
BASE_PALETTE = (
    (128, 64, 128), (70, 70, 70), (107, 142, 35), (0, 0, 142), (153, 153, 153),
    (220, 220, 0), (244, 35, 232), (102, 102, 156), (190, 153, 153), (250, 170, 30),
    (152, 251, 152), (70, 130, 180), (220, 20, 60), (255, 0, 0), (0, 0, 70),
    (0, 60, 100), (0, 80, 100), (0, 0, 230), (119, 11, 32),
)
IGNORE_COLOR = (0, 0, 0)

FIGURE_FILES = {
    "losses": "loss_curves.png",
    "miou": "miou_by_round.png",
    "class_iou": "class_iou.png",
    "triptych": "triptych.png",
    "alpha": "alpha_curve.png",
    "surface": "beta_lambda_surface.png",
}


def palette(num_classes: int) -> np.ndarray:
    """(C, 3) uint8 colours, fixed for a given C and pairwise distinct."""
    colors = list(BASE_PALETTE[:num_classes])
    seen = set(colors) | {IGNORE_COLOR}
    rng = np.random.default_rng(num_classes)
    while len(colors) < num_classes:
        c = tuple(int(v) for v in rng.integers(0, 256, 3))
        if c not in seen:
            seen.add(c)
            colors.append(c)
    return np.asarray(colors, dtype=np.uint8)


def colorize(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (3,), dtype=np.uint8)
    pal = palette(num_classes)
    valid = labels != IGNORE
    if valid.any() and labels[valid].max() >= num_classes:
        raise ValidationError("label id outside the palette")
    out[valid] = pal[labels[valid]]
    return out


def decolorize(rgb, num_classes: int) -> np.ndarray:
    """Inverse of ``colorize``; colours outside the palette are an error."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    pal = palette(num_classes)
    key = lambda a: (a[..., 0].astype(np.int64) << 16) | (a[..., 1].astype(np.int64) << 8) | a[..., 2]
    codes = key(rgb)
    lookup = {int(k): i for i, k in enumerate(key(pal))}
    lookup[0] = IGNORE
    out = np.full(codes.shape, IGNORE, dtype=np.uint8)
    for code in np.unique(codes):
        if int(code) not in lookup:
            raise ValidationError(f"colour {int(code):06x} is not in the palette")
        out[codes == code] = lookup[int(code)]
    return out


# --- readers ----------------------------------------------------------------------


def read_ablation_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def surface_grid(rows: list[dict], x: str = "beta", y: str = "lambda", z: str = "miou"):
    """(xs, ys, Z) with Z[i, j] = value at (ys[i], xs[j]); missing cells are NaN."""
    xs = sorted({r[x] for r in rows})
    ys = sorted({r[y] for r in rows})
    Z = np.full((len(ys), len(xs)), np.nan)
    for r in rows:
        Z[ys.index(r[y]), xs.index(r[x])] = r[z]
    return np.asarray(xs), np.asarray(ys), Z


# --- figures ------------------------------------------------------------------------


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_losses(history: dict, path: Path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for key, series in sorted(history.get("pretrain", {}).items()):
        axes[0].plot(series, label=key)
    axes[0].set_title("pre-training")
    for key, series in sorted(history.get("idpl", {}).items()):
        vals = [np.nan if v is None else v for v in series]
        axes[1].plot(vals, label=key)
    axes[1].set_title("intra-domain rounds")
    for ax in axes:
        ax.set_xlabel("logged step")
        if ax.lines:
            ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_miou_by_round(metrics: dict, rounds: list[dict], path: Path) -> Path:
    xs = list(range(len(rounds) + 1))
    ys = [metrics["pt"]["miou"]] + [r["miou"] for r in rounds]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(xs, [100 * v for v in ys], marker="o")
    ax.set_xticks(xs, ["PT"] + [f"r{i + 1}" for i in range(len(rounds))])
    ax.set_ylabel("target mIoU (%)")
    fig.tight_layout()
    return _save(fig, path)


def plot_class_iou(metrics: dict, path: Path) -> Path:
    names = metrics["final"]["classes"]
    pt = [np.nan if v is None else 100 * v for v in metrics["pt"]["iou"]]
    fin = [np.nan if v is None else 100 * v for v in metrics["final"]["iou"]]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(x - 0.2, pt, 0.4, label="PT")
    ax.bar(x + 0.2, fin, 0.4, label="final")
    ax.set_xticks(x, names, rotation=30, fontsize=8)
    ax.set_ylabel("IoU (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_triptychs(samples_dir: Path, num_classes: int, path: Path) -> Path:
    ids = sorted({p.name.rsplit("_", 1)[0] for p in samples_dir.glob("*_pred.png")})
    if not ids:
        raise ValidationError(f"no prediction samples in {samples_dir}")
    cols = ("image", "pred", "pseudo", "truth")
    fig, axes = plt.subplots(len(ids), len(cols), figsize=(2 * len(cols), 2 * len(ids)),
                             squeeze=False)
    for i, iid in enumerate(ids):
        for j, kind in enumerate(cols):
            ax = axes[i, j]
            f = samples_dir / f"{iid}_{kind}.png"
            if kind == "image":
                ax.imshow(plt.imread(f))
            else:
                ax.imshow(colorize(load_label_png(f), num_classes), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(kind, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def plot_alpha_curve(rows: list[dict], path: Path) -> Path:
    rows = sorted(rows, key=lambda r: r["alpha"])
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot([r["alpha"] for r in rows], [100 * r["miou"] for r in rows], marker="o")
    ax.set_xlabel("alpha")
    ax.set_ylabel("target mIoU (%)")
    fig.tight_layout()
    return _save(fig, path)


def plot_surface(rows: list[dict], path: Path):
    """Heat map of mIoU over (beta, lambda); returns (path, plotted grid)."""
    xs, ys, Z = surface_grid(rows)
    fig, ax = plt.subplots(figsize=(4.8, 4))
    im = ax.imshow(100 * Z, origin="lower", cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(xs)), [f"{v:g}" for v in xs])
    ax.set_yticks(range(len(ys)), [f"{v:g}" for v in ys])
    ax.set_xlabel("beta")
    ax.set_ylabel("lambda")
    for i in range(len(ys)):
        for j in range(len(xs)):
            if not np.isnan(Z[i, j]):
                ax.text(j, i, f"{100 * Z[i, j]:.1f}", ha="center", va="center", fontsize=7,
                        color="w")
    fig.colorbar(im, ax=ax, label="mIoU (%)")
    fig.tight_layout()
    return _save(fig, path), Z


def emit_plots(run_dir) -> list[Path]:
    """Render every figure the run directory has inputs for, into ``run_dir/plots``."""
    run = Path(run_dir)
    if not run.is_dir() or not any(run.iterdir()):
        raise ValidationError(f"run directory {run} is missing or empty")
    out = run / "plots"
    out.mkdir(exist_ok=True)
    written = []
    metrics_path, rounds_path = run / "metrics.json", run / "rounds.json"
    if metrics_path.exists() and rounds_path.exists():
        metrics = json.loads(metrics_path.read_text())
        rounds = json.loads(rounds_path.read_text())
        history = json.loads((run / "history.json").read_text()) if (run / "history.json").exists() else {}
        written.append(plot_losses(history, out / FIGURE_FILES["losses"]))
        written.append(plot_miou_by_round(metrics, rounds, out / FIGURE_FILES["miou"]))
        written.append(plot_class_iou(metrics, out / FIGURE_FILES["class_iou"]))
        if (run / "samples").is_dir():
            C = len(metrics["final"]["classes"])
            written.append(plot_triptychs(run / "samples", C, out / FIGURE_FILES["triptych"]))
    if (run / "ablate_alpha.csv").exists():
        written.append(plot_alpha_curve(read_ablation_csv(run / "ablate_alpha.csv"),
                                        out / FIGURE_FILES["alpha"]))
    if (run / "ablate_beta_lambda.csv").exists():
        path, _ = plot_surface(read_ablation_csv(run / "ablate_beta_lambda.csv"),
                               out / FIGURE_FILES["surface"])
        written.append(path)
    if not written:
        raise ValidationError(f"nothing to plot in {run}")
    return written
