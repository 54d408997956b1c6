"""Accuracy curves and per-class sample grids from finished run directories."""
from __future__ import annotations

import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .models import ConditionalGenerator, load_checkpoint  # noqa: E402

log = logging.getLogger(__name__)


def read_metrics(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def plot_curves(series: dict[str, list[dict]], out_path: str | Path, title: str = "") -> Path | None:
    """One accuracy-vs-iteration line per labelled series; empty series are skipped."""
    fig, ax = plt.subplots(figsize=(6, 4))
    drawn = 0
    for label, entries in sorted(series.items()):
        pts = [(e["iter"], e["acc"]) for e in entries if e.get("acc") is not None]
        if not pts:
            log.warning("no evaluations for %s; skipped", label)
            continue
        it, acc = zip(*pts)
        ax.plot(it, [100 * a for a in acc], marker="o" if len(pts) == 1 else None, ms=3, label=label)
        drawn += 1
    if not drawn:
        plt.close(fig)
        return None
    ax.set_xlabel("server iteration")
    ax.set_ylabel("test accuracy (%)")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


@torch.no_grad()
def sample_grid(gen: ConditionalGenerator, per_class: int = 8, seed: int = 0) -> np.ndarray:
    """(C, per_class, H, W, channels) array in [0, 1]; row c is conditioned on label c."""
    gen.eval()
    c = gen.num_classes
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(c * per_class, gen.noise_dim, generator=g)
    y = torch.arange(c).repeat_interleave(per_class)
    imgs = (gen(z, y) + 1) / 2
    imgs = imgs.clamp(0, 1).permute(0, 2, 3, 1).numpy()
    return imgs.reshape(c, per_class, *imgs.shape[1:])


def plot_generators(gens: dict[str, ConditionalGenerator], out_path: str | Path, per_class: int = 8,
                    seed: int = 0) -> Path:
    """Side-by-side class x sample grids, one panel per generator."""
    names = sorted(gens)
    fig, axes = plt.subplots(1, len(names), figsize=(2.2 + 0.45 * per_class * len(names), 0.5 * next(iter(gens.values())).num_classes + 1),
                             squeeze=False)
    for ax, name in zip(axes[0], names):
        grid = sample_grid(gens[name], per_class, seed)
        c, n, h, w, ch = grid.shape
        mosaic = grid.transpose(0, 2, 1, 3, 4).reshape(c * h, n * w, ch)
        ax.imshow(mosaic.squeeze(-1) if ch == 1 else mosaic, cmap="gray" if ch == 1 else None, vmin=0, vmax=1)
        ax.set_title(name)
        ax.set_yticks([h * (k + 0.5) for k in range(c)], [str(k) for k in range(c)], fontsize=6)
        ax.set_xticks([])
        ax.set_ylabel("class")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def emit_plots(root: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Write accuracy curves and generator grids for every run found below ``root``."""
    root = Path(root)
    out = Path(out_dir) if out_dir else root / "plots"
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    series: dict[str, list[dict]] = {}
    for metrics in sorted(root.rglob("metrics.jsonl")):
        run_dir = metrics.parent
        label = str(run_dir.relative_to(root)) if run_dir != root else run_dir.name
        series[label] = read_metrics(metrics)
        gen_files = sorted(run_dir.glob("G*.npz"))
        if gen_files:
            gens = {p.stem: load_checkpoint(p) for p in gen_files}
            slug = label.replace("/", "_")
            written.append(plot_generators(gens, out / f"samples_{slug}.png"))
    curve = plot_curves(series, out / "accuracy.png", title=str(root.name))
    if curve is not None:
        written.insert(0, curve)
    else:
        log.warning("no metrics found below %s", root)
    return written
