"""Benchmark report generation: per-clip metric CSVs with companion figures."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import clipio, metrics

REPORT_COLUMNS = (
    "clip_id",
    "mad",
    "mse",
    "grad",
    "conn",
    "dtssd",
    "core_mad",
    "core_mse",
    "core_dtssd",
    "error",
)
AGGREGATE_ID = "ALL"
METRIC_COLUMNS = REPORT_COLUMNS[1:-1]


@dataclass
class ClipReport:
    clip_id: str
    values: dict[str, float] | None = None
    error: str | None = None


def evaluate_clip(
    entry: clipio.ClipEntry, root: Path, predictions_dir: Path, core_kernel: int
) -> ClipReport:
    """Compute the full metric row for one clip, catching per-clip failures."""
    try:
        clip_dir = root / entry.clip_id
        if entry.data_kind == "matting" and entry.alpha_dir:
            gt = clipio.load_clip_alpha(clip_dir).alpha
        else:
            gt = clipio.load_clip_mask(clip_dir).mask
        seg = clipio.load_clip_mask(clip_dir).mask
        pred = clipio.load_clip_alpha(Path(predictions_dir) / entry.clip_id).alpha
        if pred.shape != gt.shape:
            raise ValueError(
                f"prediction shape {tuple(pred.shape)} does not match GT {tuple(gt.shape)}"
            )
        per_frame_grad = [metrics.grad_metric(pred[t], gt[t]) for t in range(len(pred))]
        per_frame_conn = [metrics.conn_metric(pred[t], gt[t]) for t in range(len(pred))]
        core = metrics.core_region_metrics(pred, seg, core_kernel)
        values = {
            "mad": metrics.mad(pred, gt),
            "mse": metrics.mse(pred, gt),
            "grad": float(np.mean(per_frame_grad)),
            "conn": float(np.mean(per_frame_conn)),
            "dtssd": metrics.dtssd(pred, gt),
            "core_mad": core.mad,
            "core_mse": core.mse,
            "core_dtssd": core.dtssd,
        }
        return ClipReport(clip_id=entry.clip_id, values=values)
    except Exception as exc:
        return ClipReport(clip_id=entry.clip_id, error=f"{type(exc).__name__}: {exc}")


def benchmark_report(
    manifest_path: Path,
    predictions_dir: Path,
    out_csv: Path,
    core_kernel: int = 21,
    split: str | None = "test",
    jobs: int = 1,
    figures: bool = True,
) -> tuple[list[ClipReport], bool]:
    """Evaluate every manifest clip against its prediction.

    Writes a CSV with per-clip rows plus an unweighted-mean aggregate row
    tagged ALL, and (optionally) a companion bar-chart figure. Returns the
    rows and whether every clip evaluated cleanly.
    """
    manifest = clipio.read_manifest(manifest_path)
    root = clipio.manifest_root(manifest_path)
    entries = manifest.by_split(split) if split else manifest.clips
    if not entries:
        raise ValueError(f"manifest has no clips in split {split!r}")

    def run(entry):
        return evaluate_clip(entry, root, predictions_dir, core_kernel)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(run, entries))
    else:
        reports = [run(e) for e in entries]

    ok = [r for r in reports if r.error is None]
    all_ok = len(ok) == len(reports)
    aggregate = None
    if ok:
        aggregate = {
            col: float(np.mean([r.values[col] for r in ok])) for col in METRIC_COLUMNS
        }

    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for r in reports:
            row = {"clip_id": r.clip_id, "error": r.error or ""}
            row.update({c: repr(r.values[c]) if r.values else "" for c in METRIC_COLUMNS})
            writer.writerow(row)
        if aggregate is not None:
            row = {"clip_id": AGGREGATE_ID, "error": ""}
            row.update({c: repr(aggregate[c]) for c in METRIC_COLUMNS})
            writer.writerow(row)

    if figures and ok:
        render_report_figure(reports, aggregate, out_csv.with_suffix(".png"))
    return reports, all_ok


def render_report_figure(
    reports: list[ClipReport], aggregate: dict[str, float] | None, out_png: Path
) -> None:
    """Bar chart per metric across clips, aggregate highlighted."""
    ok = [r for r in reports if r.error is None]
    if not ok:
        return
    fig, axes = plt.subplots(2, 4, figsize=(16, 7))
    names = [r.clip_id for r in ok]
    for ax, col in zip(axes.ravel(), METRIC_COLUMNS):
        vals = [r.values[col] for r in ok]
        ax.bar(range(len(vals)), vals, color="#4878a8")
        if aggregate is not None:
            ax.axhline(aggregate[col], color="#c44e52", lw=1.2, label="mean")
            ax.legend(fontsize=7)
        ax.set_title(col)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=60, fontsize=6, ha="right")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def render_loss_curves(csv_path: Path, out_png: Path) -> None:
    """Plot per-component loss curves from a training loss CSV."""
    iterations: list[int] = []
    series: dict[str, list[tuple[int, float]]] = {}
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            it = int(row["iteration"])
            iterations.append(it)
            for col in (
                "loss_total",
                "loss_matting",
                "loss_segmentation",
                "loss_core_supervision",
                "loss_change_mask",
            ):
                if row.get(col):
                    series.setdefault(col, []).append((it, float(row[col])))
    if not iterations:
        return
    fig, ax = plt.subplots(figsize=(9, 5))
    for name, points in series.items():
        xs, ys = zip(*points)
        ax.plot(xs, ys, lw=0.9, label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
