"""Evaluation tables and figures."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyPredictionError, EmptyTruthError
from .labels import REGIONS, labels_to_regions
from .metrics import dsc, hd95
from .volume_io import atomic_write_bytes

COLUMNS = ("case_id", "region", "dsc", "hd95", "dsc_degenerate", "hd95_status")

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


@dataclass
class MetricRow:
    case_id: str
    region: str
    dsc: float
    hd95: float
    dsc_degenerate: bool
    hd95_status: str


def evaluate_case(case_id: str, pred_labels: np.ndarray, true_labels: np.ndarray, spacing=1.0,
                  surface_only: bool = False) -> list[MetricRow]:
    rows = []
    for region, p, t in zip(REGIONS, labels_to_regions(pred_labels), labels_to_regions(true_labels)):
        d = dsc(p, t)
        status, h = "ok", math.nan
        if not p.any() and not t.any():
            status = "both-empty"
        else:
            try:
                h = hd95(p, t, spacing, surface_only=surface_only)
            except EmptyPredictionError:
                status = "empty-prediction"
            except EmptyTruthError:
                status = "empty-truth"
        rows.append(MetricRow(case_id, region, d.value, h, d.degenerate, status))
    return rows


def _stat(a: np.ndarray, fn) -> float:
    return float(fn(a)) if a.size else math.nan


def _sd(a: np.ndarray) -> float:
    return float(np.std(a, ddof=1)) if a.size > 1 else 0.0


def summarize(rows: Sequence[MetricRow]) -> list[MetricRow]:
    """Mean and standard deviation per region over non-degenerate cases."""
    out = []
    for region in REGIONS:
        sel = [r for r in rows if r.region == region]
        d = np.array([r.dsc for r in sel if not r.dsc_degenerate], dtype=float)
        h = np.array([r.hd95 for r in sel if r.hd95_status == "ok"], dtype=float)

        out.append(MetricRow("mean", region, _stat(d, np.mean), _stat(h, np.mean), False, f"n={h.size}"))
        out.append(MetricRow("sd", region, _stat(d, _sd), _stat(h, _sd), False, f"n={h.size}"))
    return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def render_tsv(rows: Sequence[MetricRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerow(COLUMNS)
    for r in list(rows) + summarize(rows):
        writer.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
    return buf.getvalue()


def read_tsv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def plot_metrics(rows: Sequence[MetricRow], out_dir: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    with plt.rc_context(STYLE):
        for metric, ylabel, fname in (("dsc", "Dice", "dsc.png"), ("hd95", "HD95 (mm)", "hd95.png")):
            fig, ax = plt.subplots(figsize=(4.0, 3.0))
            data = []
            for region in REGIONS:
                vals = [getattr(r, metric) for r in rows if r.region == region]
                data.append([v for v in vals if not math.isnan(v)])
            ax.boxplot([d if d else [math.nan] for d in data], showmeans=True)
            ax.set_xticks(range(1, len(REGIONS) + 1), REGIONS)
            for i, d in enumerate(data, start=1):
                ax.plot(np.full(len(d), i) + np.linspace(-0.08, 0.08, len(d)), d, ".", color="0.4", ms=3)
            ax.set_ylabel(ylabel)
            if metric == "dsc":
                ax.set_ylim(-0.02, 1.02)
            path = out_dir / fname
            fig.savefig(path)
            plt.close(fig)
            paths.append(path)
    return paths


def write_report(rows: Sequence[MetricRow], out_dir: str | Path, figures: bool = True) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out / "report.tsv", render_tsv(rows).encode())
    written = {"report": out / "report.tsv"}
    if figures:
        for p in plot_metrics(rows, out):
            written[p.stem] = p
    return written
