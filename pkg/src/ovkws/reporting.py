"""Report rendering: the per-variant accuracy table, detection error
trade-off curves, angle-resolved detection accuracy, and the impulse
response MFCC-distance analysis, each as a delimited data file with a
matching figure.
"""

from __future__ import annotations

import math
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import spatial
from .evaluation import EvalReport, MetricSummary

_METRICS = (
    ("kws_own", "KWS acc. (own)"),
    ("kws_overall", "KWS acc. (overall)"),
    ("detection_own", "Detection acc. (own)"),
    ("detection_external", "Detection acc. (external)"),
    ("detection_overall", "Detection acc. (overall)"),
)


def _cell(summary: MetricSummary | None) -> str:
    if summary is None:
        return "-"
    if summary.half_width is None:
        return f"{summary.mean:.4f}"
    return f"{summary.mean:.4f}±{summary.half_width:.4f}"


def write_accuracy_table(out_dir, reports: dict[str, EvalReport]) -> list[str]:
    """Accuracy summary across variants, as TSV (means and half-widths in
    separate columns) and as an aligned text table."""
    tsv_path = os.path.join(out_dir, "accuracy_table.tsv")
    txt_path = os.path.join(out_dir, "accuracy_table.txt")
    with open(tsv_path, "w", encoding="utf-8") as fh:
        header = ["variant"]
        for key, _ in _METRICS:
            header += [f"{key}_mean", f"{key}_half_width"]
        fh.write("\t".join(header) + "\n")
        for variant, report in reports.items():
            row = [variant]
            for key, _ in _METRICS:
                s = getattr(report, key)
                if s is None:
                    row += ["nan", "nan"]
                else:
                    hw = math.nan if s.half_width is None else s.half_width
                    row += [f"{s.mean:.6f}", f"{hw:.6f}"]
            fh.write("\t".join(row) + "\n")

    names = ["variant"] + [label for _, label in _METRICS]
    rows = [[variant] + [_cell(getattr(report, key)) for key, _ in _METRICS]
            for variant, report in reports.items()]
    widths = [max(len(str(r[i])) for r in [names] + rows) for i in range(len(names))]
    with open(txt_path, "w", encoding="utf-8") as fh:
        for r in [names] + rows:
            fh.write("  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip() + "\n")
    return [tsv_path, txt_path]


def plot_det_curves(out_dir, reports: dict[str, EvalReport]) -> str | None:
    curves = {v: r for v, r in reports.items() if r.det_far is not None}
    if not curves:
        return None
    fig, ax = plt.subplots(figsize=(5, 5))
    for variant, report in curves.items():
        ax.plot(report.det_far * 100, report.det_frr * 100, label=variant)
    ax.set_xlabel("False acceptance rate [%]")
    ax.set_ylabel("False rejection rate [%]")
    ax.set_title("Own-voice detection error trade-off")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = os.path.join(out_dir, "det_curves.png")
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_angle_accuracy(out_dir, reports: dict[str, EvalReport]) -> str | None:
    curves = {v: r for v, r in reports.items() if r.angle_accuracy is not None}
    if not curves:
        return None
    fig, ax = plt.subplots(figsize=(5.5, 5.5), subplot_kw={"projection": "polar"})
    theta = np.radians(spatial.angle_grid())
    for variant, report in curves.items():
        # close the loop for a contiguous polar trace
        ax.plot(np.append(theta, theta[0]),
                np.append(report.angle_accuracy, report.angle_accuracy[0]),
                marker=".", label=variant)
    ax.set_title("Normalized external detection accuracy by angle")
    ax.set_theta_zero_location("N")
    ax.legend(loc="lower left", bbox_to_anchor=(1.0, 0.0))
    fig.tight_layout()
    path = os.path.join(out_dir, "angle_accuracy.png")
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def write_ir_distance(out_dir, distances: np.ndarray) -> list[str]:
    """Per-angle MFCC distance between the own-voice and external paths."""
    angles = spatial.angle_grid()
    tsv_path = os.path.join(out_dir, "ir_mfcc_distance.tsv")
    with open(tsv_path, "w", encoding="utf-8") as fh:
        fh.write("angle_deg\tmfcc_distance\n")
        for a, d in zip(angles, distances):
            fh.write(f"{a:.10g}\t{d:.10g}\n")
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(angles, distances, marker=".")
    ax.set_xlabel("Source angle [deg]")
    ax.set_ylabel("MFCC Euclidean distance")
    ax.set_title("Own-voice vs. external transfer function distance")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    png_path = os.path.join(out_dir, "ir_mfcc_distance.png")
    fig.savefig(png_path, dpi=150)
    plt.close(fig)
    return [tsv_path, png_path]


def render_report(out_dir, reports: dict[str, EvalReport],
                  ir_distances: np.ndarray | None = None) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = write_accuracy_table(out_dir, reports)
    for path in (plot_det_curves(out_dir, reports),
                 plot_angle_accuracy(out_dir, reports)):
        if path:
            written.append(path)
    if ir_distances is not None:
        written.extend(write_ir_distance(out_dir, ir_distances))
    return written
