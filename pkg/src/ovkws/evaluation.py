"""Measurement protocol: own-voice-gated keyword decisions, subset and
overall accuracies, detection-error-tradeoff sweeps, angle-resolved
detection accuracy, seed-level confidence intervals, and the impulse
response MFCC-distance analysis.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import features as frontend
from . import spatial
from .corpus import ROLE_OWN, UNKNOWN_INDEX, WORKING_RATE
from .model import KwsResNet, ModelOutput, predict_batch
from .training import variant_columns

DEFAULT_THRESHOLD = 0.5
DET_THRESHOLDS = 1001


@dataclass
class Decision:
    triggered: bool
    keyword: int | None
    ovprob: float | None
    own: bool
    label: int
    angle_deg: float | None = None

    def __post_init__(self):
        if self.triggered != (self.keyword is not None):
            raise ValueError("keyword must be present exactly when triggered")


def gate_decision(output: ModelOutput, threshold: float | None = DEFAULT_THRESHOLD,
                  *, own: bool, label: int,
                  angle_deg: float | None = None) -> Decision:
    """Gated decision: the spotter fires only when the own-voice probability
    strictly exceeds the threshold (a missing head or threshold leaves the
    gate open) and the posterior argmax is an actual keyword. Exact argmax
    ties resolve to the lowest class index."""
    posterior = np.asarray(output.keyword_posterior)
    top = int(np.argmax(posterior))
    gate = True
    if output.ownvoice_prob is not None and threshold is not None:
        gate = output.ownvoice_prob > threshold
    triggered = bool(gate and top != UNKNOWN_INDEX)
    return Decision(triggered=triggered, keyword=top if triggered else None,
                    ovprob=output.ownvoice_prob, own=own, label=label,
                    angle_deg=angle_deg)


def kws_correct(d: Decision) -> bool:
    """Case (a): the wearer said a keyword and it triggered with the right
    class. Case (b): anything else (the wearer's non-keyword speech, or any
    external speech) must not trigger."""
    if d.own and d.label != UNKNOWN_INDEX:
        return d.triggered and d.keyword == d.label
    return not d.triggered


def overall_kws_accuracy(decisions: list[Decision]) -> float:
    if not decisions:
        raise ValueError("cannot score an empty decision list")
    return sum(kws_correct(d) for d in decisions) / len(decisions)


def detection_accuracy(decisions: list[Decision], subset: str = "overall",
                       threshold: float = DEFAULT_THRESHOLD) -> float:
    if subset == "own":
        pool = [d for d in decisions if d.own]
    elif subset == "external":
        pool = [d for d in decisions if not d.own]
    elif subset == "overall":
        pool = list(decisions)
    else:
        raise ValueError(f"unknown subset {subset!r}")
    if not pool:
        raise ValueError(f"no decisions in subset {subset!r}")
    if any(d.ovprob is None for d in pool):
        raise ValueError("detection accuracy needs own-voice probabilities")
    return sum((d.ovprob > threshold) == d.own for d in pool) / len(pool)


def det_curve(scores, own_flags,
              num_thresholds: int = DET_THRESHOLDS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sweep the acceptance threshold over [0, 1]. Returns (thresholds,
    false-acceptance rate, false-rejection rate): the fraction of external
    utterances accepted as own voice and of own utterances rejected."""
    scores = np.asarray(scores, dtype=np.float64)
    own_flags = np.asarray(own_flags, dtype=bool)
    if scores.shape != own_flags.shape or scores.ndim != 1:
        raise ValueError("scores and role flags must be aligned 1-D arrays")
    if own_flags.all() or not own_flags.any():
        raise ValueError("the sweep needs both own and external scores")
    thresholds = np.linspace(0.0, 1.0, num_thresholds)
    accepted = scores[None, :] > thresholds[:, None]
    far = accepted[:, ~own_flags].mean(axis=1)
    frr = (~accepted[:, own_flags]).mean(axis=1)
    return thresholds, far, frr


def angle_breakdown(decisions: list[Decision],
                    threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Detection accuracy of external utterances per source angle,
    normalized by the best bin. Bins without data hold NaN."""
    grid = spatial.angle_grid()
    hits = np.zeros(len(grid))
    counts = np.zeros(len(grid))
    for d in decisions:
        if d.own:
            continue
        if d.angle_deg is None:
            raise ValueError("external decision without an angle")
        if d.ovprob is None:
            raise ValueError("angle breakdown needs own-voice probabilities")
        bin_index = int(round(d.angle_deg / spatial.ANGLE_STEP_DEG)) % len(grid)
        counts[bin_index] += 1
        hits[bin_index] += (d.ovprob > threshold) == d.own
    with np.errstate(invalid="ignore"):
        acc = hits / counts
    best = np.nanmax(acc) if counts.any() else float("nan")
    if not counts.any():
        raise ValueError("no external decisions to bin")
    return acc / best if best > 0 else acc


def confidence_interval(values) -> tuple[float, float]:
    """Mean and 95% half-width over per-seed metrics (Student-t, the sample
    standard deviation with n-1 degrees of freedom)."""
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if n < 2:
        raise ValueError("confidence interval needs at least two values")
    s = values.std(ddof=1)
    half = float(stats.t.ppf(0.975, n - 1) * s / math.sqrt(n))
    return float(values.mean()), half


def ir_mfcc_distance(ovtf: spatial.ImpulseResponsePair, hrtfs: dict,
                     probe_signals,
                     config: frontend.FrontendConfig | None = None) -> np.ndarray:
    """Per-angle mean Euclidean distance between the raw MFCC matrices of
    OVTF-rendered and HRTF-rendered copies of each probe signal."""
    config = config or frontend.FrontendConfig()
    grid = spatial.angle_grid()
    missing = [a for a in grid if float(a) not in hrtfs]
    if missing:
        raise ValueError(f"impulse response bank misses angles: {missing}")

    def mfcc_stack(ir):
        rendered = [spatial.render_spatial(np.asarray(p, dtype=np.float64),
                                           WORKING_RATE, ir,
                                           working_rate=WORKING_RATE)
                    for p in probe_signals]
        return [np.concatenate([frontend.mfcc(ch, config).values for ch in r],
                               axis=1) for r in rendered]

    ref = mfcc_stack(ovtf)
    out = np.zeros(len(grid))
    for i, angle in enumerate(grid):
        other = mfcc_stack(hrtfs[float(angle)])
        out[i] = float(np.mean([np.linalg.norm(a - b)
                                for a, b in zip(ref, other)]))
    return out


# -- report assembly ---------------------------------------------------------

@dataclass
class MetricSummary:
    mean: float
    half_width: float | None  # None when fewer than two seeds were pooled
    per_seed: list[float]


def summarize(per_seed) -> MetricSummary:
    per_seed = [float(v) for v in per_seed]
    if len(per_seed) >= 2:
        mean, half = confidence_interval(per_seed)
    else:
        mean, half = per_seed[0], None
    return MetricSummary(mean=mean, half_width=half, per_seed=per_seed)


@dataclass
class EvalReport:
    variant: str
    threshold: float
    num_seeds: int
    kws_overall: MetricSummary
    kws_own: MetricSummary
    detection_overall: MetricSummary | None = None
    detection_own: MetricSummary | None = None
    detection_external: MetricSummary | None = None
    det_thresholds: np.ndarray | None = None
    det_far: np.ndarray | None = None
    det_frr: np.ndarray | None = None
    angle_accuracy: np.ndarray | None = None


def decisions_for_model(model: KwsResNet, features: np.ndarray,
                        labels, own, angles,
                        threshold: float = DEFAULT_THRESHOLD,
                        batch_size: int = 256) -> list[Decision]:
    decisions = []
    for lo in range(0, len(features), batch_size):
        posterior, ovprob = predict_batch(model, features[lo:lo + batch_size])
        for i in range(len(posterior)):
            j = lo + i
            output = ModelOutput(
                keyword_posterior=posterior[i],
                ownvoice_prob=None if ovprob is None else float(ovprob[i]))
            decisions.append(gate_decision(output, threshold, own=bool(own[j]),
                                           label=int(labels[j]),
                                           angle_deg=angles[j]))
    return decisions


def evaluate_models(models: list[KwsResNet], features: np.ndarray,
                    labels, own, angles, variant: str,
                    threshold: float = DEFAULT_THRESHOLD,
                    num_thresholds: int = DET_THRESHOLDS) -> EvalReport:
    """Score one variant's seed models on a (n, T, 80) clean feature stack.
    Accuracies are summarized across seeds; the DET sweep and the angle
    breakdown pool decisions from every seed."""
    if not models:
        raise ValueError("no models to evaluate")
    own = np.asarray(own, dtype=bool)
    cols = variant_columns(variant)
    view = np.ascontiguousarray(features[:, :, cols])

    pooled: list[Decision] = []
    kws_overall, kws_own = [], []
    det_overall, det_own, det_external = [], [], []
    multitask = models[0].spec.multitask
    for model in models:
        decisions = decisions_for_model(model, view, labels, own, angles,
                                        threshold)
        pooled.extend(decisions)
        kws_overall.append(overall_kws_accuracy(decisions))
        kws_own.append(overall_kws_accuracy([d for d in decisions if d.own]))
        if multitask:
            det_overall.append(detection_accuracy(decisions, "overall", threshold))
            det_own.append(detection_accuracy(decisions, "own", threshold))
            det_external.append(detection_accuracy(decisions, "external", threshold))

    report = EvalReport(variant=variant, threshold=threshold,
                        num_seeds=len(models),
                        kws_overall=summarize(kws_overall),
                        kws_own=summarize(kws_own))
    if multitask:
        report.detection_overall = summarize(det_overall)
        report.detection_own = summarize(det_own)
        report.detection_external = summarize(det_external)
        scores = np.array([d.ovprob for d in pooled])
        flags = np.array([d.own for d in pooled])
        report.det_thresholds, report.det_far, report.det_frr = det_curve(
            scores, flags, num_thresholds)
        report.angle_accuracy = angle_breakdown(pooled, threshold)
    return report


# -- serialization -----------------------------------------------------------

def _summary_dict(s: MetricSummary | None):
    if s is None:
        return None
    return {"mean": s.mean, "half_width": s.half_width, "per_seed": s.per_seed}


def _summary_from(d) -> MetricSummary | None:
    if d is None:
        return None
    return MetricSummary(mean=d["mean"], half_width=d["half_width"],
                         per_seed=list(d["per_seed"]))


def _columns(path, header: list[str], *columns) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in zip(*columns):
            fh.write("\t".join(f"{v:.10g}" for v in row) + "\n")


def write_report(out_dir, report: EvalReport) -> None:
    """EvalReport on disk: a canonical JSON summary plus plot-ready columnar
    files for the DET sweep and the angle breakdown."""
    os.makedirs(out_dir, exist_ok=True)
    doc = {
        "format": "eval-report-v1",
        "variant": report.variant,
        "threshold": report.threshold,
        "num_seeds": report.num_seeds,
        "kws_overall": _summary_dict(report.kws_overall),
        "kws_own": _summary_dict(report.kws_own),
        "detection_overall": _summary_dict(report.detection_overall),
        "detection_own": _summary_dict(report.detection_own),
        "detection_external": _summary_dict(report.detection_external),
        "angle_accuracy": None if report.angle_accuracy is None else
            [None if math.isnan(v) else v for v in report.angle_accuracy.tolist()],
    }
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    if report.det_thresholds is not None:
        _columns(os.path.join(out_dir, "det_curve.tsv"),
                 ["threshold", "far", "frr"],
                 report.det_thresholds, report.det_far, report.det_frr)
    if report.angle_accuracy is not None:
        _columns(os.path.join(out_dir, "angle_accuracy.tsv"),
                 ["angle_deg", "normalized_accuracy"],
                 spatial.angle_grid(), report.angle_accuracy)


def read_report(out_dir) -> EvalReport:
    with open(os.path.join(out_dir, "report.json"), "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "eval-report-v1":
        raise ValueError(f"{out_dir}: not an evaluation report")
    report = EvalReport(
        variant=doc["variant"], threshold=doc["threshold"],
        num_seeds=doc["num_seeds"],
        kws_overall=_summary_from(doc["kws_overall"]),
        kws_own=_summary_from(doc["kws_own"]),
        detection_overall=_summary_from(doc["detection_overall"]),
        detection_own=_summary_from(doc["detection_own"]),
        detection_external=_summary_from(doc["detection_external"]))
    if doc["angle_accuracy"] is not None:
        report.angle_accuracy = np.array(
            [math.nan if v is None else v for v in doc["angle_accuracy"]])
    det_path = os.path.join(out_dir, "det_curve.tsv")
    if os.path.exists(det_path):
        data = np.loadtxt(det_path, skiprows=1)
        report.det_thresholds, report.det_far, report.det_frr = data.T
    return report
