"""Command-line pipeline: forge -> featurize -> train -> evaluate -> report.

Every stage writes into a content-addressed directory under the work root
(stage name plus a hash of the configuration keys it consumes, chained
through its upstream stage), echoes the effective configuration, and records
provenance. Downstream stages refuse to run when the upstream directory for
the current configuration is absent.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import config as cfg
from . import corpus, evaluation, reporting, spatial, synthetic, training
from . import features as frontend
from .model import load_checkpoint
from .training import VARIANTS


class StageError(RuntimeError):
    pass


def _stage_dir(config: cfg.RunConfig, stage: str) -> str:
    hashes = cfg.stage_hashes(config)
    key = hashes["evaluate"] if stage == "report" else hashes[stage]
    return os.path.join(config.paths.work_dir, f"{stage}-{key}")


def _write_stage_files(stage_dir: str, config: cfg.RunConfig, stage: str,
                       extra: dict | None = None) -> None:
    os.makedirs(stage_dir, exist_ok=True)
    record = {"stage": stage, "hashes": cfg.stage_hashes(config)}
    record.update(extra or {})
    with open(os.path.join(stage_dir, "provenance.json"), "w", encoding="utf-8") as fh:
        json.dump(record, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    with open(os.path.join(stage_dir, "config_echo.cfg"), "w", encoding="utf-8") as fh:
        fh.write(cfg.serialize_config(config))


def _require_stage(config: cfg.RunConfig, stage: str) -> tuple[str, dict]:
    stage_dir = _stage_dir(config, stage)
    marker = os.path.join(stage_dir, "provenance.json")
    if not os.path.exists(marker):
        raise StageError(
            f"no '{stage}' output exists for this configuration "
            f"(expected {stage_dir}); run `ovkws {stage}` first")
    with open(marker, "r", encoding="utf-8") as fh:
        return stage_dir, json.load(fh)


# -- forge --------------------------------------------------------------------

def cmd_forge(config: cfg.RunConfig, workers: int = 1) -> str:
    out_dir = _stage_dir(config, "forge")
    os.makedirs(out_dir, exist_ok=True)
    if config.corpus.synthetic:
        source_root = os.path.join(out_dir, "source")
        synthetic.generate_corpus(source_root,
                                  num_speakers=config.corpus.synthetic_speakers,
                                  seed=config.seed)
    else:
        source_root = config.paths.source_corpus
        if not source_root:
            raise StageError("no source corpus configured; set paths.source_corpus "
                             "or pass --synthetic")
        if not os.path.isdir(source_root):
            raise StageError(f"source corpus directory not found: {source_root}")

    bank = spatial.synth_ir_bank(config.geometry)
    spatial.write_ir_bank(os.path.join(out_dir, "ir_bank.bin"), bank)
    files = corpus.scan_source_corpus(source_root)
    manifest = corpus.build_manifest(files, seed=config.seed,
                                     fractions=config.corpus.split_fractions,
                                     own_fraction=config.corpus.own_fraction,
                                     ir_bank=bank)
    corpus.write_manifest(os.path.join(out_dir, "manifest.jsonl"), manifest)
    corpus.render_manifest(manifest, source_root, out_dir, bank, workers=workers)
    _write_stage_files(out_dir, config, "forge", {"source_root": source_root})
    return out_dir


# -- featurize ----------------------------------------------------------------

_FEAT_STATE: dict = {}


def _feat_init(forge_dir, out_dir, frontend_config):
    _FEAT_STATE.update(forge_dir=forge_dir, out_dir=out_dir,
                       frontend=frontend_config)


def _featurize_entry(entry: corpus.ManifestEntry) -> None:
    samples, rate = corpus.load_wav(
        os.path.join(_FEAT_STATE["forge_dir"], entry.audio_path))
    feats = frontend.extract_features(samples, _FEAT_STATE["frontend"])
    path = os.path.join(_FEAT_STATE["out_dir"], entry.split, f"{entry.id}.feat")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    frontend.write_features(path, feats, _FEAT_STATE["frontend"])


def cmd_featurize(config: cfg.RunConfig, workers: int = 1) -> str:
    forge_dir, _ = _require_stage(config, "forge")
    manifest = corpus.read_manifest(os.path.join(forge_dir, "manifest.jsonl"))
    out_dir = _stage_dir(config, "featurize")
    _feat_init(forge_dir, out_dir, config.frontend)
    if workers <= 1:
        for entry in manifest.entries:
            _featurize_entry(entry)
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_feat_init,
                                 initargs=(forge_dir, out_dir, config.frontend)) as pool:
            for _ in pool.map(_featurize_entry, manifest.entries, chunksize=16):
                pass
    _write_stage_files(out_dir, config, "featurize")
    return out_dir


def _load_split_features(feat_dir: str, entries) -> np.ndarray:
    mats = []
    for entry in entries:
        feats, _ = frontend.read_features(
            os.path.join(feat_dir, entry.split, f"{entry.id}.feat"))
        mats.append(feats.values)
    return np.stack(mats)


def _split_meta(entries):
    labels = np.array([e.label_class for e in entries], dtype=np.int64)
    own = np.array([e.role == corpus.ROLE_OWN for e in entries], dtype=bool)
    angles = [e.angle_deg for e in entries]
    return labels, own, angles


# -- train --------------------------------------------------------------------

def _load_train_items(manifest, source_root, ovtf, hrtfs):
    items = []
    for entry in manifest.by_split("train"):
        samples, rate = corpus.load_wav(os.path.join(source_root, entry.source_path))
        if rate != corpus.WORKING_RATE:
            raise StageError(f"{entry.source_path}: expected {corpus.WORKING_RATE} Hz")
        items.append(training.TrainItem(
            source=corpus.pad_or_trim(samples),
            ir=corpus.entry_ir(entry, ovtf, hrtfs),
            label=entry.label_class,
            own=entry.role == corpus.ROLE_OWN))
    return items


def cmd_train(config: cfg.RunConfig, variant: str = "dual") -> str:
    if variant not in VARIANTS:
        raise StageError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    forge_dir, forge_meta = _require_stage(config, "forge")
    feat_dir, _ = _require_stage(config, "featurize")
    manifest = corpus.read_manifest(os.path.join(forge_dir, "manifest.jsonl"))
    bank = spatial.read_ir_bank(os.path.join(forge_dir, "ir_bank.bin"))
    ovtf, hrtfs = spatial.bank_by_angle(bank)
    source_root = forge_meta["source_root"]

    val_entries = manifest.by_split("validation")
    val_labels, val_own, _ = _split_meta(val_entries)
    data = training.TrainingData(
        train_items=_load_train_items(manifest, source_root, ovtf, hrtfs),
        val_features=_load_split_features(feat_dir, val_entries),
        val_labels=val_labels, val_own=val_own,
        noise_bank=corpus.load_noise_bank(source_root),
        level_scale=spatial.bank_safety_scale(bank),
        frontend=config.frontend, data_seed=config.seed)

    stage_root = _stage_dir(config, "train")
    out_dir = os.path.join(stage_root, variant)
    os.makedirs(out_dir, exist_ok=True)
    summaries = []
    for i in range(config.num_model_seeds):
        run_config = dataclasses.replace(config.train, seed=config.train.seed + i)
        summary = training.train(
            config.model, run_config, data,
            checkpoint_path=os.path.join(out_dir, f"seed-{i}.ckpt"),
            metrics_path=os.path.join(out_dir, f"metrics-seed-{i}.jsonl"),
            variant=variant)
        summaries.append({"seed_index": i, "best_epoch": summary["best_epoch"],
                          "best_val_metric": summary["best_val_metric"]})
        print(f"trained {variant} seed {i}: best epoch "
              f"{summary['best_epoch']} val metric {summary['best_val_metric']:.4f}")
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump({"variant": variant, "runs": summaries}, fh, sort_keys=True)
        fh.write("\n")
    _write_stage_files(stage_root, config, "train")
    return out_dir


# -- evaluate -----------------------------------------------------------------

def cmd_evaluate(config: cfg.RunConfig, variant: str = "dual") -> str:
    if variant not in VARIANTS:
        raise StageError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    forge_dir, _ = _require_stage(config, "forge")
    feat_dir, _ = _require_stage(config, "featurize")
    train_root, _ = _require_stage(config, "train")
    variant_dir = os.path.join(train_root, variant)
    checkpoints = sorted(f for f in os.listdir(variant_dir)
                         if f.endswith(".ckpt")) if os.path.isdir(variant_dir) else []
    if not checkpoints:
        raise StageError(f"no checkpoints for variant {variant!r} under "
                         f"{variant_dir}; run `ovkws train --variant {variant}` first")

    manifest = corpus.read_manifest(os.path.join(forge_dir, "manifest.jsonl"))
    test_entries = manifest.by_split("test")
    feats = _load_split_features(feat_dir, test_entries)
    labels, own, angles = _split_meta(test_entries)
    models = [load_checkpoint(os.path.join(variant_dir, name))[0]
              for name in checkpoints]
    report = evaluation.evaluate_models(
        models, feats, labels, own, angles, variant=variant,
        threshold=config.eval.threshold,
        num_thresholds=config.eval.num_thresholds)

    stage_root = _stage_dir(config, "evaluate")
    out_dir = os.path.join(stage_root, variant)
    evaluation.write_report(out_dir, report)
    _write_stage_files(stage_root, config, "evaluate")
    print(f"evaluated {variant}: overall KWS {report.kws_overall.mean:.4f}")
    return out_dir


# -- report -------------------------------------------------------------------

def cmd_report(config: cfg.RunConfig) -> str:
    forge_dir, forge_meta = _require_stage(config, "forge")
    eval_root, _ = _require_stage(config, "evaluate")
    reports = {}
    for variant in VARIANTS:
        report_json = os.path.join(eval_root, variant, "report.json")
        if os.path.exists(report_json):
            reports[variant] = evaluation.read_report(os.path.join(eval_root, variant))
    if not reports:
        raise StageError(f"no evaluation reports under {eval_root}; "
                         "run `ovkws evaluate` first")

    bank = spatial.read_ir_bank(os.path.join(forge_dir, "ir_bank.bin"))
    ovtf, hrtfs = spatial.bank_by_angle(bank)
    manifest = corpus.read_manifest(os.path.join(forge_dir, "manifest.jsonl"))
    probes = []
    for entry in manifest.by_split("test"):
        if entry.role != corpus.ROLE_OWN:
            continue
        samples, _ = corpus.load_wav(
            os.path.join(forge_meta["source_root"], entry.source_path))
        probes.append(corpus.pad_or_trim(samples))
        if len(probes) >= config.eval.num_probe_signals:
            break
    distances = evaluation.ir_mfcc_distance(ovtf, hrtfs, probes,
                                            config.frontend) if probes else None

    out_dir = _stage_dir(config, "report")
    os.makedirs(out_dir, exist_ok=True)
    written = reporting.render_report(out_dir, reports, distances)
    for variant in reports:
        for name in ("det_curve.tsv", "angle_accuracy.tsv"):
            src = os.path.join(eval_root, variant, name)
            if os.path.exists(src):
                dst = os.path.join(out_dir, name.replace(".tsv", f"_{variant}.tsv"))
                shutil.copyfile(src, dst)
                written.append(dst)
    _write_stage_files(out_dir, config, "report")
    for path in written:
        print(path)
    return out_dir


# -- argument handling ----------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ovkws",
        description="Keyword spotting with own-voice detection on simulated "
                    "two-microphone hearing-aid audio")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, variant=False, workers=False, synth=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--work-dir", help="override the artifact root")
        if variant:
            p.add_argument("--variant", default="dual", choices=VARIANTS,
                           help="model input/head configuration")
        if workers:
            p.add_argument("--workers", type=int, default=1,
                           help="parallel workers (1 keeps byte-determinism)")
        if synth:
            p.add_argument("--synthetic", action="store_true",
                           help="generate the built-in deterministic corpus")
        return p

    add("forge", "build the corpus: splits, roles, rendering, manifest",
        workers=True, synth=True)
    add("featurize", "extract and cache feature matrices", workers=True)
    add("train", "train one variant across model seeds", variant=True)
    add("evaluate", "score checkpoints and write the evaluation report",
        variant=True)
    add("report", "render accuracy tables and figures from evaluations")
    return parser


def _load_effective_config(args) -> cfg.RunConfig:
    config = cfg.load_config(args.config) if args.config else cfg.RunConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.work_dir:
        config.paths = dataclasses.replace(config.paths, work_dir=args.work_dir)
    if getattr(args, "synthetic", False):
        config.corpus = dataclasses.replace(config.corpus, synthetic=True)
    return config


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    config = _load_effective_config(args)
    try:
        if args.command == "forge":
            cmd_forge(config, workers=args.workers)
        elif args.command == "featurize":
            cmd_featurize(config, workers=args.workers)
        elif args.command == "train":
            cmd_train(config, variant=args.variant)
        elif args.command == "evaluate":
            cmd_evaluate(config, variant=args.variant)
        elif args.command == "report":
            cmd_report(config)
    except StageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
