"""Command-line experiment driver.

Subcommands cover the full pipeline: synthesize desk-scale data, train the
translation stage, convert volumes across domains, train classifiers
(conventional, evidential, or co-teaching), filter-and-retrain, evaluate,
and sweep deployment thresholds.  Every run writes a manifest (config
hash, seeds, data fingerprints, split) sufficient to replay byte-identically;
``--seed`` overrides the config seed and ``EVIMRI_WORKDIR`` anchors
relative working directories.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .data import (
    load_volumes,
    make_splits,
    patches_from_volumes,
    save_volumes,
    synth_two_domain_dataset,
    write_sidecar_csv,
)
from .models import load_classifier, load_translation_bundle, save_classifier
from .training import (
    convert_domain,
    evaluate_model,
    partition_patches,
    run_filter_retrain,
    run_translation_training,
    train_classifier,
    train_coteaching,
    write_loss_trace,
    write_run_manifest,
)


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    cfg.validate_paths()
    return cfg


def _load_records(cfg: ExperimentConfig):
    records = []
    for path in cfg.data.paths:
        records.extend(load_volumes(path))
    if not records:
        raise SystemExit("no volumes found in the configured data paths")
    return records


def _classification_parts(cfg: ExperimentConfig):
    records = _load_records(cfg)
    manifest = make_splits(records, "classification", cfg.seed)
    patches = patches_from_volumes(records, cfg.data.variant, augment=cfg.data.augment)
    return manifest, partition_patches(patches, manifest)


def cmd_synth_data(args) -> int:
    domains = {"both": ("source_3T", "target_1p5T"), "source": ("source_3T",), "target": ("target_1p5T",)}[args.domains]
    ds = synth_two_domain_dataset(
        args.patients,
        seed=args.seed,
        size=tuple(args.size),
        domains=domains,
        noise_fraction=args.noise_fraction,
        lesion_margin=args.lesion_margin,
        shift_strength=args.shift_strength,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_volumes(out / "volumes.h5", ds.records)
    write_sidecar_csv(out / "sidecar.csv", ds.records)
    truth = {
        "true_labels": ds.true_labels,
        "flipped_patients": sorted(ds.flipped_patients),
        "cluster_patients": sorted(ds.cluster_patients),
        "seed": args.seed,
    }
    with open(out / "truth.json", "w") as f:
        json.dump(truth, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {len(ds.records)} volumes for {args.patients} patients to {out}")
    return 0


def cmd_translate_train(args) -> int:
    cfg = _load_cfg(args)
    out_dir = cfg.resolved_workdir() / "translate"
    result = run_translation_training(cfg, _load_records(cfg), out_dir=out_dir)
    final_val = result.val_curve[-1][1] if result.val_curve else float("nan")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"steps: {len(result.loss_trace)}  final_val_loss: {final_val:.6f}  early_stop: {result.stopped_early}")
    return 0


def cmd_convert(args) -> int:
    cfg = _load_cfg(args)
    bundle = load_translation_bundle(args.checkpoint)
    modality = args.modality
    manifest_path = Path(args.checkpoint).parent / "manifest.json"
    if modality is None and manifest_path.exists():
        with open(manifest_path) as f:
            modality = json.load(f).get("modality")
    if modality is None:
        raise SystemExit("pass --modality (no manifest next to the checkpoint)")
    src_domain = "source_3T" if args.direction == "s_to_t" else "target_1p5T"
    volumes = [r for r in _load_records(cfg) if r.modality == modality and r.domain == src_domain]
    if not volumes:
        raise SystemExit(f"no {modality} volumes in the {src_domain} domain")
    translated = convert_domain(volumes, bundle, seed=cfg.seed, modality=modality, direction=args.direction)
    save_volumes(args.out, translated)
    print(f"translated {len(translated)} volumes -> {args.out}")
    return 0


def cmd_classify_train(args) -> int:
    cfg = _load_cfg(args)
    out_dir = cfg.resolved_workdir() / "classify"
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest, parts = _classification_parts(cfg)
    if cfg.classifier.variant == "mpmri_coteaching":
        result = train_coteaching(cfg, parts["train"])
        save_classifier(out_dir / "classifier.pt", result.model)
        write_loss_trace(out_dir / "losses.csv", result.loss_trace, ["epoch", "loss_a", "loss_b"])
    else:
        result = train_classifier(cfg, parts["train"], parts["val"])
        save_classifier(out_dir / "classifier.pt", result.model)
        write_loss_trace(out_dir / "losses.csv", result.loss_trace, ["step", "loss"])
        with open(out_dir / "epoch_log.json", "w") as f:
            json.dump(result.epoch_log, f, indent=2, sort_keys=True)
            f.write("\n")
        if result.uncertainty_table is not None:
            result.uncertainty_table.to_csv(out_dir / "uncertainty_table.csv")
    write_run_manifest(
        out_dir,
        cfg,
        split=manifest,
        extra={
            "stage": "classification",
            "trained_patch_ids": sorted(p.patch_id for p in parts["train"]),
            "class_weights": list(cfg.classifier.class_weights),
        },
    )
    print(f"checkpoint: {out_dir / 'classifier.pt'}")
    print(f"train patches: {len(parts['train'])}  val patches: {len(parts['val'])}")
    return 0


def cmd_filter_retrain(args) -> int:
    cfg = _load_cfg(args)
    from .filtering import UncertaintyTable

    table = UncertaintyTable.from_csv(args.table)
    out_dir = cfg.resolved_workdir() / "filter_retrain"
    manifest, parts = _classification_parts(cfg)
    prior = load_classifier(args.prior) if args.prior else None
    result, removed = run_filter_retrain(cfg, table, parts["train"], parts["val"], prior_model=prior, out_dir=out_dir)
    save_classifier(out_dir / "classifier.pt", result.model)
    write_loss_trace(out_dir / "losses.csv", result.loss_trace, ["step", "loss"])
    if result.uncertainty_table is not None:
        result.uncertainty_table.to_csv(out_dir / "uncertainty_table.csv")
    write_run_manifest(
        out_dir,
        cfg,
        split=manifest,
        extra={
            "stage": "filter_retrain",
            "filter_method": cfg.filtering.method,
            "filter_rate": cfg.filtering.rate,
            "filter_removed_ids": sorted(removed),
            "trained_patch_ids": sorted(p.patch_id for p in parts["train"] if p.patch_id not in removed),
        },
    )
    print(f"removed {len(removed)} ids via {cfg.filtering.method} filtering at {cfg.filtering.rate}%")
    print(f"checkpoint: {out_dir / 'classifier.pt'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    model = load_classifier(args.checkpoint)
    out_dir = cfg.resolved_workdir() / "evaluate"
    manifest, parts = _classification_parts(cfg)
    ladder = tuple(args.ladder) if args.ladder else cfg.filtering.ladder
    filter_info = {"filter_method": cfg.filtering.method, "filter_rate": cfg.filtering.rate}
    result = evaluate_model(
        model,
        parts["test"],
        seed=cfg.seed,
        ladder=ladder,
        out_dir=out_dir,
        filter_info=filter_info,
    )
    write_run_manifest(out_dir, cfg, split=manifest, extra={"stage": "evaluate"})
    print(f"report: {out_dir / 'report.json'}")
    patient = result.patient_report
    if patient is not None:
        auc = "undefined" if patient.auc is None else f"{patient.auc:.3f}"
        print(f"patient-level: acc={patient.accuracy:.3f} auc={auc} ece={patient.ece:.3f}")
    return 0


def cmd_sweep_threshold(args) -> int:
    cfg = _load_cfg(args)
    model = load_classifier(args.checkpoint)
    if model.spec.head != "evidence":
        raise SystemExit("threshold sweep needs an evidence-head checkpoint")
    out_dir = cfg.resolved_workdir() / "sweep"
    ladder = tuple(args.ladder) if args.ladder else cfg.filtering.ladder
    _, parts = _classification_parts(cfg)
    result = evaluate_model(model, parts["test"], seed=cfg.seed, ladder=ladder, out_dir=out_dir)
    print(f"sweep: {out_dir / 'sweep.csv'}")
    for entry in result.sweep_entries:
        acc = "undefined" if entry.report is None else f"{entry.report.accuracy:.3f}"
        print(f"tau={entry.tau:.2f} retained={entry.n_retained} acc={acc}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evimri", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic two-domain corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-fraction", type=float, default=0.0)
    p.add_argument("--lesion-margin", type=float, default=0.8)
    p.add_argument("--shift-strength", type=float, default=1.0)
    p.add_argument("--domains", choices=("both", "source", "target"), default="both")
    p.add_argument("--size", type=int, nargs=3, default=(64, 64, 8), metavar=("H", "W", "C"))
    p.set_defaults(func=cmd_synth_data)

    for name, fn, extras in (
        ("translate-train", cmd_translate_train, ()),
        ("convert", cmd_convert, ("checkpoint", "out", "modality", "direction")),
        ("classify-train", cmd_classify_train, ()),
        ("filter-retrain", cmd_filter_retrain, ("table", "prior")),
        ("evaluate", cmd_evaluate, ("checkpoint", "ladder")),
        ("sweep-threshold", cmd_sweep_threshold, ("checkpoint", "ladder")),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if "checkpoint" in extras:
            p.add_argument("--checkpoint", required=True)
        if "out" in extras:
            p.add_argument("--out", required=True)
        if "modality" in extras:
            p.add_argument("--modality", default=None)
        if "direction" in extras:
            p.add_argument("--direction", choices=("s_to_t", "t_to_s"), default="s_to_t")
        if "table" in extras:
            p.add_argument("--table", required=True)
        if "prior" in extras:
            p.add_argument("--prior", default=None, help="checkpoint to fine-tune when retrain_from_scratch is off")
        if "ladder" in extras:
            p.add_argument("--ladder", type=float, nargs="+", default=None)
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
