"""Command-line entry points: synthesize a cohort, preprocess volumes, train
the two-stage and baseline models, evaluate checkpoints, compare them side by
side, and self-verify the numeric core.

Exit codes are a stable contract: 0 success, 1 validation error (bad input,
bad config, missing file), 2 runtime or numeric error.  Every report embeds
the resolved configuration and a content hash of the dataset manifest.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from lungroute import data, metrics, nncore, pipeline
from lungroute.data import DISEASES, FEMALE, MALE, NUM_CLASSES, Dataset, Sample
from lungroute.errors import LungRouteError, ValidationError
from lungroute.preprocess import PreprocessConfig, featurize, normalize, resize, trim_slices
from lungroute.pipeline import ScheduleSpec, TrainConfig

MINORITY_CLASS = "squamous_cell_carcinoma"
KIND_LABELS = {"two_stage": "two-stage", "baseline": "baseline"}

# The desk profile finishes a full run in well under two minutes on a
# laptop-class machine; the full profile is the slow high-budget recipe
# (100 epochs, batch 8, peak learning rate 1e-4).  Both evaluate 8x32x32
# resampled volumes.
PROFILES = {
    "desk": {"epochs": 30, "batch_size": 16, "target_dims": (8, 32, 32),
             "peak_lr": 1e-3, "hidden_dims": (128, 32)},
    "full": {"epochs": 100, "batch_size": 8, "target_dims": (8, 32, 32),
             "peak_lr": 1e-4},
}

RUN_CONFIG_KEYS = {"cohort", "manifest", "train"}


def _load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ValidationError(f"config file {path} is not valid JSON: {err}") from err


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True)


def _write_report(out_dir, stem: str, doc: dict, text: str) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(_dump(doc) + "\n")
    (out_dir / f"{stem}.txt").write_text(text + "\n")


def _apply_profile(config: TrainConfig, profile: str | None) -> TrainConfig:
    if profile is None:
        return config
    if profile not in PROFILES:
        raise ValidationError(f"unknown profile {profile!r}; pick one of {sorted(PROFILES)}")
    p = PROFILES[profile]
    schedule = replace(config.schedule, peak_lr=p["peak_lr"],
                       min_lr=p["peak_lr"] / 100.0)
    preprocess = replace(config.preprocess, target_dims=p["target_dims"])
    config = replace(config, epochs=p["epochs"], schedule=schedule,
                     preprocess=preprocess)
    if "batch_size" in p:
        config = replace(config, batch_size=p["batch_size"])
    if "hidden_dims" in p:
        config = replace(config, hidden_dims=p["hidden_dims"])
    config.validate()
    return config


def _resolve_run(args):
    """Turn a run config file plus CLI flags into (dataset, config, provenance).

    The run config may name a cohort spec (generated in process) or a
    manifest path (loaded from disk), but not both; with neither, the
    packaged default cohort is generated.  --seed overrides both the cohort
    seed and the training seed so a run is one number away from reproduction.
    """
    doc = _load_json(args.config) if args.config else {}
    if not isinstance(doc, dict):
        raise ValidationError("run config must be a JSON object")
    unknown = set(doc) - RUN_CONFIG_KEYS
    if unknown:
        raise ValidationError(f"unknown run config fields: {sorted(unknown)}")
    if doc.get("cohort") is not None and doc.get("manifest") is not None:
        raise ValidationError("run config may give 'cohort' or 'manifest', not both")

    config = TrainConfig.from_json(doc.get("train") or {})
    config = _apply_profile(config, args.profile)
    config = replace(config, seed=int(args.seed))
    config.validate()

    provenance = {"profile": args.profile, "seed": int(args.seed)}
    if doc.get("manifest") is not None:
        manifest_path = Path(doc["manifest"])
        if not manifest_path.is_absolute() and args.config:
            manifest_path = Path(args.config).parent / manifest_path
        dataset = data.load_manifest(manifest_path)
        provenance["manifest"] = str(doc["manifest"])
        provenance["manifest_sha256"] = _sha256_file(manifest_path)
    else:
        if doc.get("cohort") is not None:
            spec = data.CohortSpec.from_json(doc["cohort"])
        else:
            spec = data.default_cohort_spec(seed=int(args.seed))
        spec = replace(spec, seed=int(args.seed))
        spec.validate()
        dataset = data.generate_synthetic(spec)
        provenance["cohort"] = spec.to_json()
        provenance["manifest_sha256"] = _sha256_text(data.manifest_text(dataset))
    return dataset, config, provenance


def _require_out(args) -> Path:
    if not args.out:
        raise ValidationError("--out is required for this command")
    return Path(args.out)


def _count_table(dataset: Dataset) -> str:
    """Per-cell cohort counts: disease rows, split-by-gender columns."""
    counts = np.zeros((len(data.SPLITS), NUM_CLASSES, len(data.GENDERS)), dtype=int)
    for s in dataset:
        counts[data.SPLITS.index(s.split), s.disease, s.gender] += 1
    width = max(len(name) for name in DISEASES + ("total",))
    lines = [f"{'disease':<{width}} | train F | train M | val F | val M"]
    for d, name in enumerate(DISEASES):
        lines.append(
            f"{name:<{width}} | {counts[0, d, FEMALE]:7d} | {counts[0, d, MALE]:7d}"
            f" | {counts[1, d, FEMALE]:5d} | {counts[1, d, MALE]:5d}"
        )
    lines.append(
        f"{'total':<{width}} | {counts[0, :, FEMALE].sum():7d} | {counts[0, :, MALE].sum():7d}"
        f" | {counts[1, :, FEMALE].sum():5d} | {counts[1, :, MALE].sum():5d}"
    )
    return "\n".join(lines)


def cmd_synth(args) -> int:
    out = _require_out(args)
    if args.config:
        spec = data.CohortSpec.from_json(_load_json(args.config))
    else:
        spec = data.default_cohort_spec(seed=int(args.seed))
    spec = replace(spec, seed=int(args.seed))
    spec.validate()
    dataset = data.generate_synthetic(spec)
    manifest = data.save_dataset(dataset, out)
    table = _count_table(dataset)
    n_train = len(dataset.subset("train"))
    n_val = len(dataset.subset("val"))
    if args.format == "json":
        print(_dump({
            "manifest": str(manifest),
            "manifest_sha256": _sha256_file(manifest),
            "cohort": spec.to_json(),
            "counts": {"train": n_train, "val": n_val, "total": len(dataset)},
        }))
    else:
        print(table)
        print(f"\nwrote {len(dataset)} volumes to {out} "
              f"(train {n_train} / val {n_val})")
    return 0


def cmd_preprocess(args) -> int:
    out = _require_out(args)
    config = PreprocessConfig.from_json(_load_json(args.config)) if args.config \
        else PreprocessConfig()
    dataset = data.load_manifest(args.manifest)
    processed = []
    degenerate = 0
    for s in dataset:
        vol, flag = normalize(resize(trim_slices(s.volume, config.trim_low_frac,
                                                 config.trim_high_frac),
                                     config.target_dims),
                              config.normalization)
        degenerate += int(flag)
        processed.append(Sample(s.id, vol, s.gender, s.disease, s.split))
    data.save_dataset(Dataset(processed), out)
    d, h, w = config.target_dims
    summary = {"volumes": len(processed), "target_dims": [d, h, w],
               "degenerate": degenerate, "out": str(out)}
    if args.format == "json":
        print(_dump(summary))
    else:
        print(f"processed {len(processed)} volumes to {d}x{h}x{w} "
              f"({degenerate} degenerate)")
    return 0


def _train_summary(histories: dict, best_epochs: dict) -> str:
    lines = ["model | best_epoch | val_accuracy | val_macro_f1"]
    for name in sorted(histories):
        best = histories[name][best_epochs[name]]
        lines.append(f"{name} | {best_epochs[name]:10d} | {best['val_accuracy']:12.4f}"
                     f" | {best['val_macro_f1']:12.4f}")
    return "\n".join(lines)


def cmd_train(args) -> int:
    out = _require_out(args)
    dataset, config, provenance = _resolve_run(args)
    result = pipeline.train_two_stage(dataset, config)
    pipeline.save_two_stage(out, result, config, provenance=provenance)
    summary = _train_summary(result.histories, result.best_epochs)
    if args.format == "json":
        print(_dump({"checkpoint": str(out), "kind": "two_stage",
                     "best_epochs": result.best_epochs,
                     "train_counts": result.train_counts}))
    else:
        print(summary)
        print(f"\ntwo-stage checkpoint written to {out}")
    return 0


def cmd_train_baseline(args) -> int:
    out = _require_out(args)
    dataset, config, provenance = _resolve_run(args)
    result = pipeline.train_baseline(dataset, config)
    pipeline.save_baseline(out, result, config, provenance=provenance)
    histories = {"baseline": result.history}
    best = {"baseline": result.best_epoch}
    if args.format == "json":
        print(_dump({"checkpoint": str(out), "kind": "baseline",
                     "best_epochs": best,
                     "train_counts": {"total": result.train_count}}))
    else:
        print(_train_summary(histories, best))
        print(f"\nbaseline checkpoint written to {out}")
    return 0


def _eval_checkpoint(checkpoint, dataset, split, routing):
    model = pipeline.load_checkpoint(checkpoint)
    meta = json.loads((Path(checkpoint) / "metadata.json").read_text())
    report = pipeline.evaluate(model, dataset, split, routing=routing)
    return model, meta, report


def cmd_eval(args) -> int:
    dataset = data.load_manifest(args.manifest)
    _, meta, report = _eval_checkpoint(args.checkpoint, dataset, args.split,
                                       args.routing)
    doc = {
        "report_type": "eval",
        "split": args.split,
        "routing": args.routing,
        "checkpoint": {"path": str(args.checkpoint), "kind": meta["kind"],
                       "config_hash": meta["config_hash"]},
        "config": meta["config"],
        "manifest_sha256": _sha256_file(args.manifest),
        "metrics": report.to_json(),
    }
    label = KIND_LABELS[meta["kind"]]
    text = metrics.format_report_text(label, report)
    if args.out:
        _write_report(args.out, "report", doc, text)
    print(_dump(doc) if args.format == "json" else text)
    return 0


def _per_class_f1_table(labels, reports) -> str:
    width = max(len(name) for name in DISEASES)
    lines = [f"{'class':<{width}} | {labels[0]} | {labels[1]} | delta"]
    for c, name in enumerate(DISEASES):
        a = reports[0].per_class[c].f1
        b = reports[1].per_class[c].f1
        mark = "  <- minority class" if name == MINORITY_CLASS else ""
        lines.append(f"{name:<{width}} | {a:.4f} | {b:.4f} | {b - a:+.4f}{mark}")
    return "\n".join(lines)


def cmd_compare(args) -> int:
    dataset = data.load_manifest(args.manifest)
    rows = []
    for checkpoint in args.checkpoints:
        _, meta, report = _eval_checkpoint(checkpoint, dataset, args.split,
                                           args.routing)
        rows.append((checkpoint, meta, report))
    labels = [KIND_LABELS[meta["kind"]] for _, meta, _ in rows]
    table = metrics.format_table([(label, report)
                                  for label, (_, _, report) in zip(labels, rows)])
    breakdown = _per_class_f1_table(labels, [r for _, _, r in rows])
    text = f"{table}\n\nper-class F1\n{breakdown}"
    doc = {
        "report_type": "compare",
        "split": args.split,
        "routing": args.routing,
        "manifest_sha256": _sha256_file(args.manifest),
        "minority_class": MINORITY_CLASS,
        "rows": [
            {"method": label, "checkpoint": str(checkpoint),
             "config_hash": meta["config_hash"], "config": meta["config"],
             "metrics": report.to_json()}
            for label, (checkpoint, meta, report) in zip(labels, rows)
        ],
    }
    if args.out:
        _write_report(args.out, "compare", doc, text)
    print(_dump(doc) if args.format == "json" else text)
    return 0


def _check_grad(seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    while True:
        n_in = int(rng.integers(2, 24))
        hidden = [int(rng.integers(2, 24)) for _ in range(int(rng.integers(0, 3)))]
        n_out = int(rng.integers(2, 6))
        dims = [n_in] + hidden + [n_out]
        if sum((a + 1) * b for a, b in zip(dims, dims[1:])) <= 2000:
            break
    model = nncore.init_model(dims, np.random.default_rng(seed))
    batch = int(rng.integers(1, 9))
    X = rng.normal(size=(batch, n_in))
    y = rng.integers(0, n_out, size=batch)
    weights = rng.uniform(0.5, 2.0, size=n_out) if seed % 2 else None
    err = nncore.grad_check(model, X, y, class_weights=weights)
    return err < 1e-4, f"max rel err {err:.3e} (tolerance 1e-4)"


def _check_loss_identities(seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    ones = np.ones(NUM_CLASSES)
    for _ in range(1000):
        probs = rng.dirichlet(np.ones(NUM_CLASSES))
        c = int(rng.integers(0, NUM_CLASSES))
        if nncore.weighted_cross_entropy(probs, c, ones) != nncore.cross_entropy(probs, c):
            return False, "all-ones weighted loss differs from unweighted"
    worst = 0.0
    for _ in range(200):
        logits = rng.uniform(-1e3, 1e3, size=int(rng.integers(2, 8)))
        p = nncore.softmax(logits)
        if not np.all(np.isfinite(p)):
            return False, f"softmax overflowed on logits of magnitude {np.abs(logits).max():.0f}"
        worst = max(worst, abs(float(p.sum()) - 1.0))
    return worst <= 1e-9, f"max |sum(softmax) - 1| = {worst:.3e} (tolerance 1e-9)"


def _check_metric_oracle(seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 51))
        true = rng.integers(0, NUM_CLASSES, size=n)
        pred = rng.integers(0, NUM_CLASSES, size=n)
        macro = metrics.macro_prf(metrics.confusion(true, pred))
        worst = max(worst, abs(macro.accuracy - np.mean(true == pred)))
        f1s = []
        for c in range(NUM_CLASSES):
            tp = int(np.sum((pred == c) & (true == c)))
            fp = int(np.sum((pred == c) & (true != c)))
            fn = int(np.sum((pred != c) & (true == c)))
            precision = tp / (tp + fp) if tp + fp else 0.0
            recall = tp / (tp + fn) if tp + fn else 0.0
            f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
            m = macro.per_class[c]
            worst = max(worst, abs(m.precision - precision), abs(m.recall - recall),
                        abs(m.f1 - f1))
            f1s.append(f1)
        worst = max(worst, abs(macro.macro_f1 - np.mean(f1s)))
    return worst <= 1e-9, f"max |metric - tally oracle| = {worst:.3e} (tolerance 1e-9)"


def _check_auc_oracle(seed: int) -> tuple[bool, str]:
    known = metrics.auc_binary(np.array([0.1, 0.4, 0.35, 0.8]),
                               np.array([0, 0, 1, 1]))
    if abs(known - 0.75) > 1e-12:
        return False, f"known-value case gave {known}, expected 0.75"
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = np.round(rng.uniform(size=n), 1)  # coarse grid forces ties
        auc = metrics.auc_binary(scores, labels)
        pos = scores[labels == 1]
        neg = scores[labels == 0]
        wins = sum(1.0 if p > q else 0.5 if p == q else 0.0
                   for p in pos for q in neg)
        worst = max(worst, abs(auc - wins / (len(pos) * len(neg))))
    return worst <= 1e-9, f"max |AUC - pairwise oracle| = {worst:.3e} (tolerance 1e-9)"


def _check_routing(seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    pp = PreprocessConfig(trim_low_frac=0.0, trim_high_frac=0.0,
                          target_dims=(2, 4, 4))
    n_features = pp.feature_length()
    model = pipeline.TwoStageModel(
        gender_model=nncore.init_model([n_features, 2], np.random.default_rng(seed)),
        male_disease_model=nncore.init_model([n_features, 8, 4],
                                             np.random.default_rng(seed + 1)),
        female_disease_model=nncore.init_model([n_features, 8, 4],
                                               np.random.default_rng(seed + 2)),
        preprocess=pp,
    )
    volumes = [data.Volume.from_array(rng.normal(size=(2, 4, 4)).astype(np.float32))
               for _ in range(10)]
    branches = ((MALE, model.male_disease_model), (FEMALE, model.female_disease_model))
    for forced, branch_model in branches:
        for b in model.gender_model.biases:
            b[:] = 0.0
        model.gender_model.biases[-1][forced] = 50.0
        for vol in volumes:
            pred = pipeline.predict_two_stage(model, vol)
            x = featurize(vol, pp)
            _, logits = nncore.forward(branch_model, x)
            direct = nncore.softmax(logits)
            if pred.routed_gender != forced or not np.array_equal(pred.disease_probs, direct):
                return False, f"forced branch {forced} disagreed with direct evaluation"
    for vol in volumes:
        gender = int(rng.integers(0, 2))
        pred = pipeline.predict_two_stage(model, vol, gender_override=gender)
        branch_model = dict(branches)[gender]
        _, logits = nncore.forward(branch_model, featurize(vol, pp))
        if not np.array_equal(pred.disease_probs, nncore.softmax(logits)):
            return False, "oracle-routed prediction disagreed with direct evaluation"
    return True, "forced and oracle routing match direct branch evaluation bit for bit"


def _check_schedule(seed: int) -> tuple[bool, str]:
    spec = ScheduleSpec(peak_lr=1e-4, min_lr=1e-6, warmup_frac=0.05)
    sched = spec.materialize(steps_per_epoch=92, epochs=100)
    boundary = nncore.lr_at(sched, sched.warmup_steps)
    final = nncore.lr_at(sched, sched.total_steps)
    jump = abs(nncore.lr_at(sched, sched.warmup_steps - 1) - boundary)
    ok = (abs(boundary - 1e-4) <= 1e-16 and abs(final - 1e-6) <= 1e-16
          and jump <= 1e-12)
    return ok, (f"lr(warmup end) = {boundary:.6e}, lr(final) = {final:.6e}, "
                f"boundary jump {jump:.1e}")


VERIFY_CHECKS = [
    ("loss identities", _check_loss_identities),
    ("metric tally oracle", _check_metric_oracle),
    ("AUC pairwise oracle", _check_auc_oracle),
    ("routing identities", _check_routing),
    ("lr schedule", _check_schedule),
]


def cmd_verify(args) -> int:
    base = int(args.seed)
    failures = 0
    results = []
    for k in range(20):
        seed = base * 1000 + 100 + k
        ok, detail = _check_grad(seed)
        results.append((ok, f"gradient check #{k + 1:02d} (seed {seed}): {detail}"))
    for offset, (name, check) in enumerate(VERIFY_CHECKS):
        seed = base * 1000 + 500 + offset
        ok, detail = check(seed)
        results.append((ok, f"{name} (seed {seed}): {detail}"))
    for ok, line in results:
        print(("[PASS] " if ok else "[FAIL] ") + line)
        failures += int(not ok)
    total = len(results)
    if failures:
        print(f"\n{failures} of {total} checks FAILED")
        return 2
    print(f"\nall {total} checks passed")
    return 0


class _Parser(argparse.ArgumentParser):
    # usage mistakes are validation errors (exit 1), not crashes
    def error(self, message):
        raise ValidationError(message)


def _add_common(sub, seed_required: bool) -> None:
    sub.add_argument("--seed", type=int, required=seed_required, default=0,
                     help="run seed; drives data generation and training")
    sub.add_argument("--config", help="path to this command's JSON config")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--format", choices=("json", "text"), default="text",
                     help="stdout report format")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lungroute",
                     description="two-stage demographically routed classification")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("synth", help="generate a synthetic cohort")
    _add_common(p, seed_required=True)
    p.set_defaults(func=cmd_synth)

    p = commands.add_parser("preprocess", help="trim, resize, and normalize volumes")
    _add_common(p, seed_required=False)
    p.add_argument("--manifest", required=True, help="input dataset manifest")
    p.set_defaults(func=cmd_preprocess)

    for name, func in (("train", cmd_train), ("train-baseline", cmd_train_baseline)):
        p = commands.add_parser(name, help=f"{name.replace('-', ' ')} and checkpoint")
        _add_common(p, seed_required=True)
        p.add_argument("--profile", choices=sorted(PROFILES),
                       help="preset overriding epochs, dims, and learning rate")
        p.set_defaults(func=func)

    p = commands.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_common(p, seed_required=False)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--manifest", required=True, help="dataset manifest")
    p.add_argument("--split", choices=data.SPLITS, default="val")
    p.add_argument("--routing", choices=("predicted", "true"), default="predicted",
                   help="two-stage dispatch: predicted gender or true label")
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("compare", help="evaluate two checkpoints side by side")
    _add_common(p, seed_required=False)
    p.add_argument("checkpoints", nargs=2, metavar="CHECKPOINT",
                   help="two checkpoint directories")
    p.add_argument("--manifest", required=True, help="dataset manifest")
    p.add_argument("--split", choices=data.SPLITS, default="val")
    p.add_argument("--routing", choices=("predicted", "true"), default="predicted")
    p.set_defaults(func=cmd_compare)

    p = commands.add_parser("verify", help="self-check gradients, metrics, routing")
    _add_common(p, seed_required=False)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except LungRouteError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return 2
    except Exception:  # stable exit contract even for unexpected bugs
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
