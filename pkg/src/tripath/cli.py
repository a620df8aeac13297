"""Command-line entry points: gen-data, train, eval, ablate, check-grad.

Configs are flat JSON documents (see config.RunConfig) with `--set key=value`
overrides. Every verb prints a human-readable table and can write the same
content as JSON. Exit codes: 0 success, 1 infeasible dataset request, 2
config/usage/format errors, 3 numeric failure during training or evaluation,
4 gradient check over tolerance. TRIPATH_LOG=debug|info|warning|error picks
the log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointFormatError, restore_model, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import (
    InfeasibleSplitError,
    SyntheticConfig,
    build_embedding_table,
    generate_synthetic,
    load_embeddings,
    load_manifest,
    save_embeddings,
    save_manifest,
    stats,
    target_space,
)
from .encoders import VISUAL_STRATEGIES
from .evaluation import (
    MetricsReport,
    apply_feasibility,
    calibrate_threshold,
    evaluate_matrix,
    feasibility_scores,
    rho_vector,
    score_split,
)
from .model import DatasetInfo, build_model
from .train import TrainingDivergedError, train_model

log = logging.getLogger("tripath")


def _raw_dict(report: MetricsReport) -> dict:
    return {"seen": report.seen, "unseen": report.unseen,
            "harmonic": report.harmonic, "auc": report.auc}


def _write_json(path: str | None, doc: dict):
    if path:
        with open(path, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")


# ---------------------------------------------------------------------------
# gen-data


def _synthetic_config(args) -> SyntheticConfig:
    m = re.fullmatch(r"synth-(\d+)x(\d+)", args.preset)
    if not m:
        raise ConfigError(f"unknown preset {args.preset!r} (expected synth-NxM)")
    fields = dict(n_states=int(m.group(1)), n_objects=int(m.group(2)), seed=args.seed)
    for name in ("unseen_fraction", "train_per_pair", "val_per_pair",
                 "test_per_pair", "noise_std"):
        value = getattr(args, name)
        if value is not None:
            fields[name] = value
    try:
        return SyntheticConfig(**fields)
    except ValueError as err:
        raise ConfigError(str(err))


def cmd_gen_data(args) -> int:
    cfg = _synthetic_config(args)
    manifest = generate_synthetic(cfg)
    os.makedirs(args.out, exist_ok=True)
    save_manifest(manifest, os.path.join(args.out, "manifest.json"))
    save_embeddings(build_embedding_table(cfg), os.path.join(args.out, "embeddings.json"))
    summary = stats(manifest)
    _write_json(os.path.join(args.out, "stats.json"), summary)
    for key in sorted(summary):
        print(f"{key}: {summary[key]}")
    print(f"wrote manifest.json, embeddings.json, stats.json to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    manifest = load_manifest(args.manifest)
    model = build_model(cfg, manifest)
    n_train = len(manifest.splits.get("train", []))
    print(f"training on {n_train} samples, {cfg.epochs} epochs, "
          f"tuning={cfg.tuning}, seed={cfg.seed}")
    result = train_model(model, manifest,
                         progress=lambda r: print(r.row(), flush=True))
    save_checkpoint(args.out, model)
    log_path = args.log if args.log else args.out + ".log.json"
    final = result.final
    _write_json(log_path, {
        "config": cfg.to_dict(),
        "epochs": [r.to_dict() for r in result.records],
        "final_val": final.val.percent_dict(),
        "final_val_raw": _raw_dict(final.val),
        "best_seen": result.best_seen,
    })
    print(f"checkpoint -> {args.out}")
    print(f"log -> {log_path}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _check_label_space(model, manifest):
    if DatasetInfo.from_manifest(manifest).to_dict() != model.info.to_dict():
        raise ConfigError("checkpoint label space does not match the manifest "
                          "(states/objects/pair split differ)")


def _dump_attention(model, manifest, args, pairs) -> int:
    samples = manifest.splits[args.split]
    k = args.dump_attention
    if k < 1 or k > len(samples):
        raise ConfigError(f"--dump-attention {k} outside 1..{len(samples)}")
    os.makedirs(args.dump_dir, exist_ok=True)
    images = np.stack([s.image for s in samples[:k]])
    grids = model.attention_maps(images, pairs, block=-1)
    for p in range(k):
        path = os.path.join(args.dump_dir, f"attention_{p:04d}.csv")
        np.savetxt(path, grids[p], delimiter=",", fmt="%.17g")
    print(f"wrote {k} attention grids to {args.dump_dir}")
    return k


def cmd_eval(args) -> int:
    model = restore_model(args.checkpoint)
    manifest = load_manifest(args.manifest)
    _check_label_space(model, manifest)
    threshold = None
    if args.world == "closed":
        report = evaluate_matrix(score_split(model, manifest, args.split, "closed"))
    else:
        if not args.feasibility:
            raise ConfigError("open-world evaluation needs --feasibility EMBEDDINGS")
        table = load_embeddings(args.feasibility)
        pairs, _ = target_space(manifest, "open")
        rho_vec = rho_vector(feasibility_scores(manifest, table), pairs)
        if args.threshold == "auto":
            val_sm = score_split(model, manifest, "val", "open")
            threshold, _ = calibrate_threshold(val_sm, rho_vec)
        else:
            threshold = float(args.threshold)
        sm = score_split(model, manifest, args.split, "open")
        report = evaluate_matrix(apply_feasibility(sm, rho_vec, threshold))
        print(f"feasibility threshold: {threshold:.6f}")
    print(f"split {args.split}  world {args.world}")
    print(report.row())
    doc = {"split": args.split, "world": args.world,
           "metrics": report.percent_dict(), "metrics_raw": _raw_dict(report)}
    if threshold is not None:
        doc["threshold"] = threshold
    if args.dump_attention:
        pairs, _ = target_space(manifest, args.world)
        doc["attention_grids"] = _dump_attention(model, manifest, args, pairs)
    _write_json(args.json, doc)
    return 0


# ---------------------------------------------------------------------------
# ablate

BRANCH_ROWS = [
    ("cso  train+inf", {"use_c": True, "use_s": True, "use_o": True,
                        "mask_phase": "TrainingAndInference"}),
    ("c--  train+inf", {"use_c": True, "use_s": False, "use_o": False,
                        "mask_phase": "TrainingAndInference"}),
    ("-so  train+inf", {"use_c": False, "use_s": True, "use_o": True,
                        "mask_phase": "TrainingAndInference"}),
    ("cs-  train+inf", {"use_c": True, "use_s": True, "use_o": False,
                        "mask_phase": "TrainingAndInference"}),
    ("c-o  train+inf", {"use_c": True, "use_s": False, "use_o": True,
                        "mask_phase": "TrainingAndInference"}),
    ("c--  inference", {"use_c": True, "use_s": False, "use_o": False,
                        "mask_phase": "InferenceOnly"}),
    ("-so  inference", {"use_c": False, "use_s": True, "use_o": True,
                        "mask_phase": "InferenceOnly"}),
    ("cs-  inference", {"use_c": True, "use_s": True, "use_o": False,
                        "mask_phase": "InferenceOnly"}),
    ("c-o  inference", {"use_c": True, "use_s": False, "use_o": True,
                        "mask_phase": "InferenceOnly"}),
]

PROMPT_ROWS = [
    ("prefix c|s|o  vocab cso", {"prefix_mode": "c|s|o", "vocab_mode": "cso"}),
    ("prefix cso    vocab cso", {"prefix_mode": "cso", "vocab_mode": "cso"}),
    ("prefix c|so   vocab cso", {"prefix_mode": "c|so", "vocab_mode": "cso"}),
    ("prefix c|s|o  vocab c|s|o", {"prefix_mode": "c|s|o", "vocab_mode": "c|s|o"}),
]

CMT_ROWS = [
    ("with traction", {}),
    ("without traction", {"cmt_layers": 0}),
]

TUNING_ROWS = [(strategy, {"tuning": strategy}) for strategy in VISUAL_STRATEGIES]

LAMBDA_ROWS = [
    ("vector  trainable", {"lambda_vectorized": True, "lambda_trainable": True}),
    ("vector  frozen", {"lambda_vectorized": True, "lambda_trainable": False}),
    ("scalar  trainable", {"lambda_vectorized": False, "lambda_trainable": True}),
]

STUDIES = {
    "branches": BRANCH_ROWS,
    "prompts": PROMPT_ROWS,
    "cmt": CMT_ROWS,
    "visual-tuning": TUNING_ROWS,
    "lambda": LAMBDA_ROWS,
}


def _ablation_task(task):
    """Train and evaluate one (row, seed) cell; runs in its own process under
    --parallel, so everything it needs arrives as plain picklable values."""
    label, doc, manifest_path, split = task
    cfg = RunConfig.from_dict(doc)
    manifest = load_manifest(manifest_path)
    model = build_model(cfg, manifest)
    train_model(model, manifest)
    report = evaluate_matrix(score_split(model, manifest, split, "closed"))
    return label, cfg.seed, _raw_dict(report)


def cmd_ablate(args) -> int:
    rows = STUDIES[args.study]
    base = load_config(args.config, args.set).to_dict()
    seeds = _parse_seeds(args.seeds)
    tasks = []
    for label, patch in rows:
        for seed in seeds:
            doc = dict(base)
            doc.update(patch)
            doc["seed"] = seed
            RunConfig.from_dict(doc)  # fail fast before any training starts
            tasks.append((label, doc, args.manifest, args.split))
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            outcomes = list(pool.map(_ablation_task, tasks))
    else:
        outcomes = []
        for task in tasks:
            log.info("ablate %s seed %s", task[0], task[1]["seed"])
            outcomes.append(_ablation_task(task))
    by_label: dict[str, list[dict]] = {label: [] for label, _ in rows}
    for label, _, raw in outcomes:
        by_label[label].append(raw)
    width = max(len(label) for label, _ in rows)
    print(f"study {args.study}  seeds {','.join(map(str, seeds))}  "
          f"median closed-world metrics on split {args.split!r}")
    table = []
    for label, _ in rows:
        med = {key: float(np.median([raw[key] for raw in by_label[label]]))
               for key in ("seen", "unseen", "harmonic", "auc")}
        report = MetricsReport(**med)
        table.append({"row": label.strip(), "metrics": report.percent_dict(),
                      "metrics_raw": med})
        print(f"{label:<{width}}  {report.row()}")
    _write_json(args.json, {"study": args.study, "seeds": seeds, "rows": table})
    return 0


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}")
    if not seeds:
        raise ConfigError("--seeds is empty")
    return seeds


# ---------------------------------------------------------------------------
# check-grad


def gradient_check_rows(strategies, step: float = 1e-5):
    """Full-model finite-difference check on a toy build, one row per strategy.

    Yields (strategy, element count, max relative error, seconds). The toy
    build is fixed: 6x6 synthetic data, width 16, single-block towers, one
    traction block, a batch of 4 training images.
    """
    manifest = generate_synthetic(SyntheticConfig(seed=0))
    samples = manifest.splits["train"]
    picks = np.random.default_rng(3).choice(len(samples), size=4, replace=False)
    batch = {
        "images": np.stack([samples[k].image for k in picks]),
        "state_idx": np.asarray([samples[k].state for k in picks]),
        "object_idx": np.asarray([samples[k].object for k in picks]),
    }
    for strategy in strategies:
        cfg = RunConfig(seed=1, d_in=16, d=16, image_depth=1, text_depth=1,
                        image_heads=2, text_heads=2, cmt_layers=1, cmt_heads=2,
                        adapter_r=4, tuning=strategy, batch_size=4)
        model = build_model(cfg, manifest)
        elements = sum(p.data.size for p in model.trainable_parameters())
        start = time.perf_counter()
        worst = T.finite_difference_check(model, batch, step=step)
        yield strategy, elements, worst, time.perf_counter() - start


def cmd_check_grad(args) -> int:
    if args.strategies == "all":
        strategies = list(VISUAL_STRATEGIES)
    else:
        strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
        unknown = [s for s in strategies if s not in VISUAL_STRATEGIES]
        if unknown:
            raise ConfigError(f"unknown tuning strategies {unknown}; "
                              f"choose from {VISUAL_STRATEGIES}")
    failed = []
    rows = []
    print(f"strategy  elements  max rel err   seconds  (tolerance {args.tol:g})")
    for strategy, elements, worst, seconds in gradient_check_rows(strategies, args.step):
        verdict = "ok" if worst < args.tol else "FAIL"
        rows.append({"strategy": strategy, "elements": elements,
                     "max_rel_err": worst, "seconds": seconds,
                     "passed": worst < args.tol})
        print(f"{strategy:<8}  {elements:8d}  {worst:.3e}  {seconds:8.1f}  {verdict}")
        if worst >= args.tol:
            failed.append(strategy)
    _write_json(args.json, {"step": args.step, "tolerance": args.tol, "rows": rows})
    if failed:
        print(f"gradient check FAILED for: {', '.join(failed)}", file=sys.stderr)
        return 4
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tripath",
        description="Multi-path compositional recognition: data, training, "
                    "evaluation, ablations, gradient checks.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic compositional dataset")
    p.add_argument("--preset", default="synth-6x6", help="synth-NxM grid size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--unseen-fraction", type=float, default=None)
    p.add_argument("--train-per-pair", type=int, default=None)
    p.add_argument("--val-per-pair", type=int, default=None)
    p.add_argument("--test-per-pair", type=int, default=None)
    p.add_argument("--noise-std", type=float, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--log", default=None, help="JSON log path (default OUT.log.json)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--world", choices=("closed", "open"), default="closed")
    p.add_argument("--feasibility", default=None,
                   help="embedding table JSON (open world)")
    p.add_argument("--threshold", default="auto",
                   help="feasibility threshold, or 'auto' to calibrate on val")
    p.add_argument("--dump-attention", type=int, default=0, metavar="K",
                   help="write K traction attention grids as CSV")
    p.add_argument("--dump-dir", default="attention")
    p.add_argument("--json", default=None, help="write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation study grid")
    p.add_argument("--study", required=True, choices=sorted(STUDIES))
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seeds", default="1,2,3,4,5")
    p.add_argument("--split", default="test")
    p.add_argument("--parallel", type=int, default=1, metavar="N",
                   help="run N training processes at once (default: sequential)")
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("check-grad", help="finite-difference gradient check")
    p.add_argument("--strategies", default="all",
                   help="'all' or comma-separated visual tuning strategies")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_check_grad)
    return parser


def _configure_logging():
    level = os.environ.get("TRIPATH_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InfeasibleSplitError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (TrainingDivergedError, T.DomainError) as err:
        print(f"error: numeric failure: {err}", file=sys.stderr)
        return 3
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (ValueError, CheckpointFormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
