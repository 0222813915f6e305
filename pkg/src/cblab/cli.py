"""Command-line entry point.

Subcommands:
    gen        generate a dataset manifest (JSONL)
    train      train composition models against frozen image embeddings
    eval       evaluate saved checkpoints on a manifest
    report     render tables and figures from a run directory
    gradcheck  verify analytic gradients against finite differences
    run        full experiment: gen -> embed -> train -> eval -> report

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import compose as cp
from . import config as cfgmod
from . import embed as em
from . import evaluate as ev
from . import gradcheck as gc
from . import report as rp
from . import scenegen as sg
from . import train as tr

GRADCHECK_TOLERANCE = 1e-5


def _add_common_flags(parser):
    parser.add_argument("--dataset", choices=sg.DATASET_KINDS, help="dataset kind")
    parser.add_argument("--counts", help="examples per split as 'train,val,gen'")
    parser.add_argument("--seed", type=int, help="master seed (data + encoder)")
    parser.add_argument("--encoder", help="bag | structured | raster | import:<path>")
    parser.add_argument("--sigma", type=float, help="encoder noise scale")
    parser.add_argument("--dim", type=int, help="embedding dimension")
    parser.add_argument("--model", action="append", choices=cp.MODELS,
                        help="model to train (repeatable; default: all five)")
    parser.add_argument("--seeds", type=int, help="number of training seeds")
    parser.add_argument("--epochs", type=int, help="training epochs")
    parser.add_argument("--lr", type=float, help="learning rate")
    parser.add_argument("--weight-decay", type=float, help="L2 penalty coefficient")
    parser.add_argument("--batch-size", type=int, help="mini-batch size")
    parser.add_argument("--negatives", help="'all' or a sampled count")
    parser.add_argument("--tie-policy", choices=ev.TIE_POLICIES, help="argmax tie policy")
    parser.add_argument("--calibrate", action="store_true", default=None,
                        help="tune and apply calibrated stacking")
    parser.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--config", help="INI config file (flags override it)")


def _build_config(args) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.ExperimentConfig()
    if getattr(args, "dataset", None):
        cfg.dataset = args.dataset
    if getattr(args, "counts", None):
        cfg.counts = cfgmod._parse_counts(args.counts)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "encoder", None):
        cfg.encoder = args.encoder
    if getattr(args, "sigma", None) is not None:
        cfg.sigma = args.sigma
    if getattr(args, "dim", None) is not None:
        cfg.train.dim = args.dim
    if getattr(args, "model", None):
        cfg.models = list(args.model)
    if getattr(args, "seeds", None) is not None:
        cfg.train.seeds = args.seeds
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
    if getattr(args, "lr", None) is not None:
        cfg.train.learning_rate = args.lr
    if getattr(args, "weight_decay", None) is not None:
        cfg.train.weight_decay = args.weight_decay
    if getattr(args, "batch_size", None) is not None:
        cfg.train.batch_size = args.batch_size
    if getattr(args, "negatives", None):
        cfg.train.negatives = args.negatives if args.negatives == "all" else int(args.negatives)
    if getattr(args, "tie_policy", None):
        cfg.train.tie_policy = args.tie_policy
    if getattr(args, "calibrate", None):
        cfg.calibrate = True
    if getattr(args, "no_figures", False):
        cfg.figures = False
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    cfgmod.apply_seed_env(cfg)
    return cfgmod.validate(cfg)


# ---------------------------------------------------------------------------
# pipeline pieces
# ---------------------------------------------------------------------------

def _prepare_data(cfg, run_dir: Path):
    manifest = sg.build_dataset(cfg.dataset, cfg.resolved_counts(), cfg.seed)
    sg.write_manifest(manifest, run_dir / "manifest.jsonl")
    embeddings = em.compute_embeddings(manifest, cfg.encoder_spec(), cfg.seed)
    em.export_embeddings(run_dir / "embeddings.txt", embeddings)
    return manifest, embeddings


def _taxonomy_for_model(model, manifest, embeddings, cfg, checkpoint_dir: Path):
    """Per-seed error taxonomies on the configured split, from saved checkpoints."""
    examples = manifest.examples.get(cfg.taxonomy_split, [])
    if not examples:
        return None
    per_seed = []
    for seed in range(1, cfg.train.seeds + 1):
        params = cp.load_checkpoint(checkpoint_dir / f"{model}-seed{seed}.npz")
        _, preds = ev.evaluate_split(params, examples, embeddings,
                                     policy=cfg.train.tie_policy,
                                     normalize_scores=cfg.train.score_normalization,
                                     logit_scale=cfg.train.logit_scale,
                                     tie_seed=cfg.train.tie_seed)
        per_seed.append(ev.taxonomy_from_predictions(preds, manifest.kind))
    return rp.aggregate_taxonomies(per_seed)


def _calibration_for_model(model, manifest, embeddings, cfg):
    """Calibrated-stacking pipeline: hold out a seen validation slice from the
    train split, retrain on the rest, tune the coefficient on (seen, unseen)
    validation accuracy, then apply it to the generalization split."""
    train_examples = manifest.examples["train"]
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xCA11B)))
    n_seen = max(1, int(round(cfg.calibration_fraction * len(train_examples))))
    seen_idx = set(rng.choice(len(train_examples), size=n_seen, replace=False).tolist())
    seen_val = [ex for i, ex in enumerate(train_examples) if i in seen_idx]
    reduced = sg.DatasetManifest(
        kind=manifest.kind, seed=manifest.seed, tau=manifest.tau,
        classes=manifest.classes,
        examples={
            "train": [ex for i, ex in enumerate(train_examples) if i not in seen_idx],
            "validation": manifest.examples["validation"],
            "generalization": manifest.examples["generalization"],
        },
    )
    seen_classes = {ph.label() for ph in manifest.classes["train"]}
    gammas, gen_base, gen_cal = [], [], []
    for seed in range(1, cfg.train.seeds + 1):
        params, _ = tr.train_model(model, reduced, embeddings, cfg.train, seed)
        kwargs = dict(policy=cfg.train.tie_policy,
                      normalize_scores=cfg.train.score_normalization,
                      logit_scale=cfg.train.logit_scale, tie_seed=cfg.train.tie_seed)
        _, seen_preds = ev.evaluate_split(params, seen_val, embeddings, **kwargs)
        _, unseen_preds = ev.evaluate_split(params, reduced.examples["validation"],
                                            embeddings, **kwargs)
        result = ev.calibrate(seen_preds, unseen_preds, seen_classes,
                              policy=cfg.train.tie_policy)
        base_acc, gen_preds = ev.evaluate_split(params, reduced.examples["generalization"],
                                                embeddings, **kwargs)
        calibrated = ev.apply_calibration(gen_preds, result.gamma, seen_classes,
                                          policy=cfg.train.tie_policy)
        gammas.append(result.gamma)
        gen_base.append(base_acc)
        gen_cal.append(float(np.mean([p.correct for p in calibrated])))
    return {
        "gamma": tr.summarize_accuracies(gammas).__dict__,
        "generalization_uncalibrated": tr.summarize_accuracies(gen_base).__dict__,
        "generalization_calibrated": tr.summarize_accuracies(gen_cal).__dict__,
    }


def run_experiment(cfg: cfgmod.ExperimentConfig) -> Path:
    """End-to-end experiment; every artifact lands under the seed-suffixed
    run directory and reruns with the same config reproduce it byte for byte."""
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.save_config(cfg, run_dir / "config.ini")
    manifest, embeddings = _prepare_data(cfg, run_dir)

    summaries, taxonomies, histories = {}, {}, {}
    calibration = {} if cfg.calibrate else None
    for model in cfg.models:
        summary = tr.run_seeds(model, manifest, embeddings, cfg.train,
                               checkpoint_dir=run_dir / "checkpoints",
                               history_dir=run_dir / "histories")
        summaries[model] = summary
        agg = _taxonomy_for_model(model, manifest, embeddings, cfg, run_dir / "checkpoints")
        if agg is not None:
            taxonomies[model] = agg
        histories[model] = _read_histories(run_dir / "histories", model, cfg.train.seeds)
        if cfg.calibrate:
            calibration[model] = _calibration_for_model(model, manifest, embeddings, cfg)

    kinds = (ev.ADJNOUN_ERROR_KINDS if cfg.dataset in ("single", "two")
             else ev.RELATIONAL_ERROR_KINDS)
    rp.emit_report(run_dir / "reports", summaries, taxonomies, kinds,
                   formats=cfg.formats, figures=cfg.figures,
                   histories=histories, calibration=calibration)
    return run_dir


def _read_histories(history_dir: Path, model: str, seeds: int):
    out = []
    for seed in range(1, seeds + 1):
        history = tr.TrainHistory(seed=seed)
        with open(history_dir / f"{model}-seed{seed}.csv", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                history.records.append(tr.EpochRecord(
                    int(row["epoch"]), float(row["train_loss"]),
                    float(row["train_acc"]), float(row["val_acc"])))
        out.append(history)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _build_config(args)
    manifest = sg.build_dataset(cfg.dataset, cfg.resolved_counts(), cfg.seed)
    out = Path(cfg.out_dir) / f"{cfg.dataset}-seed{cfg.seed}.jsonl"
    sg.write_manifest(manifest, out)
    for split in ("train", "validation", "generalization"):
        n_cls = len(manifest.classes[split])
        n_ex = len(manifest.examples[split])
        print(f"{split}: {n_ex} examples over {n_cls} classes")
    print(f"wrote {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _build_config(args)
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.save_config(cfg, run_dir / "config.ini")
    manifest, embeddings = _prepare_data(cfg, run_dir)
    summaries = {}
    for model in cfg.models:
        summaries[model] = tr.run_seeds(model, manifest, embeddings, cfg.train,
                                        checkpoint_dir=run_dir / "checkpoints",
                                        history_dir=run_dir / "histories")
        acc = summaries[model].accuracy
        print(f"{model}: train {100*acc['train'].mean:.2f} "
              f"val {100*acc['validation'].mean:.2f} "
              f"gen {100*acc['generalization'].mean:.2f}")
    rp.write_summaries_json(run_dir / "reports" / "summaries.json", summaries)
    print(f"run directory: {run_dir}")
    return 0


def cmd_eval(args) -> int:
    manifest = sg.read_manifest(args.manifest)
    embeddings = em.import_embeddings(args.embeddings)
    results = {}
    for path in args.checkpoint:
        params = cp.load_checkpoint(path)
        name = Path(path).stem
        results[name] = {}
        for split in ("train", "validation", "generalization"):
            examples = manifest.examples.get(split, [])
            if not examples:
                continue
            acc, preds = ev.evaluate_split(params, examples, embeddings,
                                           policy=args.tie_policy)
            adv, _ = ev.evaluate_split(params, examples, embeddings,
                                       policy="adversarial")
            results[name][split] = {
                "accuracy": acc,
                "adversarial_accuracy": adv,
                "tie_rate": float(np.mean([p.tie for p in preds])),
            }
            print(f"{name} {split}: acc {100*acc:.2f} (adv {100*adv:.2f})")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(results, indent=2) + "\n", encoding="utf-8")
        print(f"wrote {out}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    payload = rp.read_summaries_json(run_dir / "reports" / "summaries.json")
    summaries = rp.summaries_from_json(payload)
    taxonomies = payload.get("taxonomies") or {}
    some_model = next(iter(taxonomies), None)
    if some_model and "Adj" in taxonomies[some_model]:
        kinds = ev.ADJNOUN_ERROR_KINDS
    else:
        kinds = ev.RELATIONAL_ERROR_KINDS
    histories = {}
    history_dir = run_dir / "histories"
    if history_dir.is_dir():
        for model in summaries:
            seeds = len(summaries[model].seeds)
            try:
                histories[model] = _read_histories(history_dir, model, seeds)
            except FileNotFoundError:
                pass
    written = rp.emit_report(run_dir / "reports", summaries, taxonomies, kinds,
                             formats=args.format or ["csv", "md"],
                             figures=not args.no_figures, histories=histories,
                             calibration=payload.get("calibration"))
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_gradcheck(args) -> int:
    models = args.model or list(cp.MODELS)
    worst = 0.0
    for model in models:
        for kind in (args.kind,) if args.kind else ("single", "relational"):
            result = gc.run_gradcheck(model, kind, args.dim, args.trials,
                                      seed=args.seed or 0, check_loss=True)
            print(f"{model:5s} {kind:10s} d={args.dim:3d} "
                  f"max_rel_error={result['max_rel_error']:.3e} "
                  f"loss={result['max_loss_rel_error']:.3e}")
            worst = max(worst, result["max_rel_error"], result["max_loss_rel_error"])
    if worst >= GRADCHECK_TOLERANCE:
        print(f"FAIL: worst relative error {worst:.3e} >= {GRADCHECK_TOLERANCE}")
        return 1
    print(f"OK: worst relative error {worst:.3e}")
    return 0


def cmd_run(args) -> int:
    cfg = _build_config(args)
    run_dir = run_experiment(cfg)
    print(f"run directory: {run_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cbl",
        description="Concept binding lab: datasets, composition models, benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a dataset manifest")
    _add_common_flags(p_gen)
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="train models and save checkpoints")
    _add_common_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate saved checkpoints")
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--embeddings", required=True, help="interchange file")
    p_eval.add_argument("--checkpoint", action="append", required=True)
    p_eval.add_argument("--tie-policy", choices=ev.TIE_POLICIES, default="lowest_index")
    p_eval.add_argument("--out", help="write metrics JSON here")
    p_eval.set_defaults(func=cmd_eval)

    p_report = sub.add_parser("report", help="render tables and figures for a run")
    p_report.add_argument("--run", required=True, help="run directory")
    p_report.add_argument("--format", action="append", choices=("csv", "md"))
    p_report.add_argument("--no-figures", action="store_true")
    p_report.set_defaults(func=cmd_report)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p_grad.add_argument("--model", action="append", choices=cp.MODELS)
    p_grad.add_argument("--kind", choices=sg.DATASET_KINDS)
    p_grad.add_argument("--dim", type=int, default=16)
    p_grad.add_argument("--trials", type=int, default=25)
    p_grad.add_argument("--seed", type=int)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_run = sub.add_parser("run", help="full experiment pipeline")
    _add_common_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (sg.ConfigError, cp.ConfigError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface as runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
