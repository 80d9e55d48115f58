"""Command-line front end for reproducible runs.

Commands: generate, train, evaluate, compare, export-embeddings,
gradcheck. One TOML config file (every key optional) plus a few flag
overrides; all randomness funnels through the single root seed. Every
command writes its artifacts under <out>/<command>-<config hash>/ so a
rerun with the same effective config lands in the same place with
byte-identical files.

Exit codes: 0 success, 1 failed check, 2 config error, 3 missing
artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from . import cohort as cohort_mod
from . import evaluation, pipeline
from .cohort import CohortError, GeneratorConfig
from .embedder import (ConfigError, EmbedderConfig, NumericError, grad_check,
                       load_checkpoint, params_to_tree, params_from_tree,
                       save_checkpoint)
from .losses import MarginSet
from .mining import SamplerConfig

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4

DEFAULTS = {
    "seed": 0,
    "out": "runs",
    "dataset": "",
    "mode": "dmt_quad",
    "generator": {
        "n_patients": 37,
        "lesions_per_patient": [100, 400],
        "ud_fraction": 1.0 / 33.0,
        "feature_dim": 16,
        "center_spread": 3.0,
        "noise": 0.35,
        "ud_offset": [2.0, 6.0],
    },
    "embedder": {
        "hidden_dims": [64, 64],
        "embedding_dim": 128,
    },
    "sampler": {
        "patients_per_batch": 4,
        "samples_per_patient": 8,
    },
    "margins": {
        "alpha": 1.0,
        "beta": 1.5,
    },
    "stage1": {
        "epochs": 30,
        "batches_per_epoch": 50,
        "lr": 0.0001,
        "val_batches": 2,
    },
    "stage2": {
        "epochs": 40,
        "batch_size": 32,
        "lr": 0.0001,
    },
    "experiment": {
        "modes": ["baseline", "naive_triplet", "ps_triplet",
                  "t_quad", "dmt_quad"],
        "seeds": [0, 1, 2, 3, 4],
        "split_seed": 0,
        "fractions": [0.6, 0.2, 0.2],
        "oversample_factor": 10,
        "average": "macro",
    },
    "gradcheck": {
        "input_dim": 5,
        "hidden_dims": [8, 6],
        "embedding_dim": 4,
        "seeds": [0, 1, 2, 3, 4],
        "tolerance": 1e-4,
    },
}


class CliConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise CliConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise CliConfigError(f"{where} must be a table")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: str | None, overrides: dict) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                user = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise CliConfigError(f"{path}: {exc}") from exc
        cfg = _merge(cfg, user)
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def _run_dir(cfg: dict, command: str) -> str:
    run_dir = os.path.join(cfg["out"], f"{command}-{config_hash(cfg)}")
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return run_dir


def _generator_config(cfg: dict) -> GeneratorConfig:
    g = cfg["generator"]
    return GeneratorConfig(
        n_patients=g["n_patients"],
        lesions_per_patient=tuple(g["lesions_per_patient"]),
        ud_fraction=g["ud_fraction"],
        feature_dim=g["feature_dim"],
        center_spread=g["center_spread"],
        noise=g["noise"],
        ud_offset=tuple(g["ud_offset"]),
        seed=cfg["seed"],
    )


def _experiment_config(cfg: dict) -> pipeline.ExperimentConfig:
    e = cfg["experiment"]
    return pipeline.ExperimentConfig(
        modes=tuple(e["modes"]),
        seeds=tuple(e["seeds"]),
        split_seed=e["split_seed"],
        fractions=tuple(e["fractions"]),
        oversample_factor=e["oversample_factor"],
        hidden_dims=tuple(cfg["embedder"]["hidden_dims"]),
        embedding_dim=cfg["embedder"]["embedding_dim"],
        stage1_epochs=cfg["stage1"]["epochs"],
        batches_per_epoch=cfg["stage1"]["batches_per_epoch"],
        patients_per_batch=cfg["sampler"]["patients_per_batch"],
        samples_per_patient=cfg["sampler"]["samples_per_patient"],
        alpha=cfg["margins"]["alpha"],
        beta=cfg["margins"]["beta"],
        lr=cfg["stage1"]["lr"],
        stage2_epochs=cfg["stage2"]["epochs"],
        stage2_batch_size=cfg["stage2"]["batch_size"],
        average=e["average"],
    )


def _load_dataset(cfg: dict, args) -> list:
    path = getattr(args, "dataset", None) or cfg.get("dataset")
    if not path:
        raise FileNotFoundError("no dataset given (--dataset or config)")
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset not found: {path}")
    return cohort_mod.load_cohort(path)


def _format_inspection(report: dict) -> str:
    lines = [
        f"patients: {report['n_patients']}",
        f"samples:  {report['n_samples']} "
        f"({report['n_normal']} normal, {report['n_ud']} ud)",
        f"normal:ud ratio: {report['normal_to_ud_ratio']:.1f}:1",
        "per-patient counts:",
    ]
    for pid, counts in report["per_patient"].items():
        lines.append(f"  {pid}  normal={counts['normal']:4d}  ud={counts['ud']:3d}")
    return "\n".join(lines)


def cmd_generate(cfg: dict, args) -> int:
    run_dir = _run_dir(cfg, "generate")
    cohort = cohort_mod.generate_cohort(_generator_config(cfg))
    out_path = args.dataset or os.path.join(run_dir, "cohort.jsonl")
    cohort_mod.save_cohort(cohort, out_path)
    report = cohort_mod.inspect_cohort(cohort)
    with open(os.path.join(run_dir, "inspection.json"), "w",
              encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"wrote {out_path}")
    print(_format_inspection(report))
    return EXIT_OK


def _head_to_tree(head: pipeline.ClassifierHead) -> dict:
    return {"weights": head.weights.tolist(), "bias": head.bias.tolist()}


def _head_from_tree(tree: dict) -> pipeline.ClassifierHead:
    return pipeline.ClassifierHead(
        np.array(tree["weights"], dtype=np.float64),
        np.array(tree["bias"], dtype=np.float64))


def _split_dataset(cfg: dict, cohort):
    fractions = tuple(cfg["experiment"]["fractions"])
    return cohort_mod.split_by_patient(cohort, fractions,
                                       seed=cfg["experiment"]["split_seed"])


def _write_jsonl(path: str, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


def cmd_train(cfg: dict, args) -> int:
    run_dir = _run_dir(cfg, "train")
    cohort = _load_dataset(cfg, args)
    split = _split_dataset(cfg, cohort)
    train = split.subset(cohort, "train")
    val = split.subset(cohort, "validation")
    train_os = cohort_mod.oversample_minority(
        train, cfg["experiment"]["oversample_factor"])
    input_dim = len(train[0].features)
    mode = cfg["mode"]
    seed = cfg["seed"]
    emb_cfg = EmbedderConfig(input_dim, tuple(cfg["embedder"]["hidden_dims"]),
                             cfg["embedder"]["embedding_dim"], seed=seed)
    s2_cfg = pipeline.Stage2Config(cfg["stage2"]["epochs"],
                                   cfg["stage2"]["batch_size"],
                                   cfg["stage2"]["lr"], seed=seed)

    try:
        if mode == "baseline":
            params, s2 = pipeline.train_baseline(train_os, emb_cfg, s2_cfg,
                                                 val_samples=val)
            stage1_logs, state = [], None
            epochs_done = 0
        else:
            s1_cfg = pipeline.Stage1Config(
                mode=mode, embedder=emb_cfg,
                epochs=cfg["stage1"]["epochs"],
                batches_per_epoch=cfg["stage1"]["batches_per_epoch"],
                sampler=SamplerConfig(cfg["sampler"]["patients_per_batch"],
                                      cfg["sampler"]["samples_per_patient"],
                                      seed=seed),
                margins=MarginSet(cfg["margins"]["alpha"],
                                  cfg["margins"]["beta"]),
                lr=cfg["stage1"]["lr"], seed=seed,
                val_batches=cfg["stage1"]["val_batches"])
            init = None
            if args.checkpoint:
                if not os.path.exists(args.checkpoint):
                    raise FileNotFoundError(
                        f"checkpoint not found: {args.checkpoint}")
                prev_params, prev_state, extra = load_checkpoint(args.checkpoint)
                if prev_state is None:
                    raise CliConfigError(
                        f"checkpoint {args.checkpoint} has no optimizer state "
                        "to resume from")
                init = (prev_params, prev_state, extra.get("epochs_done", 0))
            params, stage1_logs, state = pipeline.train_stage1(
                train_os, s1_cfg, val_samples=val, init=init)
            epochs_done = stage1_logs[-1].epoch + 1 if stage1_logs else \
                (init[2] if init else 0)
            s2 = pipeline.train_stage2(params, train_os, s2_cfg,
                                       val_samples=val)
    except NumericError as exc:
        with open(os.path.join(run_dir, "diagnostic.json"), "w",
                  encoding="utf-8") as fh:
            json.dump({"error": str(exc), "mode": mode, "seed": seed},
                      fh, sort_keys=True, indent=2)
            fh.write("\n")
        raise

    save_checkpoint(
        os.path.join(run_dir, "checkpoint.json"), params,
        state=state,
        extra={"mode": mode, "config_hash": config_hash(cfg),
               "epochs_done": epochs_done,
               "head": _head_to_tree(s2.head),
               "stage2_best_epoch": s2.best_epoch})
    if mode != "baseline":
        _write_jsonl(os.path.join(run_dir, "stage1_log.jsonl"),
                     (rec.as_dict() for rec in stage1_logs))
    _write_jsonl(os.path.join(run_dir, "stage2_log.jsonl"), s2.logs)
    print(f"trained mode={mode}; artifacts in {run_dir}")
    return EXIT_OK


def _load_model(path: str):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    params, _, extra = load_checkpoint(path)
    if "head" not in extra:
        raise FileNotFoundError(f"checkpoint {path} carries no classifier head")
    return params, _head_from_tree(extra["head"]), extra


def cmd_evaluate(cfg: dict, args) -> int:
    run_dir = _run_dir(cfg, "evaluate")
    params, head, _ = _load_model(args.checkpoint)
    cohort = _load_dataset(cfg, args)
    split = _split_dataset(cfg, cohort)
    which = args.split
    samples = split.subset(cohort, which)
    preds = pipeline.predict(params, head, samples)
    metrics = evaluation.evaluate_predictions(
        [p for p, _ in preds], [lab for _, lab in preds],
        [s.label for s in samples], average=cfg["experiment"]["average"])
    doc = {"split": which, "n_samples": len(samples), "metrics": metrics}
    out_path = os.path.join(run_dir, f"metrics_{which}.json")
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(json.dumps(doc, sort_keys=True, indent=2))
    return EXIT_OK


def format_compare_table(reports: dict) -> str:
    headers = ["Method", "Specificity", "Sensitivity", "Recall",
               "Precision", "F1-score", "AUC", "Accuracy"]
    keys = list(evaluation.METRIC_ORDER)
    rows = []
    for mode, report in reports.items():
        cells = [mode]
        for key in keys:
            m = report.metrics[key]
            cells.append(f"{100 * m['mean']:.1f}±{100 * m['std']:.1f}")
        rows.append(cells)
    widths = [max(len(headers[i]), *(len(r[i]) for r in rows))
              for i in range(len(headers))]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(r) for r in rows)
    return "\n".join(lines) + "\n"


def cmd_compare(cfg: dict, args) -> int:
    run_dir = _run_dir(cfg, "compare")
    if getattr(args, "dataset", None) or cfg.get("dataset"):
        cohort = _load_dataset(cfg, args)
    else:
        cohort = cohort_mod.generate_cohort(_generator_config(cfg))
    exp_cfg = _experiment_config(cfg)
    reports = pipeline.run_experiment(cohort, exp_cfg)
    doc = {mode: report.as_dict() for mode, report in reports.items()}
    with open(os.path.join(run_dir, "compare.json"), "w",
              encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    table = format_compare_table(reports)
    with open(os.path.join(run_dir, "compare.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    return EXIT_OK


def cmd_export_embeddings(cfg: dict, args) -> int:
    run_dir = _run_dir(cfg, "export-embeddings")
    params, _, _ = _load_model(args.checkpoint)
    cohort = _load_dataset(cfg, args)
    if args.split:
        split = _split_dataset(cfg, cohort)
        samples = split.subset(cohort, args.split)
    else:
        samples = cohort
    out_path = os.path.join(run_dir, "embeddings.csv")
    evaluation.export_embeddings(params, samples, out_path)
    print(f"wrote {out_path} ({len(samples)} rows)")
    return EXIT_OK


def cmd_gradcheck(cfg: dict, args) -> int:
    run_dir = _run_dir(cfg, "gradcheck")
    g = cfg["gradcheck"]
    emb_cfg = EmbedderConfig(g["input_dim"], tuple(g["hidden_dims"]),
                             g["embedding_dim"], seed=0)
    tolerance = g["tolerance"]
    corrupt = bool(args.corrupt) or \
        os.environ.get("TIEREDQUAD_GRADCHECK_CORRUPT") == "1"
    results = []
    worst = 0.0
    for seed in g["seeds"]:
        err, layer, index = grad_check(emb_cfg, seed, corrupt=corrupt)
        results.append({"seed": seed, "max_rel_error": err,
                        "worst_layer": layer,
                        "worst_index": [str(i) for i in index]})
        worst = max(worst, err)
    passed = worst < tolerance
    doc = {"tolerance": tolerance, "passed": passed, "results": results}
    with open(os.path.join(run_dir, "gradcheck.json"), "w",
              encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    for res in results:
        print(f"seed {res['seed']}: max rel error {res['max_rel_error']:.3e} "
              f"(layer {res['worst_layer']}, index {res['worst_index']})")
    print(f"gradcheck {'PASS' if passed else 'FAIL'} "
          f"(worst {worst:.3e}, tolerance {tolerance:.1e})")
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tieredquad",
        description="patient-tiered quadruplet metric learning runs")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=None, help="TOML config file")
        p.add_argument("--seed", type=int, default=None, help="root seed")
        p.add_argument("--out", default=None, help="output root directory")

    p = sub.add_parser("generate", help="generate a synthetic cohort")
    add_common(p)
    p.add_argument("--dataset", default=None,
                   help="where to write the dataset file")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run stage 1 + stage 2 for one mode")
    add_common(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--mode", default=None,
                   choices=["baseline", *pipeline.MODES])
    p.add_argument("--checkpoint", default=None,
                   help="resume stage 1 from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    add_common(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test",
                   choices=["train", "validation", "test"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="mode comparison table")
    add_common(p)
    p.add_argument("--dataset", default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export-embeddings", help="embeddings CSV")
    add_common(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default=None,
                   choices=["train", "validation", "test"])
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    add_common(p)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, {
            "seed": args.seed,
            "out": args.out,
            "mode": getattr(args, "mode", None),
        })
        _validate_config(cfg)
        return args.func(cfg, args)
    except (CliConfigError, ConfigError, CohortError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def _validate_config(cfg: dict) -> None:
    fractions = cfg["experiment"]["fractions"]
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or \
            abs(sum(fractions) - 1.0) > 1e-9:
        raise CliConfigError(
            f"experiment.fractions must be three positives summing to 1, "
            f"got {fractions}")
    if cfg["experiment"]["average"] not in ("macro", "weighted"):
        raise CliConfigError("experiment.average must be macro or weighted")
    if cfg["mode"] not in ("baseline", *pipeline.MODES):
        raise CliConfigError(f"unknown mode {cfg['mode']!r}")


if __name__ == "__main__":
    sys.exit(main())
