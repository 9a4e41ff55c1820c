"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Configuration
precedence is flags, then the ``--config`` JSON file, then built-in
defaults; config keys are the ``ExperimentConfig`` field names.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__

log = logging.getLogger("mddllm")

# flag -> config key, for flags that override ExperimentConfig fields
CONFIG_FLAGS = {
    "n": int, "preset": str, "cohort_path": str, "schema": str, "template": str,
    "epochs": int, "peak_lr": float, "batch_size": int, "d_model": int, "n_layer": int, "n_head": int, "d_mlp": int,
    "pretrain_epochs": int, "pretrain_lr": float, "lora_r": int, "threshold": float,
    "n_resamples": int, "mask_mode": str, "crossval": str, "oversample_ratio": float,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="seed for all randomness (default 0)")
    p.add_argument("--threads", type=int, default=1, help="worker/thread cap; 1 is bit-reproducible")
    p.add_argument("--config", type=Path, help="JSON file of config keys")
    p.add_argument("--out", type=Path, help="output path; nothing is written elsewhere")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _config_flags(p: argparse.ArgumentParser, keys) -> None:
    for key in keys:
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=CONFIG_FLAGS[key], default=None)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="mddllm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mddllm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort CSV")
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--preset", default="strong-signal")
    p.add_argument("--schema", default="ukb16")

    p = sub.add_parser("ingest", parents=[common], help="validate a cohort and write its baseline table and split")
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--schema", default="ukb16")
    p.add_argument("--label-column", default="mdd")

    p = sub.add_parser("corpus", parents=[common], help="render a cohort into an instruction-tuning corpus")
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--schema", default="ukb16")
    p.add_argument("--template", default="text", choices=["list", "text", "narrative"])
    p.add_argument("--split", default="train", choices=["train", "test", "all"])
    p.add_argument("--retain", type=float, default=1.0, help="fraction of features kept per record")
    p.add_argument("--oversample", type=float, default=None, help="minority:majority ratio")

    p = sub.add_parser("train", parents=[common], help="pretrain a tiny base and fit a LoRA adapter")
    p.add_argument("--cohort", type=Path)
    p.add_argument("--quantized", action="store_true", help="fit the adapter on a 4-bit base")
    _config_flags(p, ["n", "preset", "schema", "template", "epochs", "peak_lr", "batch_size", "d_model",
                      "n_layer", "n_head", "d_mlp", "pretrain_epochs", "pretrain_lr", "lora_r", "oversample_ratio"])

    p = sub.add_parser("classify", parents=[common], help="score records with a trained model or remote endpoint")
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--model", type=Path, help="directory written by `train`")
    p.add_argument("--schema", default=None)
    p.add_argument("--template", default=None, choices=["list", "text", "narrative"])
    p.add_argument("--split", default="test", choices=["train", "test", "all"])
    p.add_argument("--no-adapter", action="store_true", help="score with the base model alone")
    p.add_argument("--remote-url", help="completions endpoint; enables the remote backend")
    p.add_argument("--remote-model")
    p.add_argument("--cache-dir", type=Path)
    p.add_argument("--api-key-env", default="MDDLLM_API_KEY")
    p.add_argument("--rationale", action="store_true", help="also request a free-text explanation")

    p = sub.add_parser("eval", parents=[common], help="metrics report for a scores CSV")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--n-resamples", type=int, default=1000)
    p.add_argument("--level", type=float, default=0.95)

    p = sub.add_parser("experiment", parents=[common], help="run a desk-scale study")
    p.add_argument("--name", choices=["main", "templates", "finetune", "missing"])
    p.add_argument("--manifest", type=Path, help="re-run exactly what a manifest describes")
    p.add_argument("--cache-dir", type=Path)
    p.add_argument("--seeds", type=int, nargs="+")
    _config_flags(p, ["n", "preset", "cohort_path", "schema", "template", "epochs", "peak_lr", "batch_size",
                      "d_model", "n_layer", "n_head", "d_mlp", "pretrain_epochs", "pretrain_lr", "lora_r", "threshold",
                      "n_resamples", "mask_mode", "crossval", "oversample_ratio"])

    p = sub.add_parser("export-features", parents=[common], help="feature matrix CSV for external learners")
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--schema", default="ukb16")
    p.add_argument("--split", default="all", choices=["train", "test", "all"])
    p.add_argument("--ids", action="store_true", help="include a patient_id column")

    p = sub.add_parser("report", parents=[common], help="render a report.json as an aligned table")
    p.add_argument("--input", type=Path, required=True)
    return parser


# ------------------------------------------------------------------ helpers

def _require_out(args) -> Path:
    if args.out is None:
        raise UsageError(f"mddllm {args.command}: error: --out is required")
    return args.out


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def _load_config_file(args) -> dict:
    if args.config is None:
        return {}
    try:
        data = json.loads(args.config.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"mddllm: error: cannot read config {args.config}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("mddllm: error: config file must hold a JSON object")
    return data


def _experiment_config(args, base: dict | None = None):
    from .experiments import ExperimentConfig, ExperimentError

    merged = {**(base or {}), **_load_config_file(args)}
    for key in CONFIG_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    if getattr(args, "cohort", None) is not None:
        merged["cohort_path"] = str(args.cohort)
    if getattr(args, "seeds", None):
        merged["seeds"] = list(args.seeds)
    if args.seed is not None:
        count = len(merged.get("seeds", ExperimentConfig().seeds))
        merged["seeds"] = [args.seed + i for i in range(count)]
    try:
        return ExperimentConfig.from_dict(merged)
    except (ExperimentError, TypeError, ValueError) as exc:
        raise UsageError(f"mddllm: error: {exc}") from None


def _split_ids(cohort, split: str, seed: int):
    from .cohort import make_splits

    if split == "all":
        return [r.patient_id for r in cohort.records]
    plan = make_splits(cohort, seed)
    return list(plan.train_ids if split == "train" else plan.test_ids)


def _load(path: Path, schema_name: str, label_column: str = "mdd"):
    from .cohort import load_cohort
    from .schema import resolve_schema

    return load_cohort(path, resolve_schema(schema_name), label_column)


def _write_run(out_dir: Path, args, extra: dict | None = None) -> None:
    info = {"command": args.command, "argv": sys.argv[1:], "seed": _seed(args), "threads": args.threads,
            "version": __version__, **(extra or {})}
    (out_dir / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True, default=str) + "\n")


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    from .schema import resolve_schema
    from .synth import preset, synth_cohort
    from .cohort import write_cohort

    out = _require_out(args)
    try:
        config = preset(args.preset, args.n)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"mddllm synth: error: {exc}") from None
    cohort = synth_cohort(config, _seed(args), resolve_schema(args.schema))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_cohort(cohort, out)
    log.info("wrote %d records to %s (oracle AUC %s)", len(cohort), out, cohort.provenance.get("oracle_auc"))
    return 0


def cmd_ingest(args) -> int:
    from .baseline import baseline_table
    from .cohort import make_splits, write_cohort

    out = _require_out(args)
    cohort = _load(args.cohort, args.schema, args.label_column)
    plan = make_splits(cohort, _seed(args))
    table = baseline_table(cohort)
    out.mkdir(parents=True, exist_ok=True)
    write_cohort(cohort, out / "cohort.csv")
    (out / "baseline.csv").write_text(table.to_csv(), encoding="utf-8")
    (out / "splits.json").write_text(json.dumps(plan.to_dict(), indent=2) + "\n", encoding="utf-8")
    _write_run(out, args, {"cohort_hash": cohort.content_hash(), "split_hash": plan.content_hash()})
    return 0


def cmd_corpus(args) -> int:
    from .promptgen import build_sft, mask_features, oversample, write_corpus
    from .schema import resolve_schema

    out = _require_out(args)
    seed = _seed(args)
    cohort = _load(args.cohort, args.schema)
    schema = resolve_schema(args.schema)
    records = cohort.subset(_split_ids(cohort, args.split, seed))
    if args.retain < 1.0:
        records = [mask_features(r, schema, args.retain, seed) for r in records]
    corpus = [build_sft(r, schema, args.template) for r in records]
    if args.oversample is not None:
        corpus = oversample(corpus, args.oversample, seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = write_corpus(corpus, out)
    log.info("wrote %d examples to %s", n, out)
    return 0


def cmd_train(args) -> int:
    from .experiments import Pipeline
    from .lm.checkpoint import save_adapter, save_base

    out = _require_out(args)
    config = _experiment_config(args)
    pipe = Pipeline(config, out, out / "cache")
    lm = pipe.train_lm(config.template, quantized=args.quantized)
    save_base(lm.base, out / "base.ckpt")
    save_adapter(lm.adapter, out / "adapter.ckpt")
    lm.tokenizer.save(out / "vocab.txt")
    info = {"config": config.to_dict(), "template": config.template, "split_seed": config.seed,
            "cohort_hash": pipe.cohort.content_hash(), "split_hash": pipe.split.content_hash(),
            "artifacts": lm.hashes, "history": lm.history.to_dict() if lm.history else None}
    (out / "train.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_run(out, args)
    return 0


def cmd_classify(args) -> int:
    from .backends import (HttpTransport, LocalBackend, RemoteBackend, classify_many,
                           classify_with_rationale, sft_prompt)
    from .promptgen import build_sft
    from .schema import resolve_schema

    out = _require_out(args)
    info = {}
    if args.model is not None:
        info = json.loads((args.model / "train.json").read_text(encoding="utf-8"))
    elif not args.remote_url:
        raise UsageError("mddllm classify: error: give --model or --remote-url")
    schema_name = args.schema or info.get("config", {}).get("schema", "ukb16")
    template = args.template or info.get("template", "text")
    seed = _seed(args, info.get("split_seed", 0))
    cohort = _load(args.cohort, schema_name)
    schema = resolve_schema(schema_name)
    records = cohort.subset(_split_ids(cohort, args.split, seed))
    corpus = [build_sft(r, schema, template, require_label=False) for r in records]
    prompts = [sft_prompt(e.instruction, e.input) for e in corpus]
    if args.remote_url:
        if not args.remote_model:
            raise UsageError("mddllm classify: error: --remote-model is required with --remote-url")
        transport = HttpTransport(args.cache_dir, api_key_env=args.api_key_env)
        backend = RemoteBackend(args.remote_url, args.remote_model, transport, concurrency=max(1, args.threads))
    else:
        from .lm.checkpoint import load_adapter, load_base
        from .lm.tokenizer import Tokenizer

        adapter = None if args.no_adapter else load_adapter(args.model / "adapter.ckpt")
        backend = LocalBackend(load_base(args.model / "base.ckpt"), Tokenizer.load(args.model / "vocab.txt"), adapter)
    scores = classify_many(backend, prompts)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["patient_id,score,label,loglik_yes,loglik_no"]
    for r, s in zip(records, scores):
        label = "" if r.label is None else ("1" if r.label.value == "MDD" else "0")
        lines.append(f"{r.patient_id},{s.p_yes!r},{label},{s.loglik_yes!r},{s.loglik_no!r}")
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if args.rationale:
        with open(out.with_suffix(".rationale.jsonl"), "w", encoding="utf-8") as fh:
            for r, prompt in zip(records, prompts):
                score, rat = classify_with_rationale(backend, prompt)
                fh.write(json.dumps({"patient_id": r.patient_id, "p_yes": score.p_yes, "prediction": rat.prediction,
                                     "text": rat.free_text, "parsed_probability": rat.parsed_probability}) + "\n")
    return 0


def cmd_eval(args) -> int:
    from .metrics import ScoredSet, evaluate, roc_auc

    out = _require_out(args)
    scored = ScoredSet.from_csv(args.scores.read_text(encoding="utf-8"))
    report = evaluate(scored.scores, scored.labels, args.threshold, args.n_resamples, args.level, _seed(args))
    curve, _ = roc_auc(scored.scores, scored.labels)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "roc.csv").write_text(curve.to_csv(), encoding="utf-8")
    return 0


def cmd_experiment(args) -> int:
    from .experiments import rerun_from_manifest, run_experiment

    out = _require_out(args)
    if args.manifest is not None:
        report = rerun_from_manifest(args.manifest, out, args.cache_dir, args.threads)
    else:
        base = {"experiment": args.name} if args.name else {}
        config = _experiment_config(args, base)
        report = run_experiment(config, out, args.cache_dir, args.threads)
    sys.stdout.write(report.to_text())
    return 0


def cmd_export_features(args) -> int:
    from .baselines import feature_matrix_csv, fit_featurizer

    out = _require_out(args)
    seed = _seed(args)
    cohort = _load(args.cohort, args.schema)
    train_ids = _split_ids(cohort, "train", seed)
    featurizer = fit_featurizer(cohort, train_ids)
    records = cohort.subset(_split_ids(cohort, args.split, seed))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(feature_matrix_csv(featurizer, records, include_ids=args.ids), encoding="utf-8")
    return 0


def cmd_report(args) -> int:
    from .experiments import ExperimentReport
    from .metrics import MetricReport

    data = json.loads(args.input.read_text(encoding="utf-8"))
    if "rows" in data:
        text = ExperimentReport.from_json(json.dumps(data)).to_text(include_timings=bool(data.get("timings")))
    else:
        text = MetricReport.from_dict(data).to_text()
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "corpus": cmd_corpus, "train": cmd_train,
    "classify": cmd_classify, "eval": cmd_eval, "experiment": cmd_experiment,
    "export-features": cmd_export_features, "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads < 1:
            raise UsageError("mddllm: error: --threads must be at least 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    import torch

    torch.set_num_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except Exception as exc:  # component failure
        if args.verbose:
            log.exception("command failed")
        print(f"mddllm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
