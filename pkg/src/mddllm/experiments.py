"""Seeded desk-scale experiment pipelines and their reports.

Four studies share one pipeline: build a cohort and split, render prompts,
pretrain a tiny base on the training prompts (no answers), fit a LoRA
adapter, and score the held-out records next to logistic regression and an
MLP.  Every run writes

    report.txt / report.json   metrics table (deterministic body)
    timings.json               wall-clock seconds per row (not part of the body)
    manifest.json              config, seeds and every artifact hash
    roc/<row>.csv, scores/<row>.csv

Trained checkpoints are cached by content key so related experiments reuse
the same model.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .backends import LocalBackend, classify_many, sft_prompt
from .baselines import Featurizer, MlpConfig, labels_of, train_logreg, train_mlp
from .cohort import Cohort, Record, load_cohort, make_splits
from .lm.checkpoint import file_hash, load_adapter, load_base, save_adapter, save_base
from .lm.lora import LoraAdapter, LoraConfig
from .lm.model import ModelConfig, ModelParams, init_params, quantize_base
from .lm.tokenizer import Tokenizer, build_vocab
from .lm.train import TrainConfig, TrainHistory, final_loss, prompt_text, pretrain_base, train_sft
from .metrics import (METRIC_KEYS, MetricReport, crossval_aggregate, evaluate, roc_auc,
                      youden_threshold)
from .promptgen import (ANSWERS, SftRecord, TemplateKind, build_sft, corpus_hash,
                        mask_features, oversample)
from .schema import resolve_schema
from .synth import preset, synth_cohort

log = logging.getLogger(__name__)

EXPERIMENTS = ("main", "templates", "finetune", "missing")
MASK_MODES = ("eval", "train")


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat key namespace shared by config files, CLI flags and manifests."""

    experiment: str = "main"
    preset: str = "strong-signal"
    n: int = 5000
    cohort_path: str | None = None
    schema: str = "ukb16"
    template: str = "text"
    seeds: tuple[int, ...] = (0, 1, 2)
    # tiny LM
    d_model: int = 64
    n_layer: int = 2
    n_head: int = 4
    d_mlp: int = 256
    context_len: int = 512
    pretrain_lr: float = 3e-3
    pretrain_epochs: int = 1
    peak_lr: float = 1e-2
    epochs: int = 5
    batch_size: int = 16
    warmup_fraction: float = 0.1
    weight_decay: float = 0.1
    lora_r: int = 8
    lora_alpha: float = 16.0
    lora_targets: tuple[str, ...] = ("q", "v")
    oversample_ratio: float = 1.0
    # baselines
    logreg_l2: float = 1e-3
    mlp_hidden: tuple[int, ...] = (64, 64)
    mlp_lr: float = 1e-3
    mlp_epochs: int = 30
    # evaluation
    threshold: float = 0.5
    threshold_mode: str = "fixed"
    n_resamples: int = 1000
    crossval: str = "baselines"
    # missing-data study
    retain_ratios: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0)
    mask_mode: str = "eval"
    # quantized-base study
    memorize_steps: int = 200
    memorize_lr: float = 2e-2

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ExperimentError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if not self.seeds:
            raise ExperimentError("seeds must be non-empty")
        if self.mask_mode not in MASK_MODES:
            raise ExperimentError(f"mask_mode must be one of {MASK_MODES}")
        if self.threshold_mode not in ("fixed", "youden"):
            raise ExperimentError("threshold_mode must be 'fixed' or 'youden'")
        if self.crossval not in ("none", "baselines", "all"):
            raise ExperimentError("crossval must be 'none', 'baselines' or 'all'")
        TemplateKind(self.template)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ExperimentError(f"unknown config keys {sorted(unknown)}")
        clean = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**clean)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def content_hash(self) -> str:
        return _hash_json(self.to_dict())

    @property
    def seed(self) -> int:
        return self.seeds[0]

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size, self.n_layer, self.n_head, self.d_model, self.d_mlp, self.context_len)

    def pretrain_config(self) -> TrainConfig:
        return TrainConfig(peak_lr=self.pretrain_lr, epochs=self.pretrain_epochs, batch_size=self.batch_size,
                           warmup_fraction=self.warmup_fraction, weight_decay=self.weight_decay, seed=self.seed)

    def sft_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(peak_lr=self.peak_lr, epochs=self.epochs, batch_size=self.batch_size,
                           warmup_fraction=self.warmup_fraction, weight_decay=self.weight_decay,
                           seed=self.seed if seed is None else seed)

    def lora_config(self) -> LoraConfig:
        return LoraConfig(r=self.lora_r, alpha=self.lora_alpha, targets=self.lora_targets)

    def mlp_config(self) -> MlpConfig:
        return MlpConfig(hidden=self.mlp_hidden, lr=self.mlp_lr, epochs=self.mlp_epochs)


def _hash_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# ----------------------------------------------------------------- reports

@dataclass(frozen=True)
class Row:
    name: str
    values: dict[str, float]
    auc_ci: tuple[float, float, float] | None = None
    extras: dict[str, object] = field(default_factory=dict)

    @classmethod
    def from_report(cls, name: str, report: MetricReport, **extras) -> "Row":
        return cls(name, report.values(), report.auc_ci, dict(extras))

    def to_dict(self) -> dict:
        return {"name": self.name, "values": self.values,
                "auc_ci": list(self.auc_ci) if self.auc_ci else None, "extras": self.extras}

    @classmethod
    def from_dict(cls, d: dict) -> "Row":
        return cls(d["name"], d["values"], tuple(d["auc_ci"]) if d.get("auc_ci") else None, d.get("extras", {}))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


@dataclass
class ExperimentReport:
    experiment: str
    rows: list[Row]
    manifest: dict
    timings: dict[str, float] = field(default_factory=dict)

    def row(self, name: str) -> Row:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def body(self) -> dict:
        """Everything except wall-clock timings: the reproducible part."""
        return {"experiment": self.experiment, "rows": [r.to_dict() for r in self.rows]}

    def body_json(self) -> str:
        return json.dumps(self.body(), indent=2, sort_keys=True) + "\n"

    def to_json(self) -> str:
        return json.dumps({**self.body(), "timings": self.timings}, indent=2, sort_keys=True) + "\n"

    def to_text(self, include_timings: bool = False) -> str:
        extra_cols = []
        for r in self.rows:
            extra_cols += [k for k in r.extras if k not in extra_cols]
        header = ["Method", *(k.upper() if k != "sens" else "SEN" for k in METRIC_KEYS), "AUC 95% CI", *extra_cols]
        if include_timings:
            header.append("wall_s")
        body = []
        for r in self.rows:
            ci = f"{r.auc_ci[0]:.4f} - {r.auc_ci[1]:.4f}" if r.auc_ci else ""
            line = [r.name, *(f"{r.values[k]:.4f}" for k in METRIC_KEYS), ci,
                    *(_fmt(r.extras.get(c, "")) for c in extra_cols)]
            if include_timings:
                line.append(f"{self.timings.get(r.name, float('nan')):.1f}")
            body.append(line)
        widths = [max(len(x[i]) for x in [header, *body]) for i in range(len(header))]
        fmt = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                                      for i, (c, w) in enumerate(zip(cells, widths))).rstrip()
        return "\n".join([f"# {self.experiment}", fmt(header), "  ".join("-" * w for w in widths),
                          *map(fmt, body)]) + "\n"

    @classmethod
    def from_json(cls, text: str, manifest: dict | None = None) -> "ExperimentReport":
        d = json.loads(text)
        return cls(d["experiment"], [Row.from_dict(r) for r in d["rows"]], manifest or {}, d.get("timings", {}))

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(self.to_text(), encoding="utf-8")
        (out / "report.json").write_text(self.body_json(), encoding="utf-8")
        (out / "timings.json").write_text(json.dumps(self.timings, indent=2, sort_keys=True) + "\n")
        (out / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- pipeline

@dataclass
class TrainedLM:
    base: ModelParams
    adapter: LoraAdapter | None
    tokenizer: Tokenizer
    template: str
    history: TrainHistory | None
    wall_seconds: float
    hashes: dict[str, str]


class Pipeline:
    """Shared state for one experiment: cohort, split, artifact cache and manifest."""

    def __init__(self, config: ExperimentConfig, out_dir: str | Path, cache_dir: str | Path | None = None):
        self.config = config
        self.out = Path(out_dir)
        self.cache = Path(cache_dir) if cache_dir else self.out / "cache"
        self.schema = resolve_schema(config.schema)
        self.cohort = self._load_cohort()
        self.split = make_splits(self.cohort, config.seed)
        self.train_records = self.cohort.subset(self.split.train_ids)
        self.test_records = self.cohort.subset(self.split.test_ids)
        self.y_test = labels_of(self.test_records)
        self.artifacts: dict[str, object] = {}
        self.scores: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def _load_cohort(self) -> Cohort:
        c = self.config
        if c.cohort_path:
            return load_cohort(c.cohort_path, self.schema)
        return synth_cohort(preset(c.preset, c.n), c.seed, self.schema)

    # -- manifest

    def manifest(self, extra: dict | None = None) -> dict:
        return {
            "experiment": self.config.experiment,
            "config": self.config.to_dict(),
            "config_hash": self.config.content_hash(),
            "cohort_hash": self.cohort.content_hash(),
            "cohort_provenance": self.cohort.provenance,
            "split_hash": self.split.content_hash(),
            "seeds": list(self.config.seeds),
            "artifacts": self.artifacts,
            "package_version": __version__,
            "torch_version": torch.__version__,
            "numpy_version": np.__version__,
            **(extra or {}),
        }

    # -- language model

    def corpus(self, records: Sequence[Record], template: str) -> list[SftRecord]:
        return [build_sft(r, self.schema, template) for r in records]

    def train_lm(self, template: str, train_records: Sequence[Record] | None = None,
                 quantized: bool = False, seed: int | None = None, use_adapter_cache: bool = True,
                 tag: str = "") -> TrainedLM:
        cfg = self.config
        seed = cfg.seed if seed is None else seed
        records = self.train_records if train_records is None else train_records
        corpus = self.corpus(records, template)
        c_hash = corpus_hash(corpus)
        texts = [prompt_text(e.instruction, e.input) for e in corpus]
        tokenizer = build_vocab([*texts, *ANSWERS])
        model_cfg = cfg.model_config(len(tokenizer))
        pre_cfg = cfg.pretrain_config()
        base_key = _hash_json({"corpus": c_hash, "vocab": tokenizer.content_hash(), "model": asdict(model_cfg),
                               "pretrain": asdict(pre_cfg)})[:20]
        base_path = self.cache / f"base-{base_key}.ckpt"
        vocab_path = self.cache / f"vocab-{base_key}.txt"
        if base_path.exists():
            base = load_base(base_path)
        else:
            log.info("pretraining base %s on %d prompts", base_key, len(texts))
            base, _ = pretrain_base(init_params(model_cfg, seed=cfg.seed), texts, tokenizer, pre_cfg)
            save_base(base, base_path)
            tokenizer.save(vocab_path)
        if quantized:
            base = quantize_base(base)

        balanced = oversample(corpus, cfg.oversample_ratio, seed) if cfg.oversample_ratio else list(corpus)
        sft_cfg = cfg.sft_config(seed)
        lora_cfg = cfg.lora_config()
        ad_key = _hash_json({"base": base_key, "quantized": quantized, "corpus": corpus_hash(balanced),
                             "sft": asdict(sft_cfg), "lora": asdict(lora_cfg)})[:20]
        ad_path = self.cache / f"adapter-{ad_key}.ckpt"
        history = None
        start = time.perf_counter()
        if use_adapter_cache and ad_path.exists():
            adapter = load_adapter(ad_path)
        else:
            log.info("fine-tuning adapter %s on %d examples", ad_key, len(balanced))
            adapter, history = train_sft(base, balanced, tokenizer, sft_cfg, lora_cfg)
            save_adapter(adapter, ad_path)
        wall = time.perf_counter() - start
        hashes = {"corpus_hash": c_hash, "train_corpus_hash": corpus_hash(balanced),
                  "vocab_hash": tokenizer.content_hash(), "base_checkpoint": file_hash(base_path),
                  "adapter_checkpoint": file_hash(ad_path), "template": template, "seed": seed,
                  "quantized": quantized}
        self.artifacts[tag or f"lm-{template}{'-q4' if quantized else ''}"] = hashes
        return TrainedLM(base, adapter, tokenizer, template, history, wall, hashes)

    def lm_scores(self, lm: TrainedLM, records: Sequence[Record], use_adapter: bool = True) -> np.ndarray:
        backend = LocalBackend(lm.base, lm.tokenizer, lm.adapter if use_adapter else None)
        prompts = [sft_prompt(e.instruction, e.input) for e in self.corpus(records, lm.template)]
        return np.array([s.p_yes for s in classify_many(backend, prompts)])

    # -- baselines

    def baseline_models(self, train_records: Sequence[Record] | None = None):
        records = self.train_records if train_records is None else train_records
        feat = Featurizer(self.schema).fit(records)
        x, y = feat.transform(records), labels_of(records)
        logreg = train_logreg(x, y, self.config.logreg_l2, self.config.seed)
        mlp = train_mlp(x, y, self.config.mlp_config(), self.config.seed)
        return feat, logreg, mlp

    # -- evaluation

    def threshold_for(self, train_scores_fn) -> float:
        if self.config.threshold_mode == "fixed":
            return self.config.threshold
        scores = train_scores_fn()
        return youden_threshold(scores, labels_of(self.train_records))

    def evaluate(self, name: str, scores: np.ndarray, threshold: float | None = None,
                 labels: np.ndarray | None = None) -> MetricReport:
        labels = self.y_test if labels is None else labels
        self.scores[name] = (scores, labels)
        t = self.config.threshold if threshold is None else threshold
        return evaluate(scores, labels, t, self.config.n_resamples, seed=self.config.seed)

    def write_curves(self) -> None:
        for name, (scores, labels) in self.scores.items():
            curve, _ = roc_auc(scores, labels)
            (self.out / "roc").mkdir(parents=True, exist_ok=True)
            (self.out / "roc" / f"{name}.csv").write_text(curve.to_csv(), encoding="utf-8")
            (self.out / "scores").mkdir(parents=True, exist_ok=True)
            ids = self.split.test_ids if len(scores) == len(self.split.test_ids) else range(len(scores))
            lines = ["patient_id,score,label"] + [f"{i},{float(s)!r},{int(y)}" for i, s, y in zip(ids, scores, labels)]
            (self.out / "scores" / f"{name}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _baseline_cv(pipe: Pipeline) -> dict[str, str]:
    """Five-fold CV AUC (mean ± sd) for the two tabular baselines on the training partition."""
    cfg = pipe.config
    out = {}
    reports: dict[str, list[MetricReport]] = {"logreg": [], "mlp": []}
    for k in range(len(pipe.split.folds)):
        tr_ids, va_ids = pipe.split.fold_split(k)
        tr, va = pipe.cohort.subset(tr_ids), pipe.cohort.subset(va_ids)
        feat, logreg, mlp = pipe.baseline_models(tr)
        xv, yv = feat.transform(va), labels_of(va)
        for name, model in (("logreg", logreg), ("mlp", mlp)):
            reports[name].append(evaluate(model.predict_proba(xv), yv, cfg.threshold, n_resamples=200,
                                          seed=cfg.seed))
    for name, reps in reports.items():
        agg = crossval_aggregate(reps)
        out[name] = f"{agg.mean['auc']:.4f} ± {agg.sd['auc']:.4f}"
    return out


def _lm_cv(pipe: Pipeline, template: str) -> str:
    reps = []
    for k in range(len(pipe.split.folds)):
        tr_ids, va_ids = pipe.split.fold_split(k)
        tr, va = pipe.cohort.subset(tr_ids), pipe.cohort.subset(va_ids)
        lm = pipe.train_lm(template, tr, tag=f"lm-{template}-fold{k}")
        reps.append(evaluate(pipe.lm_scores(lm, va), labels_of(va), pipe.config.threshold, 200,
                             seed=pipe.config.seed))
    agg = crossval_aggregate(reps)
    return f"{agg.mean['auc']:.4f} ± {agg.sd['auc']:.4f}"


# ------------------------------------------------------------- experiments

def exp_main(config: ExperimentConfig, out_dir, cache_dir=None) -> ExperimentReport:
    """Fine-tuned LM, the same base without fine-tuning, logistic regression and MLP on one split."""
    pipe = Pipeline(config, out_dir, cache_dir)
    timings = {}
    lm = pipe.train_lm(config.template)
    timings["lm-finetuned"] = lm.wall_seconds

    thr_ft = pipe.threshold_for(lambda: pipe.lm_scores(lm, pipe.train_records))
    rep_ft = pipe.evaluate("lm-finetuned", pipe.lm_scores(lm, pipe.test_records), thr_ft)
    thr_zs = pipe.threshold_for(lambda: pipe.lm_scores(lm, pipe.train_records, use_adapter=False))
    rep_zs = pipe.evaluate("lm-base", pipe.lm_scores(lm, pipe.test_records, use_adapter=False), thr_zs)
    timings["lm-base"] = 0.0

    start = time.perf_counter()
    feat, logreg, mlp = pipe.baseline_models()
    timings["logreg"] = timings["mlp"] = time.perf_counter() - start
    x_train, x_test = feat.transform(pipe.train_records), feat.transform(pipe.test_records)
    rep_lr = pipe.evaluate("logreg", logreg.predict_proba(x_test),
                           pipe.threshold_for(lambda: logreg.predict_proba(x_train)))
    rep_mlp = pipe.evaluate("mlp", mlp.predict_proba(x_test), pipe.threshold_for(lambda: mlp.predict_proba(x_train)))

    cv = _baseline_cv(pipe) if config.crossval != "none" else {}
    if config.crossval == "all":
        cv["lm-finetuned"] = _lm_cv(pipe, config.template)
    trainable = lm.adapter.nbytes()
    rows = [
        Row.from_report("lm-finetuned", rep_ft, trainable_bytes=trainable, cv_auc=cv.get("lm-finetuned", "")),
        Row.from_report("lm-base", rep_zs, trainable_bytes=0, cv_auc=""),
        Row.from_report("logreg", rep_lr, trainable_bytes=(feat.dim + 1) * 8, cv_auc=cv.get("logreg", "")),
        Row.from_report("mlp", rep_mlp, trainable_bytes=sum(w.nbytes for w in mlp.weights + mlp.biases),
                        cv_auc=cv.get("mlp", "")),
    ]
    if config.crossval == "none":
        rows = [replace(r, extras={k: v for k, v in r.extras.items() if k != "cv_auc"}) for r in rows]
    pipe.write_curves()
    return ExperimentReport("main", rows, pipe.manifest(), timings)


def exp_templates(config: ExperimentConfig, out_dir, cache_dir=None) -> ExperimentReport:
    """One fine-tuning run per prompt template; everything else held fixed."""
    pipe = Pipeline(config, out_dir, cache_dir)
    rows, timings = [], {}
    for kind in TemplateKind:
        lm = pipe.train_lm(kind.value)
        name = f"lm-{kind.value}"
        rep = pipe.evaluate(name, pipe.lm_scores(lm, pipe.test_records))
        rows.append(Row.from_report(name, rep, seed=lm.hashes["seed"], corpus=lm.hashes["corpus_hash"][:12]))
        timings[name] = lm.wall_seconds
    pipe.write_curves()
    return ExperimentReport("templates", rows, pipe.manifest(), timings)


def memorization_loss(base: ModelParams, tokenizer: Tokenizer, example: SftRecord, steps: int,
                      lr: float, seed: int, lora: LoraConfig) -> tuple[float, TrainHistory]:
    cfg = TrainConfig(peak_lr=lr, epochs=steps, batch_size=1, seed=seed, max_steps=steps)
    adapter, history = train_sft(base, [example], tokenizer, cfg, lora)
    return final_loss(base, adapter, [example], tokenizer), history


def exp_finetune(config: ExperimentConfig, out_dir, cache_dir=None) -> ExperimentReport:
    """LoRA on the full-precision base against LoRA on its 4-bit quantization."""
    pipe = Pipeline(config, out_dir, cache_dir)
    rows, timings, reports = [], {}, {}
    example = pipe.corpus(pipe.train_records[:1], config.template)[0]
    for quantized in (False, True):
        name = "lora-q4" if quantized else "lora"
        lm = pipe.train_lm(config.template, quantized=quantized, use_adapter_cache=False)
        timings[name] = lm.wall_seconds
        reports[name] = pipe.evaluate(name, pipe.lm_scores(lm, pipe.test_records))
        start = time.perf_counter()
        mem_loss, _ = memorization_loss(lm.base, lm.tokenizer, example, config.memorize_steps,
                                        config.memorize_lr, config.seed, config.lora_config())
        timings[f"{name}-memorize"] = time.perf_counter() - start
        dense = lm.base.dense().nbytes()
        rows.append(Row.from_report(
            name, reports[name], base_bytes=lm.base.nbytes(), dense_bytes=dense,
            memory_ratio=lm.base.nbytes() / dense, trainable_bytes=lm.adapter.nbytes(),
            final_epoch_loss=lm.history.epoch_mean_loss()[-1], memorize_loss=mem_loss))
    delta = abs(reports["lora"].acc - reports["lora-q4"].acc)
    rows[1] = replace(rows[1], extras={**rows[1].extras, "acc_delta": delta})
    pipe.write_curves()
    return ExperimentReport("finetune", rows, pipe.manifest(), timings)


def exp_missing(config: ExperimentConfig, out_dir, cache_dir=None) -> ExperimentReport:
    """Performance of each method as features are randomly withheld.

    In ``eval`` mode the models are trained once on complete records and each
    seed masks the held-out inputs; in ``train`` mode the training records
    are masked with the same ratio and the models refitted per ratio.
    Rows report means over seeds; ``auc_sd`` is their sample standard deviation.
    """
    pipe = Pipeline(config, out_dir, cache_dir)
    rows, timings = [], {}
    per_seed: dict[str, dict[str, list[float]]] = {}
    fixed = None
    if config.mask_mode == "eval":
        fixed = (pipe.train_lm(config.template), *pipe.baseline_models())
    for ratio in config.retain_ratios:
        results: dict[str, list[MetricReport]] = {"lm": [], "logreg": [], "mlp": []}
        for seed in config.seeds:
            masked_test = [mask_features(r, pipe.schema, ratio, seed) for r in pipe.test_records]
            if fixed is None:
                masked_train = [mask_features(r, pipe.schema, ratio, seed) for r in pipe.train_records]
                lm = pipe.train_lm(config.template, masked_train, tag=f"lm-retain{ratio}-seed{seed}")
                feat, logreg, mlp = pipe.baseline_models(masked_train)
            else:
                lm, feat, logreg, mlp = fixed
            x = feat.transform(masked_test)
            for name, scores in (("lm", pipe.lm_scores(lm, masked_test)),
                                 ("logreg", logreg.predict_proba(x)), ("mlp", mlp.predict_proba(x))):
                rep = evaluate(scores, pipe.y_test, config.threshold, config.n_resamples, seed=config.seed)
                results[name].append(rep)
        for name, reps in results.items():
            agg = crossval_aggregate(reps)
            row_name = f"{name}@{ratio:g}"
            ci = tuple(float(np.mean([r.auc_ci[i] for r in reps])) for i in range(3))
            rows.append(Row(row_name, agg.mean, ci, {"retain": ratio, "auc_sd": agg.sd["auc"] or 0.0,
                                                     "auc_per_seed": " ".join(f"{r.auc:.4f}" for r in reps)}))
            per_seed.setdefault(name, {})[f"{ratio:g}"] = [r.auc for r in reps]
    return ExperimentReport("missing", rows, pipe.manifest({"auc_per_seed": per_seed}), timings)


RUNNERS = {"main": exp_main, "templates": exp_templates, "finetune": exp_finetune, "missing": exp_missing}


def run_experiment(config: ExperimentConfig, out_dir, cache_dir=None, threads: int = 1) -> ExperimentReport:
    torch.set_num_threads(threads)
    report = RUNNERS[config.experiment](config, out_dir, cache_dir)
    report.write(out_dir)
    return report


def rerun_from_manifest(manifest_path, out_dir, cache_dir=None, threads: int = 1) -> ExperimentReport:
    """Re-run the experiment a manifest describes and check its input hashes still match."""
    recorded = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    config = ExperimentConfig.from_dict(recorded["config"])
    report = run_experiment(config, out_dir, cache_dir, threads)
    for key in ("config_hash", "cohort_hash", "split_hash"):
        if report.manifest[key] != recorded[key]:
            raise ExperimentError(f"{key} differs from the manifest: inputs have changed")
    return report


def missing_trend(report: ExperimentReport, method: str = "lm") -> list[tuple[float, float]]:
    """(retain ratio, mean AUC) pairs for one method, in ratio order."""
    pts = [(float(r.extras["retain"]), r.values["auc"]) for r in report.rows if r.name.startswith(method + "@")]
    return sorted(pts)
