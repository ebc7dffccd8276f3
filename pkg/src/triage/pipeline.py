"""Experiment pipelines behind the command-line interface.

An experiment config (YAML) names a dataset source, one model family, and
evaluation settings. Every command writes its artifacts plus a
``manifest.json`` (config hash, seed, code version) under the output
directory. Nothing here records wall-clock timestamps, so re-running a
command with the same manifest reproduces its reports byte for byte.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import pickle
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .corpus import (
    DatasetError,
    GeneratorSpec,
    generate_corpus,
    load_bank,
    load_dataset,
    load_tree,
    save_bank,
    save_tree,
    split_dataset,
    write_dataset,
)
from .ecd import ConfigError, EcdModel, build_model, parse_config, train
from .ecd.decoders import SoftmaxDecoder, TreePathDecoder
from .evaluation import evaluate, prediction_records, write_f1_table, write_predictions
from .forest import ForestConfig
from .rank import V1Config, fit_text_models, fit_v1

log = logging.getLogger(__name__)

FAMILIES = ("v1-classification", "v1-ranking", "v2-ecd")
TASKS = ("contact_type", "reply_template")
FORMAT_SUFFIX = {"json-lines": "jsonl", "delimited": "csv"}


class TrainingError(RuntimeError):
    """Model fitting failed."""


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str
    dataset: dict
    model: dict
    evaluation: dict
    hyperopt: dict
    raw: dict

    @property
    def family(self) -> str:
        return self.model["family"]

    def hash(self) -> str:
        """Digest of everything that affects results; the output directory does not."""
        content = {k: v for k, v in self.raw.items() if k != "output_dir"}
        canon = json.dumps(content, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def _section(raw, key, path_prefix="") -> dict:
    v = raw.get(key) or {}
    if not isinstance(v, dict):
        raise ConfigError(path_prefix + key, "expected a mapping")
    return dict(v)


def parse_experiment(raw: dict, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    """Validate an experiment config; ``seed`` and ``out`` override the file."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "experiment config must be a mapping")
    raw = copy.deepcopy(raw)
    known = {"seed", "output_dir", "dataset", "model", "evaluation", "hyperopt"}
    for k in raw:
        if k not in known:
            raise ConfigError(k, "unknown section")
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["output_dir"] = out
    raw.setdefault("seed", 0)
    raw.setdefault("output_dir", "runs/default")
    if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
        raise ConfigError("seed", f"expected an integer, got {raw['seed']!r}")

    ds = _section(raw, "dataset")
    source = ds.get("source", "generate")
    if source not in ("generate", "load"):
        raise ConfigError("dataset.source", f"expected 'generate' or 'load', got {source!r}")
    if source == "generate":
        gen = ds.get("generator") or {}
        try:
            GeneratorSpec.from_dict(gen)
        except (TypeError, ValueError) as e:
            raise ConfigError("dataset.generator", str(e)) from None
    else:
        for k in ("path",):
            if k not in ds:
                raise ConfigError(f"dataset.{k}", "required when source is 'load'")
        if ds.get("format", "json-lines") not in FORMAT_SUFFIX:
            raise ConfigError("dataset.format", f"unknown format {ds.get('format')!r}")
    split = ds.get("split", [0.8, 0.1, 0.1])
    if not isinstance(split, list) or len(split) != 3:
        raise ConfigError("dataset.split", "expected three fractions")

    model = _section(raw, "model")
    family = model.get("family")
    if family not in FAMILIES:
        raise ConfigError("model.family", f"expected one of {list(FAMILIES)}, got {family!r}")
    if family == "v2-ecd":
        if "ecd" not in model:
            raise ConfigError("model.ecd", "required for the v2-ecd family")
        _parse_model(model["ecd"])
    else:
        v1 = model.get("v1") or {}
        _v1_config(v1, family)
        tasks = model.get("tasks", list(TASKS))
        for i, t in enumerate(tasks):
            if t not in TASKS:
                raise ConfigError(f"model.tasks[{i}]", f"unknown task {t!r}")
    ev = _section(raw, "evaluation")
    top_k = ev.get("top_k", 3)
    if not isinstance(top_k, int) or top_k < 1:
        raise ConfigError("evaluation.top_k", f"expected a positive integer, got {top_k!r}")
    hyper = _section(raw, "hyperopt")
    return ExperimentConfig(raw["seed"], str(raw["output_dir"]), ds, model, ev, hyper, raw)


def _parse_model(ecd: dict):
    try:
        return parse_config(ecd)
    except ConfigError as e:
        raise ConfigError(f"model.ecd.{e.path}", str(e).split(": ", 1)[1]) from None


def _v1_config(v1: dict, family: str) -> V1Config:
    v1 = dict(v1)
    allowed = {f.name for f in fields(V1Config)} - {"mode"}
    for k in v1:
        if k not in allowed:
            raise ConfigError(f"model.v1.{k}", "unknown option")
    forest = v1.pop("forest", {}) or {}
    try:
        fc = ForestConfig(**forest)
    except TypeError as e:
        raise ConfigError("model.v1.forest", str(e)) from None
    except ValueError as e:
        raise ConfigError("model.v1.forest", str(e)) from None
    mode = "ranking" if family == "v1-ranking" else "classification"
    return V1Config(mode=mode, forest=fc, **v1)


def load_experiment(path, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError("<file>", f"not valid YAML ({e})") from None
    return parse_experiment(raw, seed, out)


# -- data ---------------------------------------------------------------------

def build_dataset(cfg: ExperimentConfig):
    """``(tree, bank, data)`` from the generator or from files."""
    ds = cfg.dataset
    if ds.get("source", "generate") == "generate":
        return generate_corpus(GeneratorSpec.from_dict(ds.get("generator") or {}), cfg.seed)
    tree = load_tree(ds["tree"]) if ds.get("tree") else None
    bank = load_bank(ds["bank"]) if ds.get("bank") else None
    data = load_dataset(ds["path"], ds.get("format", "json-lines"), tree, bank)
    if tree is None or bank is None:
        raise DatasetError("loaded datasets need 'tree' and 'bank' files")
    return tree, bank, data


def dataset_split(cfg: ExperimentConfig, data):
    try:
        return split_dataset(data, cfg.dataset.get("split", (0.8, 0.1, 0.1)), seed=cfg.seed)
    except ValueError as e:
        raise DatasetError(str(e)) from None


# -- artifacts -----------------------------------------------------------------

def write_manifest(out: Path, cfg: ExperimentConfig, command: str, artifacts: list, extra=None) -> dict:
    """Record ``command`` in ``out/manifest.json``.

    The manifest keeps one entry per command run in the directory; running
    a command under a different config replaces the whole manifest.
    """
    path = out / "manifest.json"
    m = {
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "code_version": __version__,
        "family": cfg.family,
        "config": cfg.raw,
        "steps": {},
    }
    if path.exists():
        try:
            old = json.loads(path.read_text())
        except ValueError:
            old = {}
        if old.get("config_hash") == m["config_hash"] and old.get("code_version") == __version__:
            m["steps"] = old.get("steps", {})
        elif old:
            log.warning("%s was written under another config or code version; replacing it", path)
    step = {"artifacts": sorted(artifacts)}
    if extra:
        step.update(extra)
    m["steps"][command] = step
    path.write_text(json.dumps(m, sort_keys=True, indent=2) + "\n")
    return m


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def cmd_generate(cfg: ExperimentConfig, fmt: str = "json-lines") -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tree, bank, data = build_dataset(cfg)
    name = f"tickets.{FORMAT_SUFFIX[fmt]}"
    write_dataset(out / name, data, fmt)
    save_tree(out / "tree.json", tree)
    save_bank(out / "bank.json", bank)
    write_manifest(out, cfg, "generate", [name, "tree.json", "bank.json"], {"n_tickets": len(data)})
    return out


# -- training ------------------------------------------------------------------

@dataclass
class TrainedModel:
    family: str
    ecd: EcdModel | None = None
    v1: dict | None = None  # task -> V1Model

    def predict_topk(self, tickets, k: int) -> dict:
        """``{task: [ranking per ticket]}`` for the categorical outputs."""
        if self.ecd is not None:
            per = self.ecd.predict_topk(tickets, k)
            names = [n for n in self.ecd.order
                     if isinstance(self.ecd.decoders[n], (SoftmaxDecoder, TreePathDecoder))]
            return {n: [p[n] for p in per] for n in names}
        return {task: m.predict_topk(tickets, k) for task, m in self.v1.items()}

    def save(self, d: Path) -> list:
        d.mkdir(parents=True, exist_ok=True)
        if self.ecd is not None:
            self.ecd.save(d)
            return ["model/model.json", "model/weights.ckpt"]
        with (d / "v1.pkl").open("wb") as fh:
            pickle.dump({"format": 1, "family": self.family, "models": self.v1}, fh)
        return ["model/v1.pkl"]

    @classmethod
    def load(cls, d: Path, family: str) -> "TrainedModel":
        if family == "v2-ecd":
            return cls(family, ecd=EcdModel.load(d))
        with (d / "v1.pkl").open("rb") as fh:
            blob = pickle.load(fh)
        if blob.get("format") != 1:
            raise ValueError("unsupported v1 model file")
        return cls(family, v1=blob["models"])


def fit_model(cfg: ExperimentConfig, tree, bank, split, ecd_override: dict | None = None):
    """Train the configured family; returns ``(TrainedModel, history)``."""
    try:
        if cfg.family == "v2-ecd":
            mcfg = _parse_model(ecd_override if ecd_override is not None else cfg.model["ecd"])
            model = build_model(mcfg, split.train, tree, bank, seed=cfg.seed)
            model, history = train(model, split)
            return TrainedModel(cfg.family, ecd=model), history
        v1cfg = _v1_config(cfg.model.get("v1") or {}, cfg.family)
        text = fit_text_models(split.train, v1cfg.min_df, v1cfg.max_vocab, v1cfg.variance_threshold,
                               v1cfg.max_k, cfg.seed)
        models = {}
        for task in cfg.model.get("tasks", list(TASKS)):
            classes = tree.non_root() if task == "contact_type" else list(bank.templates)
            models[task] = fit_v1(split.train, task, classes, v1cfg, cfg.seed, bank, text)
        return TrainedModel(cfg.family, v1=models), []
    except (ConfigError, DatasetError):
        raise
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as e:
        raise TrainingError(str(e)) from e


def cmd_train(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tree, bank, data = build_dataset(cfg)
    split = dataset_split(cfg, data)
    model, history = fit_model(cfg, tree, bank, split)
    artifacts = model.save(out / "model")
    _dump_json(out / "history.json", history)
    _dump_json(out / "splits.json", {"seed": cfg.seed,
                                     "train": [t.id for t in split.train],
                                     "validation": [t.id for t in split.validation],
                                     "test": [t.id for t in split.test]})
    write_manifest(out, cfg, "train", artifacts + ["history.json", "splits.json"])
    return out


# -- evaluation ----------------------------------------------------------------

def evaluate_model(model: TrainedModel, tickets: list, tree, k: int):
    preds = model.predict_topk(tickets, k)
    truths = {name: [t.label(name) for t in tickets] for name in preds}
    ids = [t.id for t in tickets]
    return evaluate(preds, truths, ids, k=k, tree=tree), preds


def cmd_evaluate(cfg: ExperimentConfig, split_name: str = "test", k: int | None = None) -> Path:
    out = Path(cfg.output_dir)
    if not (out / "model").exists():
        raise DatasetError(f"no trained model under {out}; run train first")
    tree, bank, data = build_dataset(cfg)
    split = dataset_split(cfg, data)
    tickets = getattr(split, split_name)
    model = TrainedModel.load(out / "model", cfg.family)
    k = k or cfg.evaluation.get("top_k", 3)
    report, preds = evaluate_model(model, tickets, tree, k)
    ids = [t.id for t in tickets]
    records = [r for name in preds for r in prediction_records(ids, name, preds[name])]
    write_predictions(out / "predictions.jsonl", records)
    _dump_json(out / "report.json", report.to_dict())
    (out / "report.txt").write_text(report.format_table() + "\n")
    artifacts = ["predictions.jsonl", "report.json", "report.txt"]
    for name, rows in report.per_class.items():
        write_f1_table(out / f"f1_{name}.tsv", rows)
        artifacts.append(f"f1_{name}.tsv")
    write_manifest(out, cfg, "evaluate", artifacts, {"metrics": report.summary(), "split": split_name, "top_k": k})
    return out


def cmd_predict(cfg: ExperimentConfig, input_path, fmt: str = "json-lines", k: int | None = None) -> Path:
    out = Path(cfg.output_dir)
    model = TrainedModel.load(out / "model", cfg.family)
    tickets = load_dataset(input_path, fmt, labeled=False)
    k = k or cfg.evaluation.get("top_k", 3)
    preds = model.predict_topk(tickets, k)
    ids = [t.id for t in tickets]
    records = [r for name in preds for r in prediction_records(ids, name, preds[name])]
    write_predictions(out / "suggestions.jsonl", records)
    write_manifest(out, cfg, "predict", ["suggestions.jsonl"], {"input": str(input_path), "top_k": k})
    return out


# -- hyperparameter search -------------------------------------------------------

def _set_path(d: dict, path: str, value) -> None:
    """Assign into nested dicts/lists along ``a.b[0].c``."""
    cur = d
    parts = []
    for token in path.split("."):
        name, _, rest = token.partition("[")
        parts.append(name)
        for idx in ([int(x) for x in rest.rstrip("]").split("][")] if rest else []):
            parts.append(idx)
    for p in parts[:-1]:
        cur = cur[p]
    cur[parts[-1]] = value


def sample_space(space: dict, rng: np.random.Generator) -> dict:
    """One random assignment: lists are choices, ``{min, max[, log][, int]}`` are ranges."""
    out = {}
    for key in sorted(space):
        spec = space[key]
        if isinstance(spec, list):
            out[key] = copy.deepcopy(spec[int(rng.integers(len(spec)))])
        elif isinstance(spec, dict) and "min" in spec and "max" in spec:
            lo, hi = float(spec["min"]), float(spec["max"])
            v = float(np.exp(rng.uniform(np.log(lo), np.log(hi)))) if spec.get("log") else float(rng.uniform(lo, hi))
            out[key] = int(round(v)) if spec.get("int") else v
        else:
            raise ConfigError(f"hyperopt.space.{key}", "expected a list of choices or {min, max}")
    return out


def cmd_hyperopt(cfg: ExperimentConfig) -> Path:
    """Random search over ``hyperopt.space``; ranks configs by validation accuracy."""
    if cfg.family != "v2-ecd":
        raise ConfigError("model.family", "hyperopt searches ECD model configs (family v2-ecd)")
    budget = cfg.hyperopt.get("budget", 4)
    if not isinstance(budget, int) or budget < 1:
        raise ConfigError("hyperopt.budget", f"expected a positive integer, got {budget!r}")
    space = cfg.hyperopt.get("space") or {}
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tree, bank, data = build_dataset(cfg)
    split = dataset_split(cfg, data)
    rng = np.random.default_rng(cfg.seed)
    trials = []
    for i in range(budget):
        assignment = sample_space(space, rng)
        ecd = copy.deepcopy(cfg.model["ecd"])
        for key, value in assignment.items():
            try:
                _set_path(ecd, key, value)
            except (KeyError, IndexError, TypeError):
                raise ConfigError(f"hyperopt.space.{key}", "path does not exist in model.ecd") from None
        start = time.monotonic()
        model, history = fit_model(cfg, tree, bank, split, ecd_override=ecd)
        minutes = (time.monotonic() - start) / 60.0
        field = next(k for k in history[-1] if k.endswith("_accuracy"))
        best = max(h[field] for h in history)
        d = out / f"trial_{i:03d}"
        model.save(d / "model")
        _dump_json(d / "history.json", history)
        trials.append({"trial": i, "params": assignment, "val_accuracy": best, "metric": field,
                       "minutes": round(minutes, 3)})
    ranking = sorted(trials, key=lambda t: (-t["val_accuracy"], t["trial"]))
    _dump_json(out / "hyperopt.json", ranking)
    write_manifest(out, cfg, "hyperopt", ["hyperopt.json"] + [f"trial_{t['trial']:03d}" for t in trials],
                   {"budget": budget})
    return out
