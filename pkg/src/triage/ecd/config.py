"""Declarative model configuration for encoder-combiner-decoder models.

Configs are plain nested dicts (usually loaded from YAML). Parsing fills in
defaults and reports problems with a dotted path to the offending field, e.g.
``input_features[0].encoder``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

KINDS = ("text", "category", "numeric", "binary")

TEXT_ENCODERS = ("word_cnn", "char_cnn", "word_rnn", "char_rnn", "word_crnn", "char_crnn")
ENCODERS = {
    "text": TEXT_ENCODERS,
    "category": ("embed",),
    "numeric": ("batch_norm",),
    "binary": ("passthrough",),
}
DEFAULT_ENCODER = {"text": "word_cnn", "category": "embed", "numeric": "batch_norm", "binary": "passthrough"}

DECODERS = {
    "category": ("softmax", "tree_path"),
    "numeric": ("regressor",),
    "binary": ("logistic",),
}
DEFAULT_DECODER = {"category": "softmax", "numeric": "regressor", "binary": "logistic"}
CELL_TYPES = ("simple", "lstm", "gru")

ENCODER_DEFAULTS = {
    "word_cnn": {"embedding_size": 256, "filter_sizes": [2, 3, 4, 5], "num_filters": 512, "max_length": 256},
    "char_cnn": {"embedding_size": 64, "filter_sizes": [2, 3, 4, 5], "num_filters": 128, "max_length": 1024},
    "word_rnn": {"embedding_size": 256, "cell_type": "gru", "state_size": 128, "num_layers": 1,
                 "bidirectional": True, "max_length": 256},
    "char_rnn": {"embedding_size": 64, "cell_type": "gru", "state_size": 128, "num_layers": 1,
                 "bidirectional": True, "max_length": 1024},
    "word_crnn": {"embedding_size": 256, "filter_size": 3, "num_filters": 128, "num_conv_layers": 1,
                  "cell_type": "gru", "state_size": 128, "num_layers": 1, "bidirectional": True,
                  "max_length": 256},
    "char_crnn": {"embedding_size": 64, "filter_size": 3, "num_filters": 128, "num_conv_layers": 1,
                  "cell_type": "gru", "state_size": 128, "num_layers": 1, "bidirectional": True,
                  "max_length": 1024},
    "embed": {"embedding_size": 256},
    "batch_norm": {},
    "passthrough": {},
}
DECODER_DEFAULTS = {
    "softmax": {"fc_layers": [512, 256]},
    "regressor": {"fc_layers": [512, 256]},
    "logistic": {"fc_layers": [512, 256]},
    "tree_path": {"fc_layers": [512, 256], "cell_type": "gru", "state_size": 256,
                  "node_embedding_size": 64, "beam_width": 1, "constrained_to_tree": True,
                  "normalize_loss": False, "feed_hidden": True},
}
TRAINING_DEFAULTS = {
    "batch_size": 256,
    "epochs": 20,
    "learning_rate": 0.00025,
    "early_stop": 5,
    "dropout": 0.35,
    "clip_norm": None,
    "validation_field": None,
    "dtype": "float64",
    "eval_batch_size": 512,
    "min_word_count": 1,
    "stop_at": None,
}
COMBINER_DEFAULTS = {"fc_layers": [], "activation": "relu", "dropout": None}

FIELD_NAMES = {
    "text": ("message",),
    "category": ("product_type", "user_type", "country", "city", "trip_status",
                 "contact_type", "reply_template"),
    "numeric": ("eta_minutes",),
    "binary": ("has_trip",),
}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass
class FeatureSpec:
    name: str
    kind: str
    role: str
    module: str  # encoder or decoder name
    params: dict = field(default_factory=dict)
    loss_weight: float = 1.0
    dependencies: list = field(default_factory=list)
    dependency_source: str = "hidden"


@dataclass
class ModelConfig:
    input_features: list
    output_features: list
    combiner: dict
    training: dict
    raw: dict = field(default_factory=dict, repr=False)

    def output(self, name: str) -> FeatureSpec:
        for f in self.output_features:
            if f.name == name:
                return f
        raise KeyError(name)


def _positive_int_list(value, path):
    if not isinstance(value, (list, tuple)):
        raise ConfigError(path, f"expected a list of positive integers, got {value!r}")
    for i, v in enumerate(value):
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise ConfigError(f"{path}[{i}]", f"expected a positive integer, got {v!r}")
    return list(value)


def _check_params(params: dict, defaults: dict, path: str) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in params.items():
        if k not in defaults:
            raise ConfigError(f"{path}.{k}", "unknown option")
        out[k] = v
    for k in ("fc_layers", "filter_sizes"):
        if k in out:
            _positive_int_list(out[k], f"{path}.{k}")
    for k in ("embedding_size", "num_filters", "state_size", "num_layers", "max_length",
              "filter_size", "num_conv_layers", "node_embedding_size", "beam_width"):
        if k in out and (not isinstance(out[k], int) or isinstance(out[k], bool) or out[k] < 1):
            raise ConfigError(f"{path}.{k}", f"expected a positive integer, got {out[k]!r}")
    if "cell_type" in out and out["cell_type"] not in CELL_TYPES:
        raise ConfigError(f"{path}.cell_type", f"unknown cell type {out['cell_type']!r}")
    return out


def _parse_feature(d, role: str, path: str) -> FeatureSpec:
    if not isinstance(d, dict):
        raise ConfigError(path, "expected a mapping")
    d = dict(d)
    name = d.pop("name", None)
    if not name:
        raise ConfigError(f"{path}.name", "missing")
    kind = d.pop("type", None)
    kind = "category" if kind == "categorical" else kind
    if kind not in KINDS:
        raise ConfigError(f"{path}.type", f"unknown feature type {kind!r}")
    if name not in FIELD_NAMES[kind]:
        raise ConfigError(f"{path}.name", f"no {kind} field named {name!r}")
    if role == "input":
        module = d.pop("encoder", DEFAULT_ENCODER[kind])
        if module not in ENCODERS[kind]:
            raise ConfigError(f"{path}.encoder", f"unknown {kind} encoder {module!r}")
        for k in ("loss_weight", "dependencies", "decoder"):
            if k in d:
                raise ConfigError(f"{path}.{k}", "only valid on output features")
        params = _check_params(d, ENCODER_DEFAULTS[module], path)
        return FeatureSpec(name, kind, role, module, params)
    if kind not in DECODERS:
        raise ConfigError(f"{path}.type", f"{kind} features cannot be outputs")
    module = d.pop("decoder", DEFAULT_DECODER[kind])
    if module not in DECODERS[kind]:
        raise ConfigError(f"{path}.decoder", f"unknown {kind} decoder {module!r}")
    weight = d.pop("loss_weight", 1.0)
    if not isinstance(weight, (int, float)) or weight < 0:
        raise ConfigError(f"{path}.loss_weight", f"must be a nonnegative number, got {weight!r}")
    deps = d.pop("dependencies", []) or []
    if not isinstance(deps, list):
        raise ConfigError(f"{path}.dependencies", "expected a list of output feature names")
    source = d.pop("dependency_source", "hidden")
    if source not in ("hidden", "logits"):
        raise ConfigError(f"{path}.dependency_source", f"expected 'hidden' or 'logits', got {source!r}")
    if module == "tree_path" and name != "contact_type":
        raise ConfigError(f"{path}.decoder", "tree_path decoding needs the contact-type tree")
    params = _check_params(d, DECODER_DEFAULTS[module], path)
    return FeatureSpec(name, kind, role, module, params, float(weight), list(deps), source)


def parse_config(raw: dict) -> ModelConfig:
    """Fill defaults and validate types; dependency checks happen in :func:`validate_config`."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "model config must be a mapping")
    unknown = set(raw) - {"input_features", "output_features", "combiner", "training"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")
    ins = raw.get("input_features")
    outs = raw.get("output_features")
    if not ins:
        raise ConfigError("input_features", "at least one input feature is required")
    if not outs:
        raise ConfigError("output_features", "at least one output feature is required")
    inputs = [_parse_feature(d, "input", f"input_features[{i}]") for i, d in enumerate(ins)]
    outputs = [_parse_feature(d, "output", f"output_features[{i}]") for i, d in enumerate(outs)]
    for group, label in ((inputs, "input_features"), (outputs, "output_features")):
        seen = set()
        for i, f in enumerate(group):
            if f.name in seen:
                raise ConfigError(f"{label}[{i}].name", f"duplicate feature {f.name!r}")
            seen.add(f.name)
    overlap = {f.name for f in inputs} & {f.name for f in outputs}
    if overlap:
        raise ConfigError("output_features", f"features used as both input and output: {sorted(overlap)}")
    combiner = dict(COMBINER_DEFAULTS)
    for k, v in (raw.get("combiner") or {}).items():
        if k not in COMBINER_DEFAULTS:
            raise ConfigError(f"combiner.{k}", "unknown option")
        combiner[k] = v
    combiner["fc_layers"] = _positive_int_list(combiner["fc_layers"], "combiner.fc_layers")
    if combiner["activation"] not in ("relu", "tanh"):
        raise ConfigError("combiner.activation", f"unknown activation {combiner['activation']!r}")
    training = dict(TRAINING_DEFAULTS)
    for k, v in (raw.get("training") or {}).items():
        if k not in TRAINING_DEFAULTS:
            raise ConfigError(f"training.{k}", "unknown option")
        training[k] = v
    if training["dtype"] not in ("float64", "float32"):
        raise ConfigError("training.dtype", f"expected float64 or float32, got {training['dtype']!r}")
    for k in ("batch_size", "epochs", "early_stop", "eval_batch_size", "min_word_count"):
        if not isinstance(training[k], int) or training[k] < 1:
            raise ConfigError(f"training.{k}", f"expected a positive integer, got {training[k]!r}")
    if not 0.0 <= float(training["dropout"]) < 1.0:
        raise ConfigError("training.dropout", "must be in [0, 1)")
    cfg = ModelConfig(inputs, outputs, combiner, training, copy.deepcopy(raw))
    validate_config(cfg)
    return cfg


def validate_config(cfg: ModelConfig) -> list:
    """Topological order of output features; ties keep declaration order.

    Raises ``ConfigError`` on unknown or input-feature dependencies and on
    cycles, naming the nodes of the cycle.
    """
    names = [f.name for f in cfg.output_features]
    inputs = {f.name for f in cfg.input_features}
    for i, f in enumerate(cfg.output_features):
        for j, d in enumerate(f.dependencies):
            path = f"output_features[{i}].dependencies[{j}]"
            if d in inputs:
                raise ConfigError(path, f"{d!r} is an input feature; dependencies must be outputs")
            if d not in names:
                raise ConfigError(path, f"unknown output feature {d!r}")
            if d == f.name:
                raise ConfigError(path, f"dependency cycle: [{d}]")
            if f.dependency_source == "logits" and cfg.output(d).module == "tree_path":
                raise ConfigError(f"output_features[{i}].dependency_source",
                                  f"{d!r} uses a tree_path decoder, which has no single logit vector")
    deps = {f.name: list(f.dependencies) for f in cfg.output_features}
    order = []
    done = set()
    while len(order) < len(names):
        ready = [n for n in names if n not in done and all(d in done for d in deps[n])]
        if not ready:
            raise ConfigError("output_features", f"dependency cycle: {_find_cycle(deps, done)}")
        order.append(ready[0])
        done.add(ready[0])
    return order


def _find_cycle(deps: dict, done: set) -> list:
    remaining = [n for n in deps if n not in done]
    start = remaining[0]
    seen = []
    cur = start
    while cur not in seen:
        seen.append(cur)
        cur = next(d for d in deps[cur] if d not in done)
    cycle = seen[seen.index(cur):]
    # report in dependency order: each node depends on the one before it
    return cycle[::-1]
