"""Turn tickets into the integer and float arrays the encoders consume."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from ..corpus import ContactTypeTree, LabeledTicket, ReplyTemplateBank, Ticket
from ..textprep import strip_html, tokenize
from .config import ModelConfig

PAD, UNK = "<PAD>", "<UNK>"


class Vocabulary:
    """Token list with a fixed index; ``<PAD>`` is 0 and ``<UNK>`` is 1 for text."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self):
        return len(self.tokens)

    def lookup(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    @classmethod
    def build(cls, counts: Counter, specials, min_count: int = 1) -> "Vocabulary":
        kept = sorted((t for t, n in counts.items() if n >= min_count), key=lambda t: (-counts[t], t))
        return cls(list(specials) + [t for t in kept if t not in specials])


def text_units(message: str, level: str, max_length: int) -> list:
    """Word tokens (lowercase, stop words and stems kept) or characters, truncated."""
    clean = strip_html(message)
    if level == "char":
        units = list(clean.lower())
    else:
        units = [t.base for t in tokenize(clean, stop_words=None, normalizer=None)]
    return units[:max_length]


def field_value(ticket: Ticket, name: str):
    return getattr(ticket, name)


@dataclass
class EncodedData:
    """Per-feature arrays for a fixed list of tickets (targets optional)."""

    inputs: dict
    targets: dict
    n: int

    def batch(self, rows: np.ndarray) -> tuple:
        out = {}
        for name, value in self.inputs.items():
            if isinstance(value, list):  # ragged text ids
                seqs = [value[r] for r in rows]
                L = max(len(s) for s in seqs)
                ids = np.zeros((len(rows), L), dtype=np.int64)
                mask = np.zeros((len(rows), L), dtype=bool)
                for i, s in enumerate(seqs):
                    ids[i, :len(s)] = s
                    mask[i, :len(s)] = True
                out[name] = (ids, mask)
            else:
                out[name] = tuple(v[rows] for v in value)
        targets = {k: v[rows] for k, v in self.targets.items()}
        return out, targets


class FeatureProcessor:
    """Vocabularies and normalization statistics fitted on the training split."""

    def __init__(self, config: ModelConfig, tree: ContactTypeTree | None = None,
                 bank: ReplyTemplateBank | None = None):
        self.config = config
        self.tree = tree
        self.bank = bank
        self.vocabs = {}
        self.numeric_fill = {}
        self.target_stats = {}
        self.classes = {}

    # -- fitting ----------------------------------------------------------
    def fit(self, data: list) -> "FeatureProcessor":
        if not data:
            raise ValueError("cannot fit features on an empty training split")
        min_count = self.config.training["min_word_count"]
        for f in self.config.input_features:
            values = [field_value(t.ticket, f.name) for t in data]
            if f.kind == "text":
                level = f.module.split("_")[0]
                counts = Counter(u for v in values for u in text_units(v, level, f.params["max_length"]))
                self.vocabs[f.name] = Vocabulary.build(counts, (PAD, UNK), min_count)
            elif f.kind == "category":
                counts = Counter(v for v in values if v not in (None, ""))
                self.vocabs[f.name] = Vocabulary.build(counts, (UNK,))
            elif f.kind == "numeric":
                present = [float(v) for v in values if v is not None]
                self.numeric_fill[f.name] = float(np.median(present)) if present else 0.0
        for f in self.config.output_features:
            if f.kind == "category":
                self.classes[f.name] = self._class_list(f.name, data)
            elif f.kind == "numeric":
                vals = np.array([float(v) for t in data if (v := field_value(t.ticket, f.name)) is not None])
                mu = float(vals.mean()) if vals.size else 0.0
                sd = float(vals.std()) if vals.size > 1 else 1.0
                self.target_stats[f.name] = (mu, sd if sd > 0 else 1.0)
        return self

    def _class_list(self, name: str, data: list) -> list:
        if name == "contact_type" and self.tree is not None:
            return self.tree.non_root()
        if name == "reply_template" and self.bank is not None:
            return list(self.bank.templates)
        return sorted({getattr(t, name) if name in ("contact_type", "reply_template")
                       else field_value(t.ticket, name) for t in data})

    # -- transforming -----------------------------------------------------
    def encode(self, data: list, with_targets: bool = True) -> EncodedData:
        tickets = [t.ticket if isinstance(t, LabeledTicket) else t for t in data]
        inputs = {}
        for f in self.config.input_features:
            values = [field_value(t, f.name) for t in tickets]
            if f.kind == "text":
                level = f.module.split("_")[0]
                vocab = self.vocabs[f.name]
                seqs = []
                for v in values:
                    ids = [vocab.lookup(u) for u in text_units(v, level, f.params["max_length"])]
                    seqs.append(np.array(ids or [vocab.index[UNK]], dtype=np.int64))
                inputs[f.name] = seqs
            elif f.kind == "category":
                vocab = self.vocabs[f.name]
                missing = np.array([v in (None, "") for v in values])
                ids = np.array([0 if m else vocab.lookup(v) for v, m in zip(values, missing)], dtype=np.int64)
                inputs[f.name] = (ids, missing)
            elif f.kind == "numeric":
                missing = np.array([v is None for v in values])
                fill = self.numeric_fill[f.name]
                x = np.array([fill if v is None else float(v) for v in values], dtype=np.float64)
                inputs[f.name] = (x[:, None], missing)
            else:
                inputs[f.name] = (np.array([float(bool(v)) for v in values])[:, None],)
        targets = self.encode_targets(data) if with_targets else {}
        return EncodedData(inputs, targets, len(tickets))

    def encode_targets(self, data: list) -> dict:
        out = {}
        for f in self.config.output_features:
            if f.kind == "category":
                index = {c: i for i, c in enumerate(self.classes[f.name])}
                labels = [t.label(f.name) if f.name in ("contact_type", "reply_template")
                          else field_value(t.ticket, f.name) for t in data]
                unknown = [l for l in labels if l not in index]
                if unknown:
                    raise ValueError(f"{f.name}: label {unknown[0]!r} not in the output classes")
                out[f.name] = np.array([index[l] for l in labels], dtype=np.int64)
            elif f.kind == "numeric":
                mu, sd = self.target_stats[f.name]
                vals = [field_value(t.ticket, f.name) for t in data]
                out[f.name] = np.array([np.nan if v is None else (float(v) - mu) / sd for v in vals])
            else:
                out[f.name] = np.array([float(bool(field_value(t.ticket, f.name))) for t in data])
        return out

    # -- persistence ------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "vocabs": {k: v.tokens for k, v in self.vocabs.items()},
            "numeric_fill": self.numeric_fill,
            "target_stats": {k: list(v) for k, v in self.target_stats.items()},
            "classes": self.classes,
        }

    @classmethod
    def from_dict(cls, d: dict, config: ModelConfig, tree=None, bank=None) -> "FeatureProcessor":
        p = cls(config, tree, bank)
        p.vocabs = {k: Vocabulary(v) for k, v in d["vocabs"].items()}
        p.numeric_fill = {k: float(v) for k, v in d["numeric_fill"].items()}
        p.target_stats = {k: tuple(v) for k, v in d["target_stats"].items()}
        p.classes = {k: list(v) for k, v in d["classes"].items()}
        return p
