"""The encoder-combiner-decoder model: build, forward, predict, persist."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from ..autodiff import Tensor, load_parameters, no_grad, ops, save_parameters
from ..corpus import ContactTypeTree, ReplyTemplateBank
from .config import ModelConfig, parse_config, validate_config
from .decoders import SoftmaxDecoder, TreePathDecoder, build_decoder
from .encoders import build_encoder
from .features import PAD, EncodedData, FeatureProcessor
from .layers import FCStack, Module

log = logging.getLogger(__name__)


class EcdModel(Module):
    def __init__(self, config: ModelConfig, processor: FeatureProcessor, tree: ContactTypeTree | None = None,
                 bank: ReplyTemplateBank | None = None, seed: int = 0):
        super().__init__()
        self.config = config
        self.processor = processor
        self.tree = tree
        self.bank = bank
        self.seed = seed
        self.dtype = np.dtype(config.training["dtype"]).type
        self.order = validate_config(config)
        self.trace = []  # names of decoders in the order they ran on the last forward pass
        rng = np.random.default_rng(seed)
        dropout = float(config.training["dropout"])

        self.encoders = {}
        for f in config.input_features:
            vocab = processor.vocabs.get(f.name)
            enc = build_encoder(f, len(vocab) if vocab is not None else 0, rng, self.dtype)
            self.encoders[f.name] = self.child(f"enc_{f.name}", enc)
        concat_width = sum(e.width for e in self.encoders.values())
        comb = config.combiner
        comb_dropout = dropout if comb["dropout"] is None else float(comb["dropout"])
        self.combiner = self.child("combiner", FCStack(concat_width, comb["fc_layers"], rng, self.dtype,
                                                      comb["activation"], comb_dropout))
        self.decoders = {}
        self.input_widths = {}
        for name in self.order:
            spec = config.output(name)
            width = self.combiner.width
            for d in spec.dependencies:
                dep = self.decoders[d]
                width += dep.hidden_width if spec.dependency_source == "hidden" else dep.logit_width
            self.input_widths[name] = width
            dec = build_decoder(spec, width, processor, tree, rng, self.dtype, dropout)
            self.decoders[name] = self.child(f"dec_{name}", dec)

    # -- forward ------------------------------------------------------------
    def combine(self, encodings: list, train: bool = False, rng=None) -> Tensor:
        x = encodings[0] if len(encodings) == 1 else ops.concat(encodings, axis=1)
        return self.combiner(x, train, rng)

    def encode(self, inputs: dict, train: bool = False, rng=None) -> dict:
        return {f.name: self.encoders[f.name](inputs[f.name], train, rng) for f in self.config.input_features}

    def forward(self, inputs: dict, targets: dict | None = None, train: bool = False, rng=None) -> dict:
        enc = self.encode(inputs, train, rng)
        c = self.combine([enc[f.name] for f in self.config.input_features], train, rng)
        outs = {}
        self.trace = []
        for name in self.order:
            spec = self.config.output(name)
            parts = [c]
            for d in spec.dependencies:
                parts.append(outs[d].hidden if spec.dependency_source == "hidden" else outs[d].logits)
            x = parts[0] if len(parts) == 1 else ops.concat(parts, axis=1)
            tgt = None if targets is None else targets.get(name)
            self.trace.append(("start", name))
            outs[name] = self.decoders[name](x, tgt, train, rng)
            self.trace.append(("end", name))
        return outs

    def total_loss(self, outs: dict) -> Tensor:
        names = [n for n in self.order if outs[n].loss is not None]
        weights = [self.config.output(n).loss_weight for n in names]
        return total_loss([outs[n].loss for n in names], weights)

    # -- prediction -----------------------------------------------------------
    def encode_data(self, data, with_targets: bool = True) -> EncodedData:
        return self.processor.encode(data, with_targets)

    def predict_topk(self, data, k: int = 3, encoded: EncodedData | None = None) -> list:
        """Per ticket, ``{output: [(class, score), ...]}`` with at most ``k`` entries.

        Categorical outputs rank by probability with ties broken by class
        index; sequence outputs rank the final nodes of beam-search paths.
        Numeric and binary outputs return a single ``(value, 1.0)`` entry.
        """
        enc = encoded if encoded is not None else self.encode_data(data, with_targets=False)
        bs = self.config.training["eval_batch_size"]
        results = [dict() for _ in range(enc.n)]
        with no_grad():
            for lo in range(0, enc.n, bs):
                rows = np.arange(lo, min(lo + bs, enc.n))
                inputs, _ = enc.batch(rows)
                outs = self.forward(inputs)
                for name in self.order:
                    dec = self.decoders[name]
                    for r, entry in zip(rows, self._topk(dec, outs[name], name, k)):
                        results[r][name] = entry
        return results

    def _topk(self, dec, out, name, k) -> list:
        if isinstance(dec, SoftmaxDecoder):
            probs = dec.probabilities(out)
            classes = self.processor.classes[name]
            order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
            return [[(classes[j], float(p[j])) for j in row] for p, row in zip(probs, order)]
        if isinstance(dec, TreePathDecoder):
            return [self._tree_topk(dec, out.hidden[i:i + 1], k) for i in range(out.hidden.shape[0])]
        if name in self.processor.target_stats:
            mu, sd = self.processor.target_stats[name]
            return [[(float(v) * sd + mu, 1.0)] for v in out.logits.data[:, 0]]
        p = 1.0 / (1.0 + np.exp(-out.logits.data[:, 0].astype(np.float64)))
        return [[(bool(q >= 0.5), float(max(q, 1 - q)))] for q in p]

    def _tree_topk(self, dec: TreePathDecoder, h, k) -> list:
        if k == 1 and dec.beam_width == 1:
            hyp = dec.greedy(h)[0]
            return [(dec.final_node(hyp), float(np.exp(hyp.score)))]
        width = max(dec.beam_width, k)
        while True:
            hyps = dec.beam(h, width)
            seen, out = set(), []
            for hyp in hyps:
                node = dec.final_node(hyp)
                if node not in seen:
                    seen.add(node)
                    out.append((node, float(np.exp(hyp.score))))
            if len(out) >= k or width >= dec.n_nodes * 4:
                return out[:k]
            width *= 2

    def decode_paths(self, data, beam_width: int | None = None, encoded: EncodedData | None = None) -> list:
        """Best path per ticket from the tree-path decoder (for diagnostics)."""
        name = next(n for n in self.order if isinstance(self.decoders[n], TreePathDecoder))
        dec = self.decoders[name]
        width = beam_width or dec.beam_width
        enc = encoded if encoded is not None else self.encode_data(data, with_targets=False)
        bs = self.config.training["eval_batch_size"]
        paths = []
        with no_grad():
            for lo in range(0, enc.n, bs):
                rows = np.arange(lo, min(lo + bs, enc.n))
                inputs, _ = enc.batch(rows)
                h = self.forward(inputs)[name].hidden
                if width == 1:
                    paths.extend(dec.greedy(h))
                else:
                    paths.extend(dec.beam(h[i:i + 1], width)[0] for i in range(h.shape[0]))
        return paths

    # -- persistence ------------------------------------------------------------
    def state_dict(self) -> dict:
        out = {f"param/{n}": t.data for n, t in self.named_parameters()}
        out.update({f"buffer/{n}": b for n, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for key, arr in state.items():
            kind, name = key.split("/", 1)
            if kind == "param":
                if params[name].data.shape != arr.shape:
                    raise ValueError(f"shape mismatch for {name}: {params[name].data.shape} vs {arr.shape}")
                params[name].data = arr.astype(params[name].data.dtype).copy()
            else:
                np.copyto(buffers[name], arr)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {
            "config": self.config.raw,
            "processor": self.processor.to_dict(),
            "tree": self.tree.to_dict() if self.tree is not None else None,
            "bank": self.bank.to_dict() if self.bank is not None else None,
            "seed": self.seed,
        }
        (d / "model.json").write_text(json.dumps(meta, sort_keys=True))
        save_parameters(d / "weights.ckpt", self.state_dict())

    @classmethod
    def load(cls, directory) -> "EcdModel":
        d = Path(directory)
        meta = json.loads((d / "model.json").read_text())
        config = parse_config(meta["config"])
        tree = ContactTypeTree.from_dict(meta["tree"]) if meta["tree"] else None
        bank = ReplyTemplateBank.from_dict(meta["bank"]) if meta["bank"] else None
        proc = FeatureProcessor.from_dict(meta["processor"], config, tree, bank)
        model = cls(config, proc, tree, bank, meta["seed"])
        model.load_state_dict(load_parameters(d / "weights.ckpt"))
        return model


def total_loss(losses, weights) -> Tensor:
    """Weighted sum of per-output losses; all-zero weights give a constant 0."""
    weights = [float(w) for w in weights]
    if any(w < 0 for w in weights):
        raise ValueError("loss weights must be nonnegative")
    if not weights or all(w == 0 for w in weights):
        log.warning("all loss weights are zero; training will not change the model")
    return ops.weighted_sum(losses, weights)


def build_model(config: ModelConfig | dict, train_data: list, tree=None, bank=None, seed: int = 0) -> EcdModel:
    if isinstance(config, dict):
        config = parse_config(config)
    proc = FeatureProcessor(config, tree, bank).fit(train_data)
    return EcdModel(config, proc, tree, bank, seed)


def export_embeddings(model: EcdModel, which: str, feature: str | None = None) -> list:
    """``(label, vector)`` rows for word, category, or output-class embeddings."""
    if which == "word":
        names = [f.name for f in model.config.input_features if f.kind == "text" and f.module.startswith("word")]
        if feature is not None:
            names = [n for n in names if n == feature]
        if not names:
            raise ValueError("no word-level text encoder to export embeddings from")
        vocab = model.processor.vocabs[names[0]]
        table = model.encoders[names[0]].embed.table.data
        return [(tok, table[i].astype(np.float64)) for i, tok in enumerate(vocab.tokens) if tok != PAD]
    if which == "category":
        specs = {f.name: f for f in model.config.input_features}
        if feature is None:
            cats = [n for n, f in specs.items() if f.kind == "category"]
            if not cats:
                raise ValueError("no categorical input features")
            feature = cats[0]
        if feature not in specs:
            raise ValueError(f"unknown input feature {feature!r}")
        if specs[feature].kind != "category":
            raise ValueError(f"{feature!r} is a {specs[feature].kind} feature and has no embeddings")
        vocab = model.processor.vocabs[feature]
        table = model.encoders[feature].embed.table.data
        return [(tok, table[i].astype(np.float64)) for i, tok in enumerate(vocab.tokens)]
    if which == "output-class":
        if feature is None:
            feature = model.order[0]
        dec = model.decoders.get(feature)
        if isinstance(dec, SoftmaxDecoder):
            W = dec.head.weight.data
            return [(c, W[:, j].astype(np.float64)) for j, c in enumerate(model.processor.classes[feature])]
        if isinstance(dec, TreePathDecoder):
            W = dec.out.weight.data
            return [(c, W[:, dec.node_index[c]].astype(np.float64)) for c in dec.classes]
        raise ValueError(f"output {feature!r} has no class embeddings")
    raise ValueError(f"unknown embedding kind {which!r}")


def write_embedding_table(path, rows) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for label, vec in rows:
            fh.write(label + "\t" + "\t".join(repr(float(v)) for v in vec) + "\n")

