"""Output heads: softmax, regressor, logistic, and the tree-path sequence decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor, ops
from ..autodiff.ops import _log_softmax
from ..corpus import ContactTypeTree
from .layers import Cell, Embedding, FCStack, Linear, Module


@dataclass
class DecoderOutput:
    hidden: Tensor  # last FC representation, injected into dependent decoders
    logits: Tensor | None
    loss: Tensor | None


class Decoder(Module):
    def __init__(self, n_in, spec, rng, dtype, dropout):
        super().__init__()
        self.spec = spec
        self.fc = self.child("fc", FCStack(n_in, spec.params["fc_layers"], rng, dtype, dropout=dropout))
        self.hidden_width = self.fc.width


class SoftmaxDecoder(Decoder):
    def __init__(self, n_in, n_classes, spec, rng, dtype, dropout):
        super().__init__(n_in, spec, rng, dtype, dropout)
        self.n_classes = n_classes
        self.head = self.child("head", Linear(self.hidden_width, n_classes, rng, dtype))
        self.logit_width = n_classes

    def __call__(self, x, target, train, rng) -> DecoderOutput:
        h = self.fc(x, train, rng)
        z = self.head(h)
        loss = ops.cross_entropy(z, target) if target is not None else None
        return DecoderOutput(h, z, loss)

    def probabilities(self, out: DecoderOutput) -> np.ndarray:
        z = out.logits.data.astype(np.float64)
        return np.exp(_log_softmax(z, axis=1))


class RegressorDecoder(Decoder):
    def __init__(self, n_in, spec, rng, dtype, dropout):
        super().__init__(n_in, spec, rng, dtype, dropout)
        self.head = self.child("head", Linear(self.hidden_width, 1, rng, dtype))
        self.logit_width = 1

    def __call__(self, x, target, train, rng) -> DecoderOutput:
        h = self.fc(x, train, rng)
        z = self.head(h)
        loss = None
        if target is not None:
            rows = np.flatnonzero(~np.isnan(target))
            if rows.size:
                loss = ops.mean_squared_error(z[rows, 0], target[rows])
            else:
                loss = Tensor(np.zeros((), dtype=z.dtype))
        return DecoderOutput(h, z, loss)


class LogisticDecoder(Decoder):
    def __init__(self, n_in, spec, rng, dtype, dropout):
        super().__init__(n_in, spec, rng, dtype, dropout)
        self.head = self.child("head", Linear(self.hidden_width, 1, rng, dtype))
        self.logit_width = 1

    def __call__(self, x, target, train, rng) -> DecoderOutput:
        h = self.fc(x, train, rng)
        z = self.head(h)
        loss = ops.binary_cross_entropy(z[:, 0], target) if target is not None else None
        return DecoderOutput(h, z, loss)


@dataclass
class PathHypothesis:
    nodes: tuple  # node ids from the root, without the end symbol
    score: float  # summed log-probability
    complete: bool


class TreePathDecoder(Decoder):
    """Predicts the root-to-node path of the target class one node per step.

    Symbols are the tree nodes (in tree order), then END, then GO. With
    ``constrained_to_tree`` the step after node ``v`` may only pick a child of
    ``v`` or END (END is not offered after the root, which is not a class).
    """

    def __init__(self, n_in, tree: ContactTypeTree, classes, spec, rng, dtype, dropout):
        super().__init__(n_in, spec, rng, dtype, dropout)
        p = spec.params
        self.tree = tree
        self.nodes = list(tree.nodes)
        self.n_nodes = len(self.nodes)
        self.END, self.GO = self.n_nodes, self.n_nodes + 1
        self.constrained = bool(p["constrained_to_tree"])
        self.normalize_loss = bool(p["normalize_loss"])
        self.beam_width = int(p["beam_width"])
        self.max_steps = tree.depth + 1  # longest path plus END
        S = p["state_size"]
        self.cell_type = p["cell_type"]
        self.init = self.child("init", Linear(self.hidden_width, S, rng, dtype))
        self.embed = self.child("embed", Embedding(self.n_nodes + 2, p["node_embedding_size"], rng, dtype))
        self.feed_hidden = bool(p["feed_hidden"])
        n_cell_in = p["node_embedding_size"] + (self.hidden_width if self.feed_hidden else 0)
        self.cell = self.child("cell", Cell(p["cell_type"], n_cell_in, S, rng, dtype))
        self.out = self.child("out", Linear(S, self.n_nodes + 1, rng, dtype))
        self.logit_width = self.n_nodes + 1
        self.classes = list(classes)
        self.class_index = {c: i for i, c in enumerate(self.classes)}

        node_index = {v: i for i, v in enumerate(self.nodes)}
        allowed = np.ones((self.n_nodes + 2, self.n_nodes + 1), dtype=bool)
        if self.constrained:
            allowed[:] = False
            allowed[self.GO, node_index[tree.root]] = True
            for v in self.nodes:
                i = node_index[v]
                for ch in tree.children(v):
                    allowed[i, node_index[ch]] = True
                if v != tree.root or not tree.children(v):
                    allowed[i, self.END] = True
            allowed[self.END, :] = True  # padding steps; their loss weight is zero
        self.allowed = allowed
        # target symbol sequences per class: path + END
        T = self.max_steps
        self.seq = np.full((len(self.classes), T), self.END, dtype=np.int64)
        self.seq_len = np.zeros(len(self.classes), dtype=np.int64)
        for k, c in enumerate(self.classes):
            path = [node_index[v] for v in tree.path(c)] + [self.END]
            self.seq[k, :len(path)] = path
            self.seq_len[k] = len(path)
        self.node_index = node_index

    def target_sequence(self, node: str) -> list:
        """Training target for ``node``: the root-to-node path."""
        return self.tree.path(node)

    def _initial_state(self, h: Tensor):
        s = ops.tanh(self.init(h))
        c = Tensor(np.zeros(s.shape, dtype=s.dtype)) if self.cell_type == "lstm" else None
        return s, c

    def __call__(self, x, target, train, rng) -> DecoderOutput:
        h = self.fc(x, train, rng)
        if target is None:
            return DecoderOutput(h, None, None)
        B = h.shape[0]
        seq = self.seq[target]
        lengths = self.seq_len[target]
        T = int(lengths.max())
        seq = seq[:, :T]
        prev = np.concatenate([np.full((B, 1), self.GO), seq[:, :-1]], axis=1)
        s, c = self._initial_state(h)
        logits = []
        for t in range(T):
            s, c = self.cell(self._cell_input(prev[:, t], h), s, c)
            logits.append(self.out(s))
        z = ops.reshape(ops.stack(logits, axis=1), (B * T, self.n_nodes + 1))
        valid = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
        if self.normalize_loss:
            valid = valid / lengths[:, None]
        loss = ops.cross_entropy(z, seq.reshape(-1), weight=valid.reshape(-1) / B, reduction="sum",
                                 allowed=self.allowed[prev.reshape(-1)])
        return DecoderOutput(h, None, loss)

    # -- inference ----------------------------------------------------------
    def _cell_input(self, sym: np.ndarray, ctx: Tensor) -> Tensor:
        e = self.embed(sym)
        return ops.concat([e, ctx], axis=1) if self.feed_hidden else e

    def _step_logp(self, sym: np.ndarray, s, c, ctx):
        s, c = self.cell(self._cell_input(sym, ctx), s, c)
        z = self.out(s).data.astype(np.float64)
        z = np.where(self.allowed[sym], z, -np.inf)
        return _log_softmax(z, axis=1), s, c

    def greedy(self, h: Tensor) -> list:
        """Batched greedy decoding; one hypothesis per row."""
        B = h.shape[0]
        s, c = self._initial_state(h)
        sym = np.full(B, self.GO, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        paths = [[] for _ in range(B)]
        score = np.zeros(B)
        for _ in range(self.max_steps):
            lp, s, c = self._step_logp(sym, s, c, h)
            choice = np.argmax(lp, axis=1)
            for i in np.flatnonzero(~done):
                score[i] += lp[i, choice[i]]
                if choice[i] == self.END:
                    done[i] = True
                else:
                    paths[i].append(self.nodes[choice[i]])
            sym = np.where(done, self.END, choice)
            if done.all():
                break
        return [PathHypothesis(tuple(p), float(sc), bool(d)) for p, sc, d in zip(paths, score, done)]

    def beam(self, h_row: Tensor, width: int) -> list:
        """Beam search for one example; returns complete hypotheses, best first.

        Hypotheses are ordered by (-score, node indices), so equal scores
        resolve deterministically.
        """
        s, c = self._initial_state(h_row)
        alive = [((), 0.0)]  # (symbol tuple, score)
        states = (s, c)
        finished = []
        for _ in range(self.max_steps):
            sym = np.array([a[0][-1] if a[0] else self.GO for a in alive], dtype=np.int64)
            s, c = states
            ctx = h_row[np.zeros(len(alive), dtype=np.int64)]
            lp, s2, c2 = self._step_logp(sym, s, c, ctx)
            cands = []
            for i, (seq, sc) in enumerate(alive):
                for j in np.flatnonzero(np.isfinite(lp[i])):
                    cands.append((sc + lp[i, j], seq + (int(j),), i))
            pool = [(sc, seq, -1) for seq, sc in finished] + cands
            pool.sort(key=lambda e: (-e[0], e[1]))
            pool = pool[:width]
            finished = [(seq, sc) for sc, seq, i in pool if i < 0 or seq[-1] == self.END]
            nxt = [(sc, seq, i) for sc, seq, i in pool if i >= 0 and seq[-1] != self.END]
            if not nxt:
                break
            rows = np.array([i for _, _, i in nxt])
            alive = [(seq, sc) for sc, seq, _ in nxt]
            states = (s2[rows], c2[rows] if c2 is not None else None)
        else:
            finished += [(seq, sc) for seq, sc in alive]
        finished.sort(key=lambda e: (-e[1], e[0]))
        out = []
        for seq, sc in finished:
            complete = bool(seq) and seq[-1] == self.END
            nodes = tuple(self.nodes[j] for j in seq if j != self.END)
            out.append(PathHypothesis(nodes, float(sc), complete))
        return out

    def final_node(self, hyp: PathHypothesis) -> str:
        return hyp.nodes[-1] if hyp.nodes else self.tree.root

    def is_valid_path(self, nodes) -> bool:
        if not nodes or nodes[0] != self.tree.root:
            return False
        return all(self.tree.parent.get(b) == a for a, b in zip(nodes, nodes[1:]))


def build_decoder(spec, n_in, processor, tree, rng, dtype, dropout) -> Decoder:
    if spec.module == "softmax":
        return SoftmaxDecoder(n_in, len(processor.classes[spec.name]), spec, rng, dtype, dropout)
    if spec.module == "tree_path":
        if tree is None:
            raise ValueError("tree_path decoder needs a ContactTypeTree")
        return TreePathDecoder(n_in, tree, processor.classes[spec.name], spec, rng, dtype, dropout)
    if spec.module == "regressor":
        return RegressorDecoder(n_in, spec, rng, dtype, dropout)
    if spec.module == "logistic":
        return LogisticDecoder(n_in, spec, rng, dtype, dropout)
    raise ValueError(f"unknown decoder {spec.module!r}")
