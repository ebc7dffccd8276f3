"""Ranking metrics, per-class tables, run comparison, and the prediction dump format.

Predictions are ranked lists per ticket. Entries may be bare class ids or
``(class, score)`` pairs; duplicates are dropped (first occurrence wins)
before any metric is computed.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import ContactTypeTree


def _labels(ranking) -> list:
    out, seen = [], set()
    for r in ranking:
        c = r[0] if isinstance(r, (tuple, list)) else r
        if c not in seen:
            seen.add(c)
            out.append(c)
    return out


def _check(predictions, truths):
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} predictions for {len(truths)} truths")
    if not truths:
        raise ValueError("empty evaluation set")


def top1(predictions) -> list:
    return [(_labels(p) or [None])[0] for p in predictions]


def hit_vector(predictions, truths, k: int) -> np.ndarray:
    """1.0 where the truth is among the first ``k`` distinct predictions."""
    _check(predictions, truths)
    if k < 1:
        raise ValueError("k must be >= 1")
    return np.array([float(t in _labels(p)[:k]) for p, t in zip(predictions, truths)])


def accuracy(predictions, truths) -> float:
    return float(hit_vector(predictions, truths, 1).mean())


def hits_at_k(predictions, truths, k: int = 3) -> float:
    return float(hit_vector(predictions, truths, k).mean())


def combined_vector(pred_a, pred_b, truth_a, truth_b) -> np.ndarray:
    _check(pred_a, truth_a)
    _check(pred_b, truth_b)
    if len(pred_a) != len(pred_b):
        raise ValueError("combined accuracy needs predictions aligned by ticket")
    return hit_vector(pred_a, truth_a, 1) * hit_vector(pred_b, truth_b, 1)


def combined_accuracy(pred_a, pred_b, truth_a, truth_b) -> float:
    """Share of tickets where both outputs are right at rank 1."""
    return float(combined_vector(pred_a, pred_b, truth_a, truth_b).mean())


def parent_vector(predictions, truths, tree: ContactTypeTree) -> np.ndarray:
    _check(predictions, truths)
    out = []
    for p, t in zip(top1(predictions), truths):
        if t not in tree:
            raise ValueError(f"truth {t!r} is not in the tree")
        out.append(float(p == t or (p is not None and p == tree.parent[t])))
    return np.array(out)


def accuracy_plus_parent(predictions, truths, tree: ContactTypeTree) -> float:
    """A prediction also counts when it is the parent of the true node."""
    return float(parent_vector(predictions, truths, tree).mean())


@dataclass
class ClassStats:
    label: str
    frequency: float
    support: int
    predicted: int
    precision: float
    recall: float
    f1: float


def per_class_f1_vs_frequency(predictions, truths) -> list:
    """Per class precision/recall/F1 against its share of the truth set.

    Classes appear if they occur among truths or top-1 predictions. F1 is 0
    when precision and recall are both 0. Sorted by descending frequency,
    then label.
    """
    _check(predictions, truths)
    pred = top1(predictions)
    support = Counter(truths)
    predicted = Counter(pred)
    correct = Counter(t for p, t in zip(pred, truths) if p == t)
    n = len(truths)
    rows = []
    for c in set(support) | {p for p in predicted if p is not None}:
        tp = correct[c]
        prec = tp / predicted[c] if predicted[c] else 0.0
        rec = tp / support[c] if support[c] else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        rows.append(ClassStats(str(c), support[c] / n, support[c], predicted[c], prec, rec, f1))
    rows.sort(key=lambda r: (-r.frequency, r.label))
    return rows


def write_f1_table(path, rows, delimiter: str = "\t") -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(["label", "frequency", "support", "predicted", "precision", "recall", "f1"])
        for r in rows:
            w.writerow([r.label, f"{r.frequency:.6f}", r.support, r.predicted,
                        f"{r.precision:.6f}", f"{r.recall:.6f}", f"{r.f1:.6f}"])


def confusions(predictions, truths, top: int = 10) -> list:
    """Most frequent (truth, predicted, count) mistakes."""
    c = Counter((t, p) for p, t in zip(top1(predictions), truths) if p != t)
    return [(t, p, n) for (t, p), n in sorted(c.items(), key=lambda kv: (-kv[1], str(kv[0])))[:top]]


# -- reports -----------------------------------------------------------------

@dataclass
class EvalReport:
    n: int
    k: int
    ticket_ids: list
    outputs: dict  # output name -> {"accuracy", "hits_at_k", optional "accuracy_plus_parent"}
    combined_accuracy: float | None = None
    per_class: dict = field(default_factory=dict)
    confusion: dict = field(default_factory=dict)
    vectors: dict = field(default_factory=dict, repr=False)  # per-ticket 0/1 outcomes per metric

    def summary(self) -> dict:
        out = {"n": self.n, "k": self.k, "outputs": self.outputs}
        if self.combined_accuracy is not None:
            out["combined_accuracy"] = self.combined_accuracy
        return out

    def to_dict(self) -> dict:
        d = self.summary()
        d["per_class"] = {k: [asdict(r) for r in v] for k, v in self.per_class.items()}
        d["confusion"] = {k: [list(x) for x in v] for k, v in self.confusion.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def format_table(self) -> str:
        lines = [f"{'output':<20}{'accuracy':>10}{f'hits@{self.k}':>10}{'acc+p':>10}"]
        for name, m in self.outputs.items():
            accp = m.get("accuracy_plus_parent")
            lines.append(f"{name:<20}{m['accuracy']:>10.4f}{m['hits_at_k']:>10.4f}"
                         + (f"{accp:>10.4f}" if accp is not None else f"{'-':>10}"))
        if self.combined_accuracy is not None:
            lines.append(f"{'combined':<20}{self.combined_accuracy:>10.4f}")
        lines.append(f"n = {self.n}")
        return "\n".join(lines)


def evaluate(predictions: dict, truths: dict, ticket_ids=None, k: int = 3,
             tree: ContactTypeTree | None = None, combined=("contact_type", "reply_template")) -> EvalReport:
    """Build a report from ``{output: ranked lists}`` and ``{output: true labels}``.

    Accuracy-plus-parent is reported for ``contact_type`` when a tree is given;
    combined accuracy when both outputs named in ``combined`` are present.
    """
    names = list(predictions)
    if not names:
        raise ValueError("no outputs to evaluate")
    n = len(truths[names[0]])
    outputs, vectors, per_class, conf = {}, {}, {}, {}
    for name in names:
        p, t = predictions[name], truths[name]
        if len(t) != n:
            raise ValueError("outputs cover different numbers of tickets")
        acc = hit_vector(p, t, 1)
        hk = hit_vector(p, t, k)
        m = {"accuracy": float(acc.mean()), "hits_at_k": float(hk.mean())}
        vectors[f"{name}/accuracy"] = acc
        vectors[f"{name}/hits_at_k"] = hk
        if tree is not None and name == "contact_type":
            pv = parent_vector(p, t, tree)
            m["accuracy_plus_parent"] = float(pv.mean())
            vectors[f"{name}/accuracy_plus_parent"] = pv
        outputs[name] = m
        per_class[name] = per_class_f1_vs_frequency(p, t)
        conf[name] = confusions(p, t)
    comb = None
    a, b = combined
    if a in predictions and b in predictions:
        cv = combined_vector(predictions[a], predictions[b], truths[a], truths[b])
        comb = float(cv.mean())
        vectors["combined_accuracy"] = cv
    ids = list(ticket_ids) if ticket_ids is not None else list(range(n))
    return EvalReport(n, k, ids, outputs, comb, per_class, conf, vectors)


# -- comparison --------------------------------------------------------------

def paired_bootstrap(a, b, n_resamples: int = 10000, seed: int = 0, paired: bool = True) -> tuple:
    """Observed mean difference ``mean(b) - mean(a)`` and its two-sided bootstrap p-value.

    The p-value is ``(1 + #{|d* - d| >= |d|}) / (1 + B)``, i.e. the share of
    resampled differences, recentered on the observed one, that are at least
    as extreme as the observation.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if paired and a.shape != b.shape:
        raise ValueError("paired comparison needs equally long outcome vectors")
    if a.size == 0 or b.size == 0:
        raise ValueError("empty outcome vector")
    delta = float(b.mean() - a.mean())
    rng = np.random.default_rng(seed)
    extreme = 0
    chunk = max(1, 2_000_000 // max(a.size, b.size))
    done = 0
    diff = b - a if paired else None
    while done < n_resamples:
        m = min(chunk, n_resamples - done)
        if paired:
            idx = rng.integers(0, diff.size, size=(m, diff.size))
            stats = diff[idx].mean(axis=1)
        else:
            stats = (b[rng.integers(0, b.size, size=(m, b.size))].mean(axis=1)
                     - a[rng.integers(0, a.size, size=(m, a.size))].mean(axis=1))
        extreme += int(np.sum(np.abs(stats - delta) >= abs(delta) - 1e-15))
        done += m
    return delta, (1 + extreme) / (1 + n_resamples)


def compare_runs(report_a: EvalReport, report_b: EvalReport, paired: bool = True,
                 n_resamples: int = 10000, seed: int = 0) -> dict:
    """Per-metric ``{a, b, delta, p_value}``; delta is b minus a."""
    if paired and report_a.ticket_ids != report_b.ticket_ids:
        raise ValueError("paired comparison needs reports over the same tickets in the same order")
    out = {}
    for key in sorted(set(report_a.vectors) & set(report_b.vectors)):
        va, vb = report_a.vectors[key], report_b.vectors[key]
        delta, p = paired_bootstrap(va, vb, n_resamples, seed, paired)
        out[key] = {"a": float(va.mean()), "b": float(vb.mean()), "delta": delta, "p_value": p}
    return out


# -- prediction dumps ----------------------------------------------------------

def prediction_records(ticket_ids, task: str, rankings) -> list:
    return [{"ticket_id": tid, "task": task, "ranking": [[c, float(s)] for c, s in r]}
            for tid, r in zip(ticket_ids, rankings)]


def write_predictions(path, records) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_predictions(path) -> dict:
    """``{task: {ticket_id: [(class, score), ...]}}`` from a JSON-lines dump."""
    out: dict = {}
    with Path(path).open(encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                out.setdefault(r["task"], {})[r["ticket_id"]] = [(c, float(s)) for c, s in r["ranking"]]
            except (ValueError, KeyError, TypeError) as e:
                raise ValueError(f"line {i}: malformed prediction record ({e})") from None
    return out
