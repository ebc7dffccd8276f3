"""Minibatch Adam training with validation-based early stopping."""

from __future__ import annotations

import logging
import time

import numpy as np

from ..autodiff import Adam, no_grad
from ..corpus import DatasetSplit
from .decoders import SoftmaxDecoder, TreePathDecoder
from .model import EcdModel

log = logging.getLogger(__name__)


def evaluate_model(model: EcdModel, encoded, batch_size: int | None = None) -> dict:
    """Validation loss (teacher forced) and top-1 accuracy of every categorical output."""
    bs = batch_size or model.config.training["eval_batch_size"]
    n = encoded.n
    loss_sum = 0.0
    correct = {name: 0 for name, d in model.decoders.items()
               if isinstance(d, (SoftmaxDecoder, TreePathDecoder))}
    with no_grad():
        for lo in range(0, n, bs):
            rows = np.arange(lo, min(lo + bs, n))
            inputs, targets = encoded.batch(rows)
            outs = model.forward(inputs, targets)
            loss_sum += float(model.total_loss(outs).data) * rows.size
            for name in correct:
                dec = model.decoders[name]
                if isinstance(dec, SoftmaxDecoder):
                    pred = np.argmax(outs[name].logits.data, axis=1)
                else:
                    hyps = (dec.greedy(outs[name].hidden) if dec.beam_width == 1 else
                            [dec.beam(outs[name].hidden[i:i + 1], dec.beam_width)[0] for i in range(rows.size)])
                    pred = np.array([dec.class_index.get(dec.final_node(h), -1) for h in hyps])
                correct[name] += int(np.sum(pred == targets[name]))
    out = {"loss": loss_sum / max(n, 1)}
    for name, c in correct.items():
        out[f"{name}_accuracy"] = c / max(n, 1)
    return out


def train(model: EcdModel, split: DatasetSplit, epochs: int | None = None, seed: int | None = None,
          patience: int | None = None, batch_size: int | None = None,
          validation_field: str | None = None, time_budget: float | None = None,
          stop_at: float | None = None):
    """Train in place and return ``(model, history)``.

    ``history[0]`` holds the metrics at initialization. Early stopping watches
    the validation accuracy of ``validation_field`` (default: the first
    categorical output in evaluation order); the best epoch's parameters are
    restored at the end. ``stop_at`` ends training as soon as the watched
    accuracy reaches that value.
    """
    tcfg = model.config.training
    epochs = tcfg["epochs"] if epochs is None else epochs
    patience = tcfg["early_stop"] if patience is None else patience
    stop_at = tcfg["stop_at"] if stop_at is None else stop_at
    batch_size = tcfg["batch_size"] if batch_size is None else batch_size
    seed = model.seed if seed is None else seed
    if not split.train:
        raise ValueError("training split is empty")
    field = validation_field or tcfg["validation_field"]
    if field is None:
        cats = [n for n in model.order if isinstance(model.decoders[n], (SoftmaxDecoder, TreePathDecoder))]
        field = cats[0] if cats else None
    metric = f"{field}_accuracy" if field else "loss"

    train_enc = model.encode_data(split.train)
    val_enc = model.encode_data(split.validation) if split.validation else None
    opt = Adam(model.parameters(), lr=tcfg["learning_rate"], clip_norm=tcfg["clip_norm"])
    rng = np.random.default_rng(seed)

    def score(m):
        return -m["loss"] if metric == "loss" else m[metric]

    history = []
    first = {"epoch": 0, "train_loss": _mean_loss(model, train_enc)}
    if val_enc is not None:
        first.update({f"val_{k}": v for k, v in evaluate_model(model, val_enc).items()})
    history.append(first)
    best_score = score(_val_view(first)) if val_enc is not None else -np.inf
    best_state = _snapshot(model)
    best_epoch, stale = 0, 0
    start = time.monotonic()

    for epoch in range(1, epochs + 1):
        order = rng.permutation(train_enc.n)
        total, seen = 0.0, 0
        for lo in range(0, train_enc.n, batch_size):
            rows = order[lo:lo + batch_size]
            inputs, targets = train_enc.batch(rows)
            opt.zero_grad()
            outs = model.forward(inputs, targets, train=True, rng=rng)
            loss = model.total_loss(outs)
            if loss.requires_grad:
                loss.backward()
            opt.step()
            total += float(loss.data) * rows.size
            seen += rows.size
        rec = {"epoch": epoch, "train_loss": total / seen}
        if val_enc is not None:
            rec.update({f"val_{k}": v for k, v in evaluate_model(model, val_enc).items()})
        history.append(rec)
        log.info("epoch %d: %s", epoch, {k: round(v, 4) for k, v in rec.items() if k != "epoch"})
        if val_enc is None:
            best_state, best_epoch = _snapshot(model), epoch
        else:
            s = score(_val_view(rec))
            if s > best_score:
                best_score, best_state, best_epoch, stale = s, _snapshot(model), epoch, 0
            else:
                stale += 1
                if stale >= patience:
                    log.info("early stop after epoch %d (best %d)", epoch, best_epoch)
                    break
            if stop_at is not None and metric != "loss" and rec[f"val_{metric}"] >= stop_at:
                log.info("target %s >= %s reached at epoch %d", metric, stop_at, epoch)
                break
        if time_budget is not None and time.monotonic() - start > time_budget:
            log.warning("time budget exhausted after epoch %d", epoch)
            break
    model.load_state_dict(best_state)
    model.best_epoch = best_epoch
    return model, history


def _val_view(rec: dict) -> dict:
    return {k[4:]: v for k, v in rec.items() if k.startswith("val_")}


def _snapshot(model: EcdModel) -> dict:
    return {k: v.copy() for k, v in model.state_dict().items()}


def _mean_loss(model: EcdModel, enc) -> float:
    bs = model.config.training["eval_batch_size"]
    total = 0.0
    with no_grad():
        for lo in range(0, enc.n, bs):
            rows = np.arange(lo, min(lo + bs, enc.n))
            inputs, targets = enc.batch(rows)
            total += float(model.total_loss(model.forward(inputs, targets)).data) * rows.size
    return total / enc.n
