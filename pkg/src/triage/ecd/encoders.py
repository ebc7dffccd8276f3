"""Per-kind input encoders; each maps one feature batch to a (B, width) tensor."""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor, ops
from .layers import RNN, BatchNorm, Embedding, Module


class Encoder(Module):
    width: int
    has_missing = False

    def encode(self, batch, train: bool, rng) -> Tensor:
        raise NotImplementedError

    def __call__(self, batch, train: bool, rng) -> Tensor:
        out = self.encode(batch, train, rng)
        if self.has_missing:
            missing = batch[-1]
            if missing.any():
                m = missing.astype(out.dtype)[:, None]
                out = out * (1.0 - m) + ops.mul(self.placeholder, m)
        return out

    def _with_placeholder(self, dtype):
        # learned stand-in for missing values, starts at zero
        self.has_missing = True
        self.placeholder = self.param("placeholder", np.zeros(self.width, dtype=dtype))


class TextCNN(Encoder):
    """Parallel same-padded convolutions, ReLU, masked max-pool over time, concatenated."""

    def __init__(self, vocab_size, params, rng, dtype):
        super().__init__()
        self.embed = self.child("embed", Embedding(vocab_size, params["embedding_size"], rng, dtype))
        self.convs = []
        D = params["embedding_size"]
        n = params["num_filters"]
        for w in params["filter_sizes"]:
            lim = np.sqrt(6.0 / (w * D + n))
            W = self.param(f"conv{w}_weight", rng.uniform(-lim, lim, size=(w, D, n)).astype(dtype))
            b = self.param(f"conv{w}_bias", np.zeros(n, dtype=dtype))
            self.convs.append((W, b))
        self.width = n * len(params["filter_sizes"])

    def encode(self, batch, train, rng):
        ids, mask = batch
        x = self.embed(ids)
        pooled = [ops.max_pool_over_time(ops.relu(ops.conv1d(x, W, b)), mask) for W, b in self.convs]
        return pooled[0] if len(pooled) == 1 else ops.concat(pooled, axis=1)


class TextRNN(Encoder):
    """Recurrent encoder; the encoding is the final state (both directions when bidirectional)."""

    def __init__(self, vocab_size, params, rng, dtype):
        super().__init__()
        self.embed = self.child("embed", Embedding(vocab_size, params["embedding_size"], rng, dtype))
        self.rnn = self.child("rnn", RNN(params["cell_type"], params["embedding_size"], params["state_size"],
                                         params["num_layers"], params["bidirectional"], rng, dtype))
        self.width = self.rnn.width

    def encode(self, batch, train, rng):
        ids, mask = batch
        _, final = self.rnn(self.embed(ids), mask)
        return final


class TextCRNN(Encoder):
    """Stacked convolutions feeding a recurrent layer."""

    def __init__(self, vocab_size, params, rng, dtype):
        super().__init__()
        D = params["embedding_size"]
        self.embed = self.child("embed", Embedding(vocab_size, D, rng, dtype))
        w, n = params["filter_size"], params["num_filters"]
        self.convs = []
        c_in = D
        for i in range(params["num_conv_layers"]):
            lim = np.sqrt(6.0 / (w * c_in + n))
            W = self.param(f"conv{i}_weight", rng.uniform(-lim, lim, size=(w, c_in, n)).astype(dtype))
            b = self.param(f"conv{i}_bias", np.zeros(n, dtype=dtype))
            self.convs.append((W, b))
            c_in = n
        self.rnn = self.child("rnn", RNN(params["cell_type"], c_in, params["state_size"],
                                         params["num_layers"], params["bidirectional"], rng, dtype))
        self.width = self.rnn.width

    def encode(self, batch, train, rng):
        ids, mask = batch
        x = self.embed(ids)
        for W, b in self.convs:
            x = ops.relu(ops.conv1d(x, W, b))
        _, final = self.rnn(x, mask)
        return final


class CategoryEmbed(Encoder):
    def __init__(self, vocab_size, params, rng, dtype):
        super().__init__()
        self.embed = self.child("embed", Embedding(vocab_size, params["embedding_size"], rng, dtype))
        self.width = params["embedding_size"]
        self._with_placeholder(dtype)

    def encode(self, batch, train, rng):
        return self.embed(batch[0])


class NumericBatchNorm(Encoder):
    def __init__(self, params, dtype):
        super().__init__()
        self.width = 1
        self.bn = self.child("bn", BatchNorm(1, dtype))
        self._with_placeholder(dtype)

    def encode(self, batch, train, rng):
        return self.bn(Tensor(batch[0], dtype=self.bn.gamma.dtype), train)


class BinaryPassthrough(Encoder):
    def __init__(self, params, dtype):
        super().__init__()
        self.width = 1
        self.dtype = dtype

    def encode(self, batch, train, rng):
        return Tensor(batch[0], dtype=self.dtype)


def build_encoder(spec, vocab_size, rng, dtype) -> Encoder:
    m = spec.module
    if m.endswith("_cnn"):
        return TextCNN(vocab_size, spec.params, rng, dtype)
    if m.endswith("_crnn"):
        return TextCRNN(vocab_size, spec.params, rng, dtype)
    if m.endswith("_rnn"):
        return TextRNN(vocab_size, spec.params, rng, dtype)
    if m == "embed":
        return CategoryEmbed(vocab_size, spec.params, rng, dtype)
    if m == "batch_norm":
        return NumericBatchNorm(spec.params, dtype)
    if m == "passthrough":
        return BinaryPassthrough(spec.params, dtype)
    raise ValueError(f"unknown encoder {m!r}")
