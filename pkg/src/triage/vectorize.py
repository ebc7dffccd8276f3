"""TF-IDF weighting and latent semantic analysis via randomized truncated SVD."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .textprep import BagOfWords, Dictionary

# Share of retained variance is compared with this much slack so that a
# threshold of 1.0 is reachable despite rounding in the singular values.
VARIANCE_TOL = 1e-12


@dataclass(frozen=True)
class SparseVector:
    indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        w = np.asarray(self.weights, dtype=np.float64)
        if idx.shape != w.shape or idx.ndim != 1:
            raise ValueError("indices and weights must be 1-d arrays of equal length")
        if idx.size and np.any(np.diff(idx) <= 0):
            raise ValueError("indices must be strictly increasing")
        if np.any(w == 0):
            raise ValueError("zero weights are not stored")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "weights", w)

    @classmethod
    def empty(cls) -> "SparseVector":
        return cls(np.zeros(0, np.int64), np.zeros(0))

    @classmethod
    def from_dense(cls, x) -> "SparseVector":
        x = np.asarray(x, dtype=np.float64)
        nz = np.flatnonzero(x)
        return cls(nz, x[nz])

    def to_dense(self, size: int) -> np.ndarray:
        out = np.zeros(size)
        out[self.indices] = self.weights
        return out

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.weights, self.weights)))

    def dot(self, other: "SparseVector") -> float:
        _, ia, ib = np.intersect1d(self.indices, other.indices, assume_unique=True, return_indices=True)
        return float(np.dot(self.weights[ia], other.weights[ib]))

    def __len__(self):
        return self.indices.size


@dataclass
class TfIdfModel:
    """Smoothed idf: ``ln((1 + N) / (1 + df)) + 1``; vectors are L2-normalized."""

    dictionary: Dictionary
    idf: np.ndarray
    n_docs: int

    @property
    def vocab_size(self) -> int:
        return len(self.dictionary)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"n_docs": self.n_docs, "idf": self.idf.tolist()}))

    @classmethod
    def load(cls, path, dictionary: Dictionary) -> "TfIdfModel":
        d = json.loads(Path(path).read_text())
        return cls(dictionary, np.asarray(d["idf"], dtype=np.float64), int(d["n_docs"]))


def fit_tfidf(docs: Sequence[BagOfWords], dictionary: Dictionary) -> TfIdfModel:
    if not docs:
        raise ValueError("cannot fit tf-idf on an empty corpus")
    df = np.zeros(len(dictionary))
    for d in docs:
        for t in d.counts:
            i = dictionary.index.get(t)
            if i is not None:
                df[i] += 1
    n = len(docs)
    idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
    return TfIdfModel(dictionary, idf, n)


def transform_tfidf(model: TfIdfModel, doc: BagOfWords) -> SparseVector:
    pairs = sorted(
        (model.dictionary.index[t], c) for t, c in doc.counts.items() if t in model.dictionary.index
    )
    if not pairs:
        return SparseVector.empty()
    idx = np.array([p[0] for p in pairs], dtype=np.int64)
    w = np.array([p[1] for p in pairs], dtype=np.float64) * model.idf[idx]
    return SparseVector(idx, w / np.linalg.norm(w))


def to_matrix(vectors: Sequence[SparseVector], vocab_size: int) -> sp.csr_matrix:
    """Stack sparse vectors into a (n_docs, vocab_size) CSR matrix."""
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(v) for v in vectors])
    if vectors:
        indices = np.concatenate([v.indices for v in vectors])
        data = np.concatenate([v.weights for v in vectors])
    else:
        indices, data = np.zeros(0, np.int64), np.zeros(0)
    return sp.csr_matrix((data, indices, indptr), shape=(len(vectors), vocab_size))


def randomized_svd(A, rank: int, n_iter: int = 4, oversample: int = 10, seed: int = 0):
    """Truncated SVD by randomized range finding with power iterations.

    Returns ``U, s, Vt`` holding ``min(rank + oversample, min(A.shape))``
    components; callers slice to the rank they want. Each power iteration
    re-orthonormalizes to keep small singular directions from washing out.
    """
    m, n = A.shape
    ell = min(rank + oversample, m, n)
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((n, ell))
    Q, _ = np.linalg.qr(np.asarray(A @ omega))
    for _ in range(n_iter):
        Z, _ = np.linalg.qr(np.asarray(A.T @ Q))
        Q, _ = np.linalg.qr(np.asarray(A @ Z))
    B = np.asarray((A.T @ Q).T)
    Ub, s, Vt = np.linalg.svd(B, full_matrices=False)
    return Q @ Ub, s, Vt


@dataclass
class LsaModel:
    """Rank-k factorization of the term-document matrix.

    ``term_factors`` holds the left singular vectors, so projecting a document
    gives its row of ``V_k @ diag(s_k)``.
    """

    k: int
    term_factors: np.ndarray
    singular_values: np.ndarray
    variance_retained: float
    terms: list = field(default_factory=list)
    document_factors: np.ndarray | None = field(default=None, repr=False)

    MAGIC = b"LSAM"
    VERSION = 1

    def save(self, path) -> None:
        path = Path(path)
        vocab = self.term_factors.shape[0]
        with path.open("wb") as fh:
            fh.write(self.MAGIC + bytes([self.VERSION]))
            fh.write(struct.pack("<QQd", vocab, self.k, self.variance_retained))
            fh.write(self.singular_values.astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(self.term_factors, dtype="<f8").tobytes())
        sidecar = path.with_name(path.name + ".sv.txt")
        sidecar.write_text("".join(f"{i}\t{s:.17g}\n" for i, s in enumerate(self.singular_values)))

    @classmethod
    def load(cls, path, terms: Sequence[str] = ()) -> "LsaModel":
        raw = Path(path).read_bytes()
        if raw[:4] != cls.MAGIC:
            raise ValueError("not an LSA model file")
        if raw[4] != cls.VERSION:
            raise ValueError(f"unsupported LSA model version {raw[4]}")
        vocab, k, var = struct.unpack_from("<QQd", raw, 5)
        off = 5 + 24
        s = np.frombuffer(raw, "<f8", count=k, offset=off).copy()
        off += 8 * k
        tf = np.frombuffer(raw, "<f8", count=vocab * k, offset=off).reshape(vocab, k).copy()
        return cls(int(k), tf, s, float(var), list(terms))


def fit_lsa(docs, variance_threshold: float = 0.9, max_k: int = 300, seed: int = 0,
            n_iter: int = 4, oversample: int = 10, vocab_size: int | None = None,
            terms: Sequence[str] = ()) -> LsaModel:
    """Fit LSA, keeping the fewest components that explain ``variance_threshold``.

    ``docs`` is a list of ``SparseVector`` or a (n_docs, vocab) matrix. The
    variance share of component i is ``s_i**2 / ||T||_F**2`` with the
    Frobenius norm taken from the matrix itself, not from the truncated
    spectrum.
    """
    if not 0.0 < variance_threshold <= 1.0:
        raise ValueError(f"variance_threshold must be in (0, 1], got {variance_threshold}")
    if max_k < 1:
        raise ValueError("max_k must be >= 1")
    if isinstance(docs, (list, tuple)):
        if vocab_size is None:
            vocab_size = max((int(v.indices[-1]) + 1 for v in docs if len(v)), default=0)
        X = to_matrix(docs, vocab_size)
    elif sp.issparse(docs):
        X = sp.csr_matrix(docs, dtype=np.float64)
    else:
        X = np.asarray(docs, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValueError("need at least two documents")
    T = X.T.tocsr() if sp.issparse(X) else X.T
    total = float(T.multiply(T).sum()) if sp.issparse(T) else float(np.sum(T * T))
    if total == 0.0:
        raise ValueError("term-document matrix is all zeros")

    U, s, Vt = randomized_svd(T, max_k, n_iter=n_iter, oversample=oversample, seed=seed)
    positive = int(np.sum(s > s[0] * 1e-13))
    share = np.cumsum(s[:positive] ** 2) / total
    hit = np.flatnonzero(share >= variance_threshold - VARIANCE_TOL)
    k = int(hit[0]) + 1 if hit.size else positive
    k = max(1, min(k, max_k, positive))
    doc_factors = (Vt[:k].T * s[:k])
    return LsaModel(
        k=k,
        term_factors=np.ascontiguousarray(U[:, :k]),
        singular_values=s[:k].copy(),
        variance_retained=float(min(share[k - 1], 1.0)),
        terms=list(terms),
        document_factors=doc_factors,
    )


def project_lsa(model: LsaModel, v: SparseVector) -> np.ndarray:
    if not len(v):
        return np.zeros(model.k)
    return v.weights @ model.term_factors[v.indices]


def project_many(model: LsaModel, X: sp.csr_matrix) -> np.ndarray:
    """Row-wise projection of a (n_docs, vocab) matrix."""
    return np.asarray(X @ model.term_factors)


def lsa_topics(model: LsaModel, top_n: int = 10) -> list:
    """Per dimension, the ``top_n`` terms with the largest absolute loading."""
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    terms = model.terms or [str(i) for i in range(model.term_factors.shape[0])]
    out = []
    for d in range(model.k):
        col = model.term_factors[:, d]
        order = sorted(range(len(col)), key=lambda i: (-abs(col[i]), terms[i]))[:top_n]
        out.append((d, [(terms[i], float(col[i])) for i in order]))
    return out
