"""Feature-engineered triage models: direct multi-class and pointwise ranking.

Both start from the same text pipeline (bag of words, TF-IDF, LSA). The
multi-class model feeds topic vectors and ticket metadata straight into a
random forest. The ranking model turns each (ticket, class) combination into
a binary example whose features are cosine similarities between the ticket
and per-class prototype vectors, plus the ticket metadata, then ranks classes
by the forest's match probability.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import LabeledTicket, ReplyTemplateBank, Ticket
from .forest import ForestConfig, ForestModel, fit_forest, predict_proba
from .textprep import BagOfWords, build_dictionary, preprocess
from .vectorize import LsaModel, SparseVector, TfIdfModel, fit_lsa, fit_tfidf, project_lsa, to_matrix, transform_tfidf

log = logging.getLogger(__name__)

CATEGORICAL_FIELDS = ("product_type", "user_type", "country", "city", "trip_status")
EPS = 1e-12


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x)
    return x / n if n > EPS else np.zeros_like(x)


def cosine(a, b) -> float:
    """Cosine similarity of two dense or two sparse vectors; 0 if either has zero norm."""
    if isinstance(a, SparseVector):
        na, nb = a.norm(), b.norm()
        if na <= EPS or nb <= EPS:
            return 0.0
        return float(np.clip(a.dot(b) / (na * nb), -1.0, 1.0))
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= EPS or nb <= EPS:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


# -- text models ------------------------------------------------------------

@dataclass
class TextModels:
    tfidf: TfIdfModel
    lsa: LsaModel

    def bag(self, text: str) -> BagOfWords:
        return preprocess(text)

    def tfidf_vector(self, text: str) -> SparseVector:
        return transform_tfidf(self.tfidf, preprocess(text))

    def vectors(self, texts) -> tuple:
        """(sparse TF-IDF rows, L2-normalized LSA rows) for a list of texts."""
        vecs = [self.tfidf_vector(t) for t in texts]
        X = to_matrix(vecs, self.tfidf.vocab_size)
        L = np.asarray(X @ self.lsa.term_factors)
        norms = np.linalg.norm(L, axis=1, keepdims=True)
        L = np.where(norms > EPS, L / np.where(norms > EPS, norms, 1.0), 0.0)
        return X, L


def fit_text_models(data, min_df: int = 2, max_vocab: int = 50000, variance_threshold: float = 0.9,
                    max_k: int = 300, seed: int = 0) -> TextModels:
    bags = [preprocess(t.ticket.message) for t in data]
    dictionary = build_dictionary(bags, min_df=min_df, max_vocab=max_vocab)
    tfidf = fit_tfidf(bags, dictionary)
    vecs = [transform_tfidf(tfidf, b) for b in bags]
    lsa = fit_lsa(vecs, variance_threshold=variance_threshold, max_k=max_k, seed=seed,
                  vocab_size=len(dictionary), terms=dictionary.terms)
    return TextModels(tfidf, lsa)


# -- prototypes --------------------------------------------------------------

@dataclass
class PrototypeSet:
    """Per-class L2-normalized prototype vectors; zero vectors for classes without history."""

    classes: list
    tfidf: dict
    lsa: dict
    template_tfidf: dict | None = None
    template_lsa: dict | None = None
    empty: list = field(default_factory=list)

    @property
    def channels(self) -> int:
        return 2 if self.template_tfidf is None else 4


def _prototype(bag: BagOfWords, tfidf: TfIdfModel, lsa: LsaModel):
    v = transform_tfidf(tfidf, bag)
    return v, _unit(project_lsa(lsa, v))


def build_prototypes(history, tfidf: TfIdfModel, lsa: LsaModel, task: str = "contact_type",
                     classes=None, bank: ReplyTemplateBank | None = None) -> PrototypeSet:
    """Union the bags of words of each class's tickets and vectorize them.

    When ``bank`` is given for the reply-template task, each template's own
    text gets a second pair of prototypes.
    """
    if classes is None:
        classes = sorted({t.label(task) for t in history})
    bags = {c: BagOfWords() for c in classes}
    for t in history:
        c = t.label(task)
        if c in bags:
            bags[c] = bags[c] + preprocess(t.ticket.message)
    tf, ls, empty = {}, {}, []
    for c in classes:
        if not bags[c].counts:
            empty.append(c)
        tf[c], ls[c] = _prototype(bags[c], tfidf, lsa)
    if empty:
        log.warning("%d classes have no history and get zero prototypes: %s", len(empty), empty[:10])
    ttf = tls = None
    if bank is not None and task == "reply_template":
        ttf, tls = {}, {}
        for c in classes:
            ttf[c], tls[c] = _prototype(preprocess(bank.templates[c]), tfidf, lsa)
    return PrototypeSet(list(classes), tf, ls, ttf, tls, empty)


@dataclass(frozen=True)
class SimilarityFeatures:
    cos_tfidf: float
    cos_lsa: float
    cos_tfidf_template: float | None = None
    cos_lsa_template: float | None = None

    def as_array(self) -> np.ndarray:
        vals = [self.cos_tfidf, self.cos_lsa]
        if self.cos_tfidf_template is not None:
            vals += [self.cos_tfidf_template, self.cos_lsa_template]
        return np.array(vals)


def similarity_features(ticket_tfidf: SparseVector, ticket_lsa: np.ndarray, class_id,
                        prototypes: PrototypeSet) -> SimilarityFeatures:
    f = [cosine(ticket_tfidf, prototypes.tfidf[class_id]), cosine(ticket_lsa, prototypes.lsa[class_id])]
    if prototypes.template_tfidf is not None:
        f += [cosine(ticket_tfidf, prototypes.template_tfidf[class_id]),
              cosine(ticket_lsa, prototypes.template_lsa[class_id])]
    return SimilarityFeatures(*f)


# -- ticket metadata ----------------------------------------------------------

class MetadataEncoder:
    """Integer codes for categorical fields and median-imputed numerics.

    Code 0 is reserved for missing or unseen values. With ``one_hot`` each
    categorical field expands to one indicator column per code instead.
    """

    def __init__(self, fields=CATEGORICAL_FIELDS, one_hot: bool = False):
        self.fields = tuple(fields)
        self.one_hot = one_hot
        self.codes = {}
        self.eta_fill = 0.0

    def fit(self, tickets) -> "MetadataEncoder":
        tickets = [t.ticket if isinstance(t, LabeledTicket) else t for t in tickets]
        for f in self.fields:
            values = sorted({getattr(t, f) for t in tickets if getattr(t, f) not in (None, "")})
            self.codes[f] = {v: i + 1 for i, v in enumerate(values)}
        etas = [t.eta_minutes for t in tickets if t.eta_minutes is not None]
        self.eta_fill = float(np.median(etas)) if etas else 0.0
        return self

    @property
    def width(self) -> int:
        if self.one_hot:
            return sum(len(self.codes[f]) + 1 for f in self.fields) + 3
        return len(self.fields) + 3

    def encode(self, ticket: Ticket) -> np.ndarray:
        row = []
        for f in self.fields:
            code = self.codes[f].get(getattr(ticket, f), 0)
            if self.one_hot:
                block = [0.0] * (len(self.codes[f]) + 1)
                block[code] = 1.0
                row += block
            else:
                row.append(float(code))
        eta = ticket.eta_minutes
        row += [self.eta_fill if eta is None else float(eta), float(eta is None), float(ticket.has_trip)]
        return np.array(row)

    def encode_many(self, tickets) -> np.ndarray:
        return np.array([self.encode(t) for t in tickets]).reshape(len(tickets), self.width)


# -- pair features --------------------------------------------------------------

@dataclass
class PairExample:
    ticket_id: str
    class_id: str
    features: np.ndarray
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError("pair labels must be 0 or 1")


class PairFeaturizer:
    """Builds pair feature rows; used unchanged for training pairs and for scoring.

    Row layout: similarity channels, then the ticket metadata. All cosines for
    one ticket are computed from that ticket's vectors alone, so a row does not
    depend on which other tickets are processed in the same call.
    """

    def __init__(self, text: TextModels, prototypes: PrototypeSet, meta: MetadataEncoder):
        self.text = text
        self.prototypes = prototypes
        self.meta = meta
        self.classes = list(prototypes.classes)
        self.class_index = {c: i for i, c in enumerate(self.classes)}
        V = text.tfidf.vocab_size
        self._p_tfidf = [to_matrix([prototypes.tfidf[c] for c in self.classes], V).T.tocsc()]
        self._p_lsa = [np.array([prototypes.lsa[c] for c in self.classes])]
        if prototypes.template_tfidf is not None:
            self._p_tfidf.append(to_matrix([prototypes.template_tfidf[c] for c in self.classes], V).T.tocsc())
            self._p_lsa.append(np.array([prototypes.template_lsa[c] for c in self.classes]))

    @property
    def width(self) -> int:
        return self.prototypes.channels + self.meta.width

    def similarity_matrix(self, tickets) -> np.ndarray:
        """(n_tickets, n_classes, channels) cosine similarities."""
        X, L = self.text.vectors([t.message for t in tickets])
        out = np.zeros((len(tickets), len(self.classes), self.prototypes.channels))
        for ch, (P, Q) in enumerate(zip(self._p_tfidf, self._p_lsa)):
            # sparse products are accumulated per row, so results are batch independent
            out[:, :, 2 * ch] = np.asarray((X @ P).todense())
            out[:, :, 2 * ch + 1] = (L[:, None, :] * Q[None, :, :]).sum(axis=2)
        return np.clip(out, -1.0, 1.0)

    def ticket_features(self, tickets) -> np.ndarray:
        """(n_tickets, n_classes, width) feature rows for every candidate class."""
        tickets = [t.ticket if isinstance(t, LabeledTicket) else t for t in tickets]
        sims = self.similarity_matrix(tickets)
        meta = self.meta.encode_many(tickets)
        meta = np.broadcast_to(meta[:, None, :], (len(tickets), len(self.classes), meta.shape[1]))
        return np.concatenate([sims, meta], axis=2)

    def pair_features(self, ticket: Ticket, class_id) -> np.ndarray:
        return self.ticket_features([ticket])[0, self.class_index[class_id]]


def make_pairs(data, featurizer: PairFeaturizer, negatives_per_positive: int = 5, seed: int = 0,
               task: str = "contact_type", chunk: int = 2000) -> list:
    """One positive and up to ``negatives_per_positive`` sampled negatives per ticket."""
    if negatives_per_positive < 1:
        raise ValueError("negatives_per_positive must be >= 1")
    classes = featurizer.classes
    C = len(classes)
    if C < 2:
        raise ValueError("ranking needs at least two classes")
    n_neg = min(negatives_per_positive, C - 1)
    rng = np.random.default_rng(seed)
    pairs = []
    for lo in range(0, len(data), chunk):
        part = data[lo:lo + chunk]
        feats = featurizer.ticket_features(part)
        for j, t in enumerate(part):
            pos = featurizer.class_index[t.label(task)]
            others = np.delete(np.arange(C), pos)
            negs = others[rng.choice(C - 1, size=n_neg, replace=False)]
            pairs.append(PairExample(t.id, classes[pos], feats[j, pos].copy(), 1))
            for k in negs:
                pairs.append(PairExample(t.id, classes[k], feats[j, k].copy(), 0))
    return pairs


def train_ranker(pairs, config: ForestConfig | None = None) -> ForestModel:
    if not pairs:
        raise ValueError("no training pairs")
    X = np.array([p.features for p in pairs])
    y = np.array([p.label for p in pairs], dtype=np.int64)
    if np.unique(y).size < 2:
        raise ValueError("ranking pairs need both positive and negative labels")
    return fit_forest(X, y, config, n_classes=2)


def _order(scores: np.ndarray, index: np.ndarray) -> np.ndarray:
    return np.lexsort((index, -scores))


def rank_classes(model: ForestModel, ticket: Ticket, candidates, featurizer: PairFeaturizer,
                 top_k: int = 3) -> list:
    """Top-``k`` ``(class, score)`` by match probability; ties go to the lower class index."""
    if not candidates:
        raise ValueError("no candidate classes")
    ticket = ticket.ticket if isinstance(ticket, LabeledTicket) else ticket
    feats = featurizer.ticket_features([ticket])[0]
    idx = np.array([featurizer.class_index[c] for c in candidates])
    scores = predict_proba(model, feats[idx])[:, 1]
    order = _order(scores, idx)[:top_k]
    return [(candidates[i], float(scores[i])) for i in order]


def rank_many(model: ForestModel, tickets, featurizer: PairFeaturizer, top_k: int = 3,
              chunk: int = 500) -> list:
    """``rank_classes`` over all classes for many tickets at once."""
    out = []
    C = len(featurizer.classes)
    idx = np.arange(C)
    for lo in range(0, len(tickets), chunk):
        feats = featurizer.ticket_features(tickets[lo:lo + chunk])
        n = feats.shape[0]
        scores = predict_proba(model, feats.reshape(n * C, -1))[:, 1].reshape(n, C)
        for row in scores:
            order = _order(row, idx)[:top_k]
            out.append([(featurizer.classes[i], float(row[i])) for i in order])
    return out


# -- multi-class baseline ------------------------------------------------------

@dataclass
class MulticlassBaseline:
    forest: ForestModel
    classes: list
    text: TextModels
    meta: MetadataEncoder
    use_tfidf: bool = False

    def features(self, tickets) -> np.ndarray:
        tickets = [t.ticket if isinstance(t, LabeledTicket) else t for t in tickets]
        X, L = self.text.vectors([t.message for t in tickets])
        parts = [L, self.meta.encode_many(tickets)]
        if self.use_tfidf:
            parts.insert(0, np.asarray(X.todense()))
        return np.hstack(parts)

    def predict_topk(self, tickets, k: int = 3) -> list:
        P = predict_proba(self.forest, self.features(tickets))
        idx = np.arange(len(self.classes))
        return [[(self.classes[i], float(p[i])) for i in _order(p, idx)[:k]] for p in P]


def train_multiclass_baseline(data, text: TextModels, config: ForestConfig | None = None,
                              task: str = "contact_type", classes=None, use_tfidf: bool = False,
                              meta: MetadataEncoder | None = None) -> MulticlassBaseline:
    """Random forest over [LSA vector | metadata codes | numerics] (TF-IDF optional)."""
    classes = list(classes) if classes is not None else sorted({t.label(task) for t in data})
    index = {c: i for i, c in enumerate(classes)}
    meta = meta or MetadataEncoder().fit(data)
    model = MulticlassBaseline(None, classes, text, meta, use_tfidf)
    X = model.features(data)
    y = np.array([index[t.label(task)] for t in data], dtype=np.int64)
    model.forest = fit_forest(X, y, config, n_classes=len(classes))
    return model


# -- end-to-end fitting ----------------------------------------------------------

@dataclass
class V1Config:
    mode: str = "ranking"  # or "classification"
    min_df: int = 2
    max_vocab: int = 50000
    variance_threshold: float = 0.9
    max_k: int = 300
    negatives_per_positive: int = 5
    use_tfidf: bool = False
    one_hot: bool = False  # expand categorical codes into indicator columns
    forest: ForestConfig = field(default_factory=ForestConfig)

    def __post_init__(self):
        if self.mode not in ("ranking", "classification"):
            raise ValueError(f"mode must be 'ranking' or 'classification', got {self.mode!r}")
        if isinstance(self.forest, dict):
            self.forest = ForestConfig(**self.forest)


@dataclass
class V1Model:
    """One task's v1 model, either formulation, with a common ``predict_topk``."""

    task: str
    config: V1Config
    text: TextModels
    classes: list
    ranker: ForestModel | None = None
    featurizer: PairFeaturizer | None = None
    baseline: MulticlassBaseline | None = None

    def predict_topk(self, tickets, k: int = 3) -> list:
        tickets = [t.ticket if isinstance(t, LabeledTicket) else t for t in tickets]
        if self.config.mode == "ranking":
            return rank_many(self.ranker, tickets, self.featurizer, k)
        return self.baseline.predict_topk(tickets, k)


def fit_v1(train_data, task: str, classes, config: V1Config | None = None, seed: int = 0,
           bank: ReplyTemplateBank | None = None, text: TextModels | None = None) -> V1Model:
    config = config or V1Config()
    text = text or fit_text_models(train_data, config.min_df, config.max_vocab,
                                   config.variance_threshold, config.max_k, seed)
    meta = MetadataEncoder(one_hot=config.one_hot).fit(train_data)
    fcfg = ForestConfig(**{**config.forest.__dict__, "seed": seed})
    if config.mode == "classification":
        base = train_multiclass_baseline(train_data, text, fcfg, task, classes, config.use_tfidf, meta)
        return V1Model(task, config, text, list(classes), baseline=base)
    protos = build_prototypes(train_data, text.tfidf, text.lsa, task, classes,
                              bank if task == "reply_template" else None)
    feat = PairFeaturizer(text, protos, meta)
    pairs = make_pairs(train_data, feat, config.negatives_per_positive, seed, task)
    ranker = train_ranker(pairs, fcfg)
    return V1Model(task, config, text, list(classes), ranker=ranker, featurizer=feat)
