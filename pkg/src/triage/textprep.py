"""Text cleaning: HTML stripping, tokenization, stop words, stemming, bags of words."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable, Sequence

from nltk.stem.porter import PorterStemmer

# Frozen list; changing it changes every downstream vocabulary.
STOP_WORDS = frozenset("""
a about above after again against all am an and any are as at be because been
before being below between both but by can cannot could did do does doing down
during each few for from further had has have having he her here hers herself
him himself his how i if in into is it its itself just me more most my myself
no nor not now of off on once only or other ought our ours ourselves out over
own same she should so some such than that the their theirs them themselves then
there these they this those through to too under until up very was we were what
when where which while who whom why will with would you your yours yourself
yourselves im ive id dont didnt doesnt cant wont isnt wasnt arent s t ll ve re d m
""".split())

_TAG_RE = re.compile(r"<!--.*?-->|</?[A-Za-z][A-Za-z0-9:-]*(?:\s[^<>]*)?/?>", re.DOTALL)
_ENTITY_RE = re.compile(r"&(?:#(\d+)|#[xX]([0-9A-Fa-f]+)|(amp|lt|gt|quot|apos));")
_NAMED = {"amp": "&", "lt": "<", "gt": ">", "quot": '"', "apos": "'"}
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def _entity(m: re.Match) -> str:
    dec, hexa, name = m.groups()
    if name:
        return _NAMED[name]
    code = int(dec) if dec else int(hexa, 16)
    try:
        return chr(code)
    except (ValueError, OverflowError):
        return m.group(0)


def strip_html(text: str) -> str:
    """Remove markup tags and decode the common entity references.

    A ``<`` that does not open a tag is kept as a literal character.
    """
    while True:
        stripped = _TAG_RE.sub("", text)
        if stripped == text:
            break
        text = stripped
    text = _ENTITY_RE.sub(_entity, text)
    return re.sub(r"[ \t]{2,}", " ", text).strip()


@dataclass(frozen=True)
class Token:
    surface: str
    base: str


_stemmer = PorterStemmer(mode=PorterStemmer.ORIGINAL_ALGORITHM)


@lru_cache(maxsize=200_000)
def normalize(token: str) -> str:
    """Porter stem iterated to a fixed point.

    A single Porter pass is not idempotent (``agreed`` -> ``agre`` -> ``agr``);
    iterating makes it so, and terminates because stems never grow.
    """
    cur = token
    while True:
        nxt = _stemmer.stem(cur)
        if nxt == cur or not nxt:
            return cur
        cur = nxt


def identity(token: str) -> str:
    return token


def tokenize(
    text: str,
    stop_words: frozenset | None = STOP_WORDS,
    normalizer: Callable[[str], str] | None = normalize,
) -> list:
    """Split on non-alphanumeric boundaries, lowercase, drop stop words, normalize.

    Pass ``stop_words=None`` and ``normalizer=None`` to get plain lowercase words.
    """
    out = []
    for m in _TOKEN_RE.finditer(text):
        surface = m.group(0)
        low = surface.lower()
        if stop_words is not None and low in stop_words:
            continue
        base = normalizer(low) if normalizer is not None else low
        if base:
            out.append(Token(surface, base))
    return out


@dataclass
class BagOfWords:
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        self.counts = {t: int(c) for t, c in self.counts.items() if c}

    @classmethod
    def from_tokens(cls, tokens: Iterable) -> "BagOfWords":
        return cls(Counter(t.base if isinstance(t, Token) else t for t in tokens))

    def __add__(self, other: "BagOfWords") -> "BagOfWords":
        c = Counter(self.counts)
        c.update(other.counts)
        return BagOfWords(dict(c))

    def __len__(self):
        return len(self.counts)


def preprocess(text: str) -> BagOfWords:
    """Full chain: strip markup, tokenize, drop stop words, stem, count."""
    return BagOfWords.from_tokens(tokenize(strip_html(text)))


class Dictionary:
    """Dense term index plus document frequencies."""

    def __init__(self, terms: Sequence[str], dfs: Sequence[int]):
        self.terms = list(terms)
        self.dfs = [int(d) for d in dfs]
        self.index = {t: i for i, t in enumerate(self.terms)}
        if len(self.index) != len(self.terms):
            raise ValueError("duplicate terms in dictionary")

    def __len__(self):
        return len(self.terms)

    def __contains__(self, term):
        return term in self.index

    def df(self, term: str) -> int:
        return self.dfs[self.index[term]]

    def save(self, path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for i, (t, d) in enumerate(zip(self.terms, self.dfs)):
                fh.write(f"{i}\t{t}\t{d}\n")

    @classmethod
    def load(cls, path) -> "Dictionary":
        terms, dfs = [], []
        with Path(path).open(encoding="utf-8") as fh:
            for n, line in enumerate(fh):
                idx, term, df = line.rstrip("\n").split("\t")
                if int(idx) != n:
                    raise ValueError(f"dictionary index {idx} out of order at line {n + 1}")
                terms.append(term)
                dfs.append(int(df))
        return cls(terms, dfs)


def build_dictionary(docs: Sequence[BagOfWords], min_df: int = 2, max_vocab: int = 50000) -> Dictionary:
    """Keep terms with df >= min_df, the ``max_vocab`` most frequent ones.

    Indices follow descending document frequency, then lexicographic order.
    """
    if min_df < 1 or max_vocab < 1:
        raise ValueError("min_df and max_vocab must be >= 1")
    if not docs:
        raise ValueError("cannot build a dictionary from an empty corpus")
    df = Counter()
    for d in docs:
        df.update(d.counts.keys())
    kept = sorted((t for t, n in df.items() if n >= min_df), key=lambda t: (-df[t], t))[:max_vocab]
    return Dictionary(kept, [df[t] for t in kept])
