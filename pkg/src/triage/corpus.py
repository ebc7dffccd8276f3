"""Ticket schema, contact-type hierarchy, reply templates and the synthetic corpus.

The generator stands in for a production ticket log. Every class gets a pool of
keywords, a set of reply templates and its own metadata distribution, so the
labels are learnable from both text and context with a tunable amount of noise.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

TICKET_FIELDS = (
    "id",
    "message",
    "created_at",
    "product_type",
    "user_type",
    "country",
    "city",
    "eta_minutes",
    "trip_status",
    "has_trip",
)
RECORD_FIELDS = TICKET_FIELDS + ("contact_type", "reply_template")

NO_TRIP = "none"


class DatasetError(ValueError):
    """Raised for malformed dataset files or records."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Ticket:
    id: str
    message: str
    created_at: str
    product_type: str
    user_type: str
    country: str
    city: str
    eta_minutes: float | None
    trip_status: str
    has_trip: bool

    def __post_init__(self):
        if not self.message.strip():
            raise ValueError(f"ticket {self.id!r}: empty message")
        if self.eta_minutes is not None:
            if not self.has_trip:
                raise ValueError(f"ticket {self.id!r}: eta_minutes without a trip")
            if not self.eta_minutes >= 0:
                raise ValueError(f"ticket {self.id!r}: eta_minutes must be nonnegative")
        dt.datetime.fromisoformat(self.created_at)

    def features(self) -> dict:
        """All fields except the id, in a JSON-friendly form."""
        d = asdict(self)
        d.pop("id")
        return d


@dataclass(frozen=True)
class LabeledTicket:
    ticket: Ticket
    contact_type: str
    reply_template: str

    @property
    def id(self) -> str:
        return self.ticket.id

    def label(self, task: str) -> str:
        if task == "contact_type":
            return self.contact_type
        if task == "reply_template":
            return self.reply_template
        raise KeyError(task)

    def to_record(self) -> dict:
        rec = asdict(self.ticket)
        rec["contact_type"] = self.contact_type
        rec["reply_template"] = self.reply_template
        return rec


@dataclass(frozen=True)
class DatasetSplit:
    train: list
    validation: list
    test: list
    seed: int

    def __post_init__(self):
        ids = [set(t.id for t in part) for part in (self.train, self.validation, self.test)]
        if ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2]:
            raise ValueError("dataset splits overlap")


class ContactTypeTree:
    """Rooted tree of contact types.

    ``nodes`` keeps construction (breadth-first) order, which is also the order
    used for children lists, so traversals are deterministic.
    """

    def __init__(self, nodes: Sequence[str], parent: dict, labels: dict | None = None):
        self.nodes = tuple(nodes)
        self.parent = {n: parent.get(n) for n in self.nodes}
        self.labels = dict(labels or {n: n for n in self.nodes})
        self._validate()
        self._children = {n: [] for n in self.nodes}
        for n in self.nodes:
            p = self.parent[n]
            if p is not None:
                self._children[p].append(n)
        self._index = {n: i for i, n in enumerate(self.nodes)}

    def _validate(self):
        if len(set(self.nodes)) != len(self.nodes):
            raise ValueError("duplicate node ids in tree")
        roots = [n for n in self.nodes if self.parent[n] is None]
        if len(roots) != 1:
            raise ValueError(f"tree must have exactly one root, found {len(roots)}")
        node_set = set(self.nodes)
        for n, p in self.parent.items():
            if p is not None and p not in node_set:
                raise ValueError(f"node {n!r} has unknown parent {p!r}")
        for n in self.nodes:
            seen = set()
            cur = n
            while cur is not None:
                if cur in seen:
                    raise ValueError(f"cycle in parent links through {cur!r}")
                seen.add(cur)
                cur = self.parent[cur]
        self.root = roots[0]

    def __contains__(self, node) -> bool:
        return node in self._index

    def __len__(self) -> int:
        return len(self.nodes)

    def index(self, node: str) -> int:
        return self._index[node]

    def children(self, node: str) -> list:
        return self._children[node]

    def is_leaf(self, node: str) -> bool:
        return not self._children[node]

    def path(self, node: str) -> list:
        """Root-to-node sequence of node ids."""
        out = []
        cur = node
        while cur is not None:
            out.append(cur)
            cur = self.parent[cur]
        return out[::-1]

    def depth_of(self, node: str) -> int:
        return len(self.path(node)) - 1

    @property
    def depth(self) -> int:
        """Number of levels, counting the root level."""
        return 1 + max(self.depth_of(n) for n in self.nodes)

    @property
    def max_branching(self) -> int:
        return max(len(c) for c in self._children.values())

    def non_root(self) -> list:
        return [n for n in self.nodes if n != self.root]

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {"id": n, "parent": self.parent[n], "label": self.labels.get(n, n)}
                for n in self.nodes
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ContactTypeTree":
        nodes = [x["id"] for x in d["nodes"]]
        parent = {x["id"]: x.get("parent") for x in d["nodes"]}
        labels = {x["id"]: x.get("label", x["id"]) for x in d["nodes"]}
        return cls(nodes, parent, labels)


@dataclass
class ReplyTemplateBank:
    templates: dict
    allowed_for: dict

    def __post_init__(self):
        for node, ids in self.allowed_for.items():
            missing = [t for t in ids if t not in self.templates]
            if missing:
                raise ValueError(f"contact type {node!r} allows unknown templates {missing}")

    def __contains__(self, template_id) -> bool:
        return template_id in self.templates

    def ids(self) -> list:
        return list(self.templates)

    def to_dict(self) -> dict:
        return {"templates": self.templates, "allowed_for": {k: list(v) for k, v in self.allowed_for.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "ReplyTemplateBank":
        return cls(dict(d["templates"]), {k: tuple(v) for k, v in d["allowed_for"].items()})


# --------------------------------------------------------------------------
# Generator

USER_TYPES = ("rider", "driver", "eater")
PRODUCT_TYPES = ("uberx", "pool", "black", "xl", "eats")
COUNTRIES = {
    "us": ("san_francisco", "new_york", "chicago"),
    "br": ("sao_paulo", "rio", "brasilia"),
    "in": ("mumbai", "delhi", "bangalore"),
    "fr": ("paris", "lyon", "marseille"),
    "au": ("sydney", "melbourne", "perth"),
}
TRIP_STATUSES = ("completed", "canceled", "in_progress", "scheduled")

FILLER_WORDS = (
    "app", "help", "please", "today", "yesterday", "phone", "issue", "problem",
    "account", "thanks", "again", "time", "support", "order", "ride", "still",
    "really", "update", "asap", "email",
)
OPENERS = ("hi", "hello", "hey there", "good morning", "dear support", "")
GLUE = ("i", "my", "the", "was", "and", "it", "is", "a", "with", "for", "this", "have", "to")

_CONSONANTS = "bdfgklmnprtvz"
_VOWELS = "aiou"


@dataclass
class GeneratorSpec:
    """Knobs of the synthetic corpus.

    ``depth`` counts tree levels including the root. Every non-root node is a
    contact type; ``n_contact_types`` truncates the breadth-first node list.
    ``ambiguity`` is the chance that a ticket's keywords come only from its
    parent's pool, which makes the exact node unrecoverable from text.
    """

    depth: int = 3
    fanout: int = 3
    n_contact_types: int | None = None
    templates_per_class: int = 2
    keywords_per_class: int = 4
    template_keywords: int = 2
    keyword_pools: dict | None = None
    n_tickets: int = 1000
    skew: float = 1.0
    noise_vocab_size: int = 300
    noise_words: tuple = (3, 10)
    keywords_per_ticket: tuple = (1, 3)
    ancestor_rate: float = 0.7
    ambiguity: float = 0.0
    distractor_rate: float = 0.1
    template_determinism: float = 0.8
    template_keyword_rate: float = 0.5
    missing_rate: float = 0.1
    html_rate: float = 0.05
    metadata_concentration: float = 0.5
    max_message_chars: int = 1024

    def validate(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.fanout < 1:
            raise ValueError(f"fanout must be >= 1, got {self.fanout}")
        if self.n_tickets < 1:
            raise ValueError(f"n_tickets must be >= 1, got {self.n_tickets}")
        if self.templates_per_class < 1:
            raise ValueError("templates_per_class must be >= 1")
        if self.n_contact_types is not None and self.n_contact_types < 1:
            raise ValueError("n_contact_types must be >= 1")
        if self.keyword_pools is not None:
            empty = [k for k, v in self.keyword_pools.items() if not v]
            if empty:
                raise ValueError(f"empty keyword pools for {empty}")
        elif self.keywords_per_class < 1:
            raise ValueError("keyword pools would be empty (keywords_per_class < 1)")
        if self.skew < 0:
            raise ValueError("skew must be nonnegative")
        lo, hi = self.keywords_per_ticket
        if lo < 1 or hi < lo:
            raise ValueError("keywords_per_ticket must satisfy 1 <= lo <= hi")
        for name in ("ancestor_rate", "ambiguity", "distractor_rate", "template_determinism",
                     "template_keyword_rate", "missing_rate", "html_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator fields: {sorted(unknown)}")
        d = dict(d)
        for k in ("noise_words", "keywords_per_ticket"):
            if k in d:
                d[k] = tuple(d[k])
        spec = cls(**d)
        spec.validate()
        return spec


def build_tree(depth: int, fanout: int, max_nodes: int | None = None) -> ContactTypeTree:
    """Complete ``fanout``-ary tree with ``depth`` levels, ids CT0.. in BFS order."""
    nodes = ["CT0"]
    parent = {"CT0": None}
    frontier = ["CT0"]
    for _ in range(depth - 1):
        nxt = []
        for p in frontier:
            for _ in range(fanout):
                if max_nodes is not None and len(nodes) - 1 >= max_nodes:
                    break
                n = f"CT{len(nodes)}"
                nodes.append(n)
                parent[n] = p
                nxt.append(n)
        frontier = nxt
    return ContactTypeTree(nodes, parent)


def class_list(tree: ContactTypeTree) -> list:
    return tree.non_root() or [tree.root]


def _streams(seed: int, n: int = 5) -> list:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def class_ranking(spec: GeneratorSpec, seed: int) -> list:
    """Contact types ordered from most to least frequent."""
    tree = build_tree(spec.depth, spec.fanout, spec.n_contact_types)
    classes = class_list(tree)
    rng = _streams(seed)[1]
    return [classes[i] for i in rng.permutation(len(classes))]


def apportion(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder integer apportionment; ties go to the lower index."""
    w = np.asarray(weights, dtype=float)
    quota = total * w / w.sum()
    counts = np.floor(quota).astype(int)
    rem = quota - counts
    order = sorted(range(len(w)), key=lambda i: (-rem[i], i))
    for i in order[: total - counts.sum()]:
        counts[i] += 1
    return counts


def _pseudo_words(rng: np.random.Generator, n: int, taken: set) -> list:
    from .textprep import STOP_WORDS, normalize

    out = []
    while len(out) < n:
        syl = rng.integers(2, 4)
        w = "".join(
            _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
            for _ in range(syl)
        )
        if w in taken or w in STOP_WORDS or normalize(w) != w:
            continue
        taken.add(w)
        out.append(w)
    return out


@dataclass
class _ClassProfile:
    user_type: np.ndarray
    product_type: np.ndarray
    country: np.ndarray
    trip_status: np.ndarray
    p_trip: float
    eta_scale: float
    template_by_user: dict = field(default_factory=dict)


def generate_corpus(spec: GeneratorSpec, seed: int):
    """Build a deterministic synthetic corpus.

    Returns ``(tree, bank, tickets)``; the output depends only on
    ``(spec, seed)``.
    """
    spec.validate()
    tree = build_tree(spec.depth, spec.fanout, spec.n_contact_types)
    classes = class_list(tree)
    r_vocab, r_rank, r_meta, r_msg, r_order = _streams(seed)

    taken: set = set(FILLER_WORDS) | set(GLUE)
    if spec.keyword_pools is not None:
        missing = [c for c in classes if c not in spec.keyword_pools]
        if missing:
            raise ValueError(f"keyword_pools missing classes {missing}")
        pools = {c: list(spec.keyword_pools[c]) for c in classes}
        for ws in pools.values():
            taken.update(ws)
    else:
        pools = {c: _pseudo_words(r_vocab, spec.keywords_per_class, taken) for c in classes}

    templates = {}
    template_words = {}
    allowed = {}
    for c in classes:
        ids = []
        for _ in range(spec.templates_per_class):
            tid = f"RT{len(templates)}"
            words = _pseudo_words(r_vocab, spec.template_keywords, taken)
            template_words[tid] = words
            body = " ".join(words + pools[c][:2])
            templates[tid] = f"Thanks for reaching out about {body}. We have reviewed your request."
            ids.append(tid)
        allowed[c] = tuple(ids)
    bank = ReplyTemplateBank(templates, allowed)
    noise = _pseudo_words(r_vocab, spec.noise_vocab_size, taken) + list(FILLER_WORDS)

    ranking = [classes[i] for i in r_rank.permutation(len(classes))]
    weights = (np.arange(len(classes)) + 1.0) ** (-spec.skew)
    counts = apportion(spec.n_tickets, weights)

    countries = list(COUNTRIES)
    alpha = spec.metadata_concentration
    profiles = {}
    for c in classes:
        profiles[c] = _ClassProfile(
            user_type=r_meta.dirichlet([alpha] * len(USER_TYPES)),
            product_type=r_meta.dirichlet([alpha] * len(PRODUCT_TYPES)),
            country=r_meta.dirichlet([alpha] * len(countries)),
            trip_status=r_meta.dirichlet([alpha] * len(TRIP_STATUSES)),
            p_trip=float(r_meta.uniform(0.05, 0.95)),
            eta_scale=float(r_meta.uniform(2.0, 40.0)),
            template_by_user={u: int(r_meta.integers(spec.templates_per_class)) for u in USER_TYPES},
        )

    labels = [c for c, n in zip(ranking, counts) for _ in range(n)]
    labels = [labels[i] for i in r_order.permutation(len(labels))]
    base = dt.datetime(2018, 1, 1)

    tickets = []
    for i, c in enumerate(labels):
        prof = profiles[c]
        user_type = USER_TYPES[r_msg.choice(len(USER_TYPES), p=prof.user_type)]
        product_type = PRODUCT_TYPES[r_msg.choice(len(PRODUCT_TYPES), p=prof.product_type)]
        country = countries[r_msg.choice(len(countries), p=prof.country)]
        city = COUNTRIES[country][r_msg.integers(len(COUNTRIES[country]))]
        has_trip = bool(r_msg.random() < prof.p_trip) and not (r_msg.random() < spec.missing_rate)
        if has_trip:
            trip_status = TRIP_STATUSES[r_msg.choice(len(TRIP_STATUSES), p=prof.trip_status)]
            eta = round(float(r_msg.gamma(2.0, prof.eta_scale / 2.0)), 2)
        else:
            trip_status, eta = NO_TRIP, None
        if r_msg.random() < spec.template_determinism:
            t_idx = prof.template_by_user[user_type]
        else:
            t_idx = int(r_msg.integers(spec.templates_per_class))
        template = allowed[c][t_idx]
        message = _compose_message(r_msg, spec, tree, c, pools, classes, template_words[template], noise)
        created = base + dt.timedelta(seconds=int(r_msg.integers(365 * 24 * 3600)))
        ticket = Ticket(
            id=f"T{i:06d}",
            message=message,
            created_at=created.isoformat(),
            product_type=product_type,
            user_type=user_type,
            country=country,
            city=city,
            eta_minutes=eta,
            trip_status=trip_status,
            has_trip=has_trip,
        )
        tickets.append(LabeledTicket(ticket, c, template))
    return tree, bank, tickets


def _compose_message(rng, spec, tree, c, pools, classes, t_words, noise) -> str:
    parent = tree.parent[c]
    n_kw = int(rng.integers(spec.keywords_per_ticket[0], spec.keywords_per_ticket[1] + 1))
    if parent is not None and parent in pools and rng.random() < spec.ambiguity:
        source = pools[parent]
    else:
        source = pools[c]
    words = [source[rng.integers(len(source))] for _ in range(n_kw)]
    for anc in tree.path(c)[1:-1]:
        if anc in pools and rng.random() < spec.ancestor_rate:
            words.append(pools[anc][rng.integers(len(pools[anc]))])
    if rng.random() < spec.template_keyword_rate:
        words.append(t_words[rng.integers(len(t_words))])
    if rng.random() < spec.distractor_rate:
        other = classes[rng.integers(len(classes))]
        words.append(pools[other][rng.integers(len(pools[other]))])
    lo, hi = spec.noise_words
    words += [noise[rng.integers(len(noise))] for _ in range(int(rng.integers(lo, hi + 1)))]
    words = [words[j] for j in rng.permutation(len(words))]
    out = []
    for w in words:
        if rng.random() < 0.4:
            out.append(GLUE[rng.integers(len(GLUE))])
        out.append(w)
    opener = OPENERS[rng.integers(len(OPENERS))]
    text = (opener + ", " if opener else "") + " ".join(out) + "."
    if rng.random() < spec.html_rate:
        text = f"<p>{text}</p><br/>"
    return text[: spec.max_message_chars]


# --------------------------------------------------------------------------
# File formats


def _format_value(name, value) -> str:
    if value is None:
        return ""
    if name == "has_trip":
        return "true" if value else "false"
    return str(value)


def write_dataset(path, data: Iterable[LabeledTicket], format: str = "json-lines") -> None:
    path = Path(path)
    if format == "json-lines":
        with path.open("w", encoding="utf-8") as fh:
            for rec in data:
                fh.write(json.dumps(rec.to_record(), sort_keys=True) + "\n")
    elif format == "delimited":
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, quoting=csv.QUOTE_ALL, lineterminator="\n")
            writer.writerow(RECORD_FIELDS)
            for rec in data:
                r = rec.to_record()
                writer.writerow([_format_value(k, r[k]) for k in RECORD_FIELDS])
    else:
        raise ValueError(f"unknown format {format!r}")


def _parse_bool(s, line) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no", ""):
        return False
    raise DatasetError(f"has_trip: cannot parse boolean {s!r}", line)


def _record_to_ticket(rec: dict, line: int, tree, bank, labeled: bool = True):
    missing = [k for k in (RECORD_FIELDS if labeled else TICKET_FIELDS) if k not in rec]
    if missing:
        raise DatasetError(f"missing fields {missing}", line)
    eta = rec["eta_minutes"]
    try:
        eta = None if eta in (None, "") else float(eta)
        ticket = Ticket(
            id=str(rec["id"]),
            message=str(rec["message"]),
            created_at=str(rec["created_at"]),
            product_type=str(rec["product_type"]),
            user_type=str(rec["user_type"]),
            country=str(rec["country"]),
            city=str(rec["city"]),
            eta_minutes=eta,
            trip_status=str(rec["trip_status"] or NO_TRIP),
            has_trip=_parse_bool(rec["has_trip"], line),
        )
    except DatasetError:
        raise
    except (TypeError, ValueError) as e:
        raise DatasetError(str(e), line) from e
    if not labeled:
        return ticket
    ct, rt = str(rec["contact_type"]), str(rec["reply_template"])
    if tree is not None and ct not in tree:
        raise DatasetError(f"contact_type {ct!r} is not a node of the contact-type tree", line)
    if bank is not None and rt not in bank:
        raise DatasetError(f"reply_template {rt!r} is not in the template bank", line)
    return LabeledTicket(ticket, ct, rt)


def load_dataset(path, format: str = "json-lines", tree: ContactTypeTree | None = None,
                 bank: ReplyTemplateBank | None = None, labeled: bool = True) -> list:
    """Read labeled tickets; unknown columns are ignored and counted in a warning.

    With ``labeled=False`` the label columns are optional and plain
    ``Ticket`` objects are returned.
    """
    fields_needed = RECORD_FIELDS if labeled else TICKET_FIELDS
    path = Path(path)
    out = []
    unknown = 0
    if format == "json-lines":
        with path.open(encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                if not raw.strip():
                    continue
                try:
                    rec = json.loads(raw)
                except json.JSONDecodeError as e:
                    raise DatasetError(f"malformed JSON ({e.msg})", lineno) from e
                if not isinstance(rec, dict):
                    raise DatasetError("record is not an object", lineno)
                unknown += len(set(rec) - set(RECORD_FIELDS))
                out.append(_record_to_ticket(rec, lineno, tree, bank, labeled))
    elif format == "delimited":
        text = path.read_text(encoding="utf-8")
        reader = csv.reader(io.StringIO(text, newline=""))
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError("missing header row", 1)
        missing = [k for k in fields_needed if k not in header]
        if missing:
            raise DatasetError(f"missing required columns {missing}", 1)
        extra = len(set(header) - set(RECORD_FIELDS))
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"expected {len(header)} fields, got {len(row)}", lineno)
            unknown += extra
            out.append(_record_to_ticket(dict(zip(header, row)), lineno, tree, bank, labeled))
    else:
        raise ValueError(f"unknown format {format!r}")
    if unknown:
        logger.warning("ignored %d unknown field values in %s", unknown, path)
    return out


def save_tree(path, tree: ContactTypeTree) -> None:
    Path(path).write_text(json.dumps(tree.to_dict(), indent=1) + "\n")


def load_tree(path) -> ContactTypeTree:
    return ContactTypeTree.from_dict(json.loads(Path(path).read_text()))


def save_bank(path, bank: ReplyTemplateBank) -> None:
    Path(path).write_text(json.dumps(bank.to_dict(), indent=1, sort_keys=True) + "\n")


def load_bank(path) -> ReplyTemplateBank:
    return ReplyTemplateBank.from_dict(json.loads(Path(path).read_text()))


def split_dataset(data: Sequence[LabeledTicket], fractions=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Random three-way split; sizes follow ``fractions`` up to rounding."""
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(data)
    if n < 3:
        raise ValueError(f"need at least 3 records to populate all splits, got {n}")
    if len({t.id for t in data}) != n:
        raise ValueError("duplicate ticket ids in dataset")
    sizes = [int(round(n * f)) for f in fr[:2]]
    sizes.append(n - sum(sizes))
    for i in range(3):
        while sizes[i] < 1:
            j = int(np.argmax(sizes))
            sizes[j] -= 1
            sizes[i] += 1
    perm = np.random.default_rng(seed).permutation(n)
    parts = np.split(perm, np.cumsum(sizes)[:2])
    train, val, test = ([data[i] for i in p] for p in parts)
    return DatasetSplit(train, val, test, seed)
