"""Directed semantic action graph.

Nodes are object categories, attributes and predicates. Edges are attribute
phrases ``(category, attribute)`` and predicate phrases
``(subject, predicate, object)`` that survive a frequency threshold.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

GRAPH_FORMAT = "vrl-graph"
GRAPH_VERSION = 1


class IngestionError(ValueError):
    """A phrase-count record or graph file could not be parsed."""


@dataclass(frozen=True)
class PhraseCounts:
    attribute_phrases: tuple[tuple[str, str, int], ...] = ()
    predicate_phrases: tuple[tuple[str, str, str, int], ...] = ()

    def __post_init__(self):
        seen = set()
        for i, rec in enumerate(self.attribute_phrases):
            if len(rec) != 3 or not isinstance(rec[2], int) or rec[2] < 0:
                raise IngestionError(f"attribute record {i}: malformed {rec!r}")
            if ("A",) + tuple(rec[:2]) in seen:
                raise IngestionError(f"attribute record {i}: duplicate phrase {rec[:2]!r}")
            seen.add(("A",) + tuple(rec[:2]))
        for i, rec in enumerate(self.predicate_phrases):
            if len(rec) != 4 or not isinstance(rec[3], int) or rec[3] < 0:
                raise IngestionError(f"predicate record {i}: malformed {rec!r}")
            if ("P",) + tuple(rec[:3]) in seen:
                raise IngestionError(f"predicate record {i}: duplicate phrase {rec[:3]!r}")
            seen.add(("P",) + tuple(rec[:3]))


def read_phrase_counts(path: str | Path) -> PhraseCounts:
    """Parse a tab-separated phrase-count file.

    Lines are ``A<TAB>subject<TAB>attribute<TAB>count`` or
    ``P<TAB>subject<TAB>predicate<TAB>object<TAB>count``. Blank lines and
    lines starting with ``#`` are ignored.
    """
    attrs, preds = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            try:
                if any(not p for p in parts[1:]):
                    raise ValueError("empty token")
                if parts[0] == "A" and len(parts) == 4:
                    attrs.append((parts[1], parts[2], _parse_count(parts[3])))
                elif parts[0] == "P" and len(parts) == 5:
                    preds.append((parts[1], parts[2], parts[3], _parse_count(parts[4])))
                else:
                    raise ValueError(f"unrecognised record ({len(parts)} fields)")
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: {exc}") from None
    try:
        return PhraseCounts(tuple(attrs), tuple(preds))
    except IngestionError as exc:
        raise IngestionError(f"{path}: {exc}") from None


def _parse_count(text: str) -> int:
    n = int(text)
    if n < 0:
        raise ValueError(f"negative count {n}")
    return n


@dataclass(frozen=True, eq=False)
class SemanticGraph:
    categories: tuple[str, ...]
    attributes: tuple[str, ...]
    predicates: tuple[str, ...]
    attr_edges: frozenset[tuple[int, int]]
    pred_edges: frozenset[tuple[int, int, int]]
    # number of phrase types retained by thresholding, kept for reference
    n_attribute_types: int = 0
    n_predicate_types: int = 0
    _attr_adj: dict = field(default=None, repr=False)
    _pred_adj: dict = field(default=None, repr=False)
    _cat_index: dict = field(default=None, repr=False)
    _attr_index: dict = field(default=None, repr=False)
    _pred_index: dict = field(default=None, repr=False)

    def __post_init__(self):
        nc, na, np_ = len(self.categories), len(self.attributes), len(self.predicates)
        for names, kind in ((self.categories, "category"), (self.attributes, "attribute"),
                            (self.predicates, "predicate")):
            if len(set(names)) != len(names):
                raise ValueError(f"duplicate {kind} names")
        attr_adj: dict[int, frozenset[int]] = {}
        pred_adj: dict[tuple[int, int], frozenset[int]] = {}
        tmp_a: dict[int, set[int]] = {}
        tmp_p: dict[tuple[int, int], set[int]] = {}
        for c, a in self.attr_edges:
            if not (0 <= c < nc and 0 <= a < na):
                raise ValueError(f"attribute edge {(c, a)} references a missing node")
            tmp_a.setdefault(c, set()).add(a)
        for c, p, c2 in self.pred_edges:
            if not (0 <= c < nc and 0 <= p < np_ and 0 <= c2 < nc):
                raise ValueError(f"predicate edge {(c, p, c2)} references a missing node")
            tmp_p.setdefault((c, c2), set()).add(p)
        attr_adj = {k: frozenset(v) for k, v in tmp_a.items()}
        pred_adj = {k: frozenset(v) for k, v in tmp_p.items()}
        object.__setattr__(self, "_attr_adj", attr_adj)
        object.__setattr__(self, "_pred_adj", pred_adj)
        object.__setattr__(self, "_cat_index", {n: i for i, n in enumerate(self.categories)})
        object.__setattr__(self, "_attr_index", {n: i for i, n in enumerate(self.attributes)})
        object.__setattr__(self, "_pred_index", {n: i for i, n in enumerate(self.predicates)})

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    @property
    def n_attributes(self) -> int:
        return len(self.attributes)

    @property
    def n_predicates(self) -> int:
        return len(self.predicates)

    def is_empty(self) -> bool:
        return not self.attr_edges and not self.pred_edges

    def category_id(self, name: str) -> int:
        try:
            return self._cat_index[name]
        except KeyError:
            raise KeyError(f"unknown category {name!r}") from None

    def attribute_id(self, name: str) -> int:
        try:
            return self._attr_index[name]
        except KeyError:
            raise KeyError(f"unknown attribute {name!r}") from None

    def predicate_id(self, name: str) -> int:
        try:
            return self._pred_index[name]
        except KeyError:
            raise KeyError(f"unknown predicate {name!r}") from None

    def _check_category(self, c: int) -> None:
        if not (isinstance(c, (int,)) and 0 <= c < len(self.categories)):
            raise KeyError(f"unknown category id {c!r}")

    def attributes_of(self, c: int) -> frozenset[int]:
        self._check_category(c)
        return self._attr_adj.get(c, frozenset())

    def predicates_between(self, c: int, c2: int) -> frozenset[int]:
        self._check_category(c)
        self._check_category(c2)
        return self._pred_adj.get((c, c2), frozenset())

    def predicate_pairs(self) -> Iterable[tuple[int, int]]:
        return self._pred_adj.keys()

    def __eq__(self, other):
        if not isinstance(other, SemanticGraph):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(self.digest())

    def stats(self) -> dict:
        nc = max(len(self.categories), 1)
        out_preds: dict[int, set[int]] = {}
        for c, p, _ in self.pred_edges:
            out_preds.setdefault(c, set()).add(p)
        return {
            "categories": len(self.categories),
            "attributes": len(self.attributes),
            "predicates": len(self.predicates),
            "attribute_edges": len(self.attr_edges),
            "predicate_edges": len(self.pred_edges),
            "attribute_types": self.n_attribute_types,
            "predicate_types": self.n_predicate_types,
            "mean_attribute_degree": len(self.attr_edges) / nc,
            "mean_predicate_degree": sum(len(v) for v in out_preds.values()) / nc,
        }

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": GRAPH_FORMAT,
            "version": GRAPH_VERSION,
            "categories": list(self.categories),
            "attributes": list(self.attributes),
            "predicates": list(self.predicates),
            "attr_edges": [list(e) for e in sorted(self.attr_edges)],
            "pred_edges": [list(e) for e in sorted(self.pred_edges)],
            "attribute_types": self.n_attribute_types,
            "predicate_types": self.n_predicate_types,
        }

    def to_bytes(self) -> bytes:
        return (json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @classmethod
    def from_dict(cls, d: Mapping) -> "SemanticGraph":
        if d.get("format") != GRAPH_FORMAT:
            raise IngestionError(f"not a graph file (format={d.get('format')!r})")
        if d.get("version") != GRAPH_VERSION:
            raise IngestionError(f"unsupported graph version {d.get('version')!r}")
        try:
            return cls(
                categories=tuple(d["categories"]),
                attributes=tuple(d["attributes"]),
                predicates=tuple(d["predicates"]),
                attr_edges=frozenset((int(c), int(a)) for c, a in d["attr_edges"]),
                pred_edges=frozenset((int(c), int(p), int(c2)) for c, p, c2 in d["pred_edges"]),
                n_attribute_types=int(d.get("attribute_types", 0)),
                n_predicate_types=int(d.get("predicate_types", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestionError(f"malformed graph: {exc}") from None

    @classmethod
    def from_bytes(cls, data: bytes) -> "SemanticGraph":
        try:
            d = json.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IngestionError(f"malformed graph file: {exc}") from None
        return cls.from_dict(d)

    def save(self, path: str | Path) -> None:
        _atomic_write(Path(path), self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "SemanticGraph":
        return cls.from_bytes(Path(path).read_bytes())


def build_graph(counts: PhraseCounts, min_count: int = 30) -> SemanticGraph:
    """Keep phrases seen at least ``min_count`` times and index their words.

    Node ids are assigned in lexicographic name order so the result does not
    depend on record order.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    attr_kept = [(s, a) for s, a, n in counts.attribute_phrases if n >= min_count]
    pred_kept = [(s, p, o) for s, p, o, n in counts.predicate_phrases if n >= min_count]

    cats = sorted({s for s, _ in attr_kept} | {s for s, _, _ in pred_kept} | {o for _, _, o in pred_kept})
    attrs = sorted({a for _, a in attr_kept})
    preds = sorted({p for _, p, _ in pred_kept})
    ci = {n: i for i, n in enumerate(cats)}
    ai = {n: i for i, n in enumerate(attrs)}
    pi = {n: i for i, n in enumerate(preds)}
    return SemanticGraph(
        categories=tuple(cats),
        attributes=tuple(attrs),
        predicates=tuple(preds),
        attr_edges=frozenset((ci[s], ai[a]) for s, a in attr_kept),
        pred_edges=frozenset((ci[s], pi[p], ci[o]) for s, p, o in pred_kept),
        n_attribute_types=len(attr_kept),
        n_predicate_types=len(pred_kept),
    )


def attributes_of(g: SemanticGraph, c: int) -> frozenset[int]:
    return g.attributes_of(c)


def predicates_between(g: SemanticGraph, c: int, c2: int) -> frozenset[int]:
    return g.predicates_between(c, c2)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
