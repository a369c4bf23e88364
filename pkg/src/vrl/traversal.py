"""Variation-structured action sets and breadth-first subject scheduling."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .graph import SemanticGraph
from .scene import ObjectInstance, Scene, is_neighbor

AMBIGUITY_MARGIN = 0.1
NEIGHBOR_CAP = 5
# absorbs float rounding at the inclusive margin boundary (0.9 - 0.1 vs 0.8)
_MARGIN_EPS = 1e-12


class _Sentinel:
    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name

    def __repr__(self):
        return self.name

    def __reduce__(self):
        return self.name


NULL = _Sentinel("NULL")
TERMINAL = _Sentinel("TERMINAL")
DONE = _Sentinel("DONE")


@dataclass
class TraversalHistory:
    visited: set[int] = field(default_factory=set)
    mined_attrs: dict[int, set[int]] = field(default_factory=dict)
    emitted_pred_triples: set[tuple[int, int, int]] = field(default_factory=set)
    emitted_attr_pairs: set[tuple[int, int]] = field(default_factory=set)
    # gt object indices already credited by the category reward
    discovered_gt: set[int] = field(default_factory=set)


@dataclass
class SubjectScheduler:
    queue: deque = field(default_factory=deque)
    current_subject: int | None = None
    neighbor_count: int = 0
    started: set[int] = field(default_factory=set)

    def record_object(self, inst_id: int) -> None:
        if self.neighbor_count >= NEIGHBOR_CAP:
            raise RuntimeError("neighbor cap exceeded")
        self.queue.append(inst_id)
        self.neighbor_count += 1

    @property
    def capped(self) -> bool:
        return self.neighbor_count >= NEIGHBOR_CAP


@dataclass(frozen=True)
class ActionSets:
    delta_a: frozenset
    delta_p: frozenset
    delta_c: frozenset

    def category_slots(self) -> frozenset:
        """Categories (and TERMINAL) offered by ``delta_c``, without instance bindings."""
        return frozenset(x if x is TERMINAL else x[0] for x in self.delta_c)


def candidate_categories(inst: ObjectInstance, margin: float = AMBIGUITY_MARGIN) -> frozenset[int]:
    scores = inst.category_scores
    best = max(scores.values())
    return frozenset(c for c, v in scores.items() if v >= best - margin - _MARGIN_EPS)


def build_attribute_actions(g: SemanticGraph, s_cat: int, hist: TraversalHistory, s_id: int) -> frozenset:
    out = g.attributes_of(s_cat) - hist.mined_attrs.get(s_id, set())
    return frozenset(out) if out else frozenset({NULL})


def build_predicate_actions(g: SemanticGraph, s_cat: int, o_cat: int) -> frozenset:
    out = g.predicates_between(s_cat, o_cat)
    return out if out else frozenset({NULL})


def neighbors(scene: Scene, s: ObjectInstance) -> tuple[int, ...]:
    key = ("nbr", s.id)
    hit = scene._cache.get(key)
    if hit is None:
        hit = tuple(t.id for t in scene.instances if t.id != s.id and is_neighbor(s, t))
        scene._cache[key] = hit
    return hit


def build_category_actions(scene: Scene, s: ObjectInstance, hist: TraversalHistory,
                           ambiguity: bool = True) -> frozenset:
    out = {TERMINAL}
    for tid in neighbors(scene, s):
        if tid in hist.visited:
            continue
        t = scene.instance(tid)
        cats = candidate_categories(t) if ambiguity else (t.top_category(),)
        out.update((c, tid) for c in cats)
    return frozenset(out)


def build_flat_category_actions(scene: Scene, hist: TraversalHistory, n_categories: int) -> frozenset:
    """Every (category, unvisited instance) pair plus TERMINAL; no graph or neighbourhood pruning."""
    out = {TERMINAL}
    for t in scene.instances:
        if t.id not in hist.visited:
            out.update((c, t.id) for c in range(n_categories))
    return frozenset(out)


def resolve_category_action(scene: Scene, g_c: int, delta_c) -> int:
    """Bind a chosen category to the candidate instance scoring highest for it."""
    cands = [x[1] for x in delta_c if x is not TERMINAL and x[0] == g_c]
    if not cands:
        raise ValueError(f"category {g_c} is not offered by the action set")
    return min(cands, key=lambda tid: (-scene.instance(tid).score(g_c), tid))


def _by_objectness(insts):
    return min(insts, key=lambda i: (-i.objectness, i.id))


def advance_subject(sched: SubjectScheduler, scene: Scene, hist: TraversalHistory):
    """Move to the next subject instance and return its id, or DONE.

    The first subject is the most confident instance. Afterwards subjects come
    from the breadth-first queue of mined objects; when that runs dry the most
    confident instance not yet used as a subject is taken.
    """
    nxt = None
    while sched.queue:
        tid = sched.queue.popleft()
        if tid not in sched.started:
            nxt = tid
            break
    if nxt is None:
        rest = [i for i in scene.instances if i.id not in sched.started]
        if not rest:
            sched.current_subject = None
            return DONE
        nxt = _by_objectness(rest).id
    sched.current_subject = nxt
    sched.neighbor_count = 0
    sched.started.add(nxt)
    hist.visited.add(nxt)
    return nxt
