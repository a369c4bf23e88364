"""Synthetic phrase counts and scenes for desk-scale experiments.

Scenes are drawn so that every ground-truth phrase is an edge of the graph.
Node popularity follows node index (lower index = more frequent), which gives
the learner a prior worth discovering.

Categories fall into families (``c % families``). Each ordered pair of
families ranks the predicates; a category pair's predicate edges come from
the top of its families' ranking and scenes prefer higher-ranked ones. So a
relationship type never seen in training can still be guessed from its
relatives, which is what zero-shot detection relies on.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .graph import PhraseCounts, SemanticGraph, build_graph
from .scene import BoundingBox, GroundTruth, ObjectInstance, Scene, is_neighbor


N_FAMILIES = 5
FAMILY_POOL = 8


class GenerationError(ValueError):
    pass


def family_of(c: int, families: int = N_FAMILIES) -> int:
    return c % families


def family_predicate_order(f1: int, f2: int, n_predicates: int) -> np.ndarray:
    """Predicate ids ranked from most to least typical for subject family ``f1`` and object family ``f2``."""
    return np.random.default_rng([f1, f2, 0x7A11]).permutation(n_predicates)


@dataclass(frozen=True)
class SceneParams:
    n_objects: int = 6
    noise: float = 0.1
    canvas: float = 10.0
    # probability that an object's detector scores contain a near-tie confuser
    confusion: float = 0.0
    clutter: int = 0
    rel_prob: float = 0.8
    max_attrs: int = 2
    cluster_prob: float = 0.75
    # draw a relation for each linked direction of a touching pair, not just one
    both_directions: bool = False
    # rank predicates by family pair (must match the graph's generator); 0 ranks by index
    families: int = N_FAMILIES


def synthetic_phrase_counts(seed: int, n_categories: int = 50, n_attributes: int = 30,
                            n_predicates: int = 20, attr_degree: int = 5,
                            partners: int = 6, min_count: int = 30,
                            pred_lo: int = 2, pred_hi: int = 5, reverse_prob: float = 0.0,
                            families: int = N_FAMILIES) -> PhraseCounts:
    """Random phrase-count table whose thresholded graph has the requested sizes.

    With ``families`` > 0 a pair's predicates come from the top ``FAMILY_POOL``
    of its family pair's ranking; with 0 they are drawn by global popularity.
    """
    rng = np.random.default_rng([seed, 0x6772])
    cats = [f"obj{i:02d}" for i in range(n_categories)]
    attrs = [f"attr{i:02d}" for i in range(n_attributes)]
    preds = [f"pred{i:02d}" for i in range(n_predicates)]
    attr_w = _zipf(n_attributes)
    pred_w = _zipf(n_predicates)

    attr_recs: dict[tuple[str, str], int] = {}
    pred_recs: dict[tuple[str, str, str], int] = {}
    # cover every attribute and predicate word once so all nodes survive
    for k, a in enumerate(attrs):
        attr_recs[(cats[k % n_categories], a)] = min_count + int(rng.integers(0, 200))
    for k, p in enumerate(preds):
        c = cats[k % n_categories]
        c2 = cats[(k * 7 + 3) % n_categories]
        pred_recs[(c, p, c2)] = min_count + int(rng.integers(0, 200))

    for ci, c in enumerate(cats):
        for a in rng.choice(n_attributes, size=min(attr_degree, n_attributes), replace=False, p=attr_w):
            attr_recs.setdefault((c, attrs[a]), min_count + int(rng.geometric(0.02)))
        others = [j for j in range(n_categories) if j != ci]
        for j in rng.choice(others, size=min(partners, len(others)), replace=False):
            pairs = [(c, cats[j])]
            if rng.random() < reverse_prob:
                pairs.append((cats[j], c))
            for a, b in pairs:
                k = int(rng.integers(pred_lo, pred_hi + 1))
                if families:
                    fa, fb = family_of(cats.index(a), families), family_of(cats.index(b), families)
                    pool = family_predicate_order(fa, fb, n_predicates)[:max(k, FAMILY_POOL)]
                    chosen = pool[rng.choice(len(pool), size=min(k, len(pool)), replace=False,
                                             p=_zipf(len(pool), 0.5))]
                else:
                    chosen = rng.choice(n_predicates, size=k, replace=False, p=pred_w)
                for p in chosen:
                    pred_recs.setdefault((a, preds[p], b), min_count + int(rng.geometric(0.02)))
        # sub-threshold noise phrases
        a = int(rng.integers(n_attributes))
        attr_recs.setdefault((c, attrs[a]), int(rng.integers(1, min_count)))
        j, p = int(rng.integers(n_categories)), int(rng.integers(n_predicates))
        pred_recs.setdefault((c, preds[p], cats[j]), int(rng.integers(1, min_count)))

    return PhraseCounts(
        tuple((s, a, n) for (s, a), n in sorted(attr_recs.items())),
        tuple((s, p, o, n) for (s, p, o), n in sorted(pred_recs.items())),
    )


def synthetic_graph(seed: int, **kw) -> SemanticGraph:
    return build_graph(synthetic_phrase_counts(seed, **kw), kw.get("min_count", 30))


def write_phrase_counts(path, counts: PhraseCounts) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s, a, n in counts.attribute_phrases:
            fh.write(f"A\t{s}\t{a}\t{n}\n")
        for s, p, o, n in counts.predicate_phrases:
            fh.write(f"P\t{s}\t{p}\t{o}\t{n}\n")


def _zipf(n: int, s: float = 1.0) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def confuser_of(g: SemanticGraph, c: int) -> int | None:
    """Deterministic less-popular look-alike for category ``c`` (None for the last one)."""
    n = g.n_categories
    if c >= n - 1:
        return None
    h = int.from_bytes(hashlib.blake2b(f"{c}".encode(), digest_size=4).digest(), "little")
    return c + 1 + h % min(n - c - 1, 8)


def _weighted_pick(rng: np.random.Generator, items: list[int], weights: np.ndarray) -> int:
    w = weights[items]
    return items[int(rng.choice(len(items), p=w / w.sum()))]


def generate_synthetic_scene(g: SemanticGraph, rng_seed, params: SceneParams = SceneParams(),
                             scene_id: str | None = None, exclude_types=frozenset()) -> Scene:
    """Draw one scene. Relationship types in ``exclude_types`` never appear in its gt."""
    if g.n_categories == 0 or g.is_empty():
        raise GenerationError("graph is empty")
    if not g.pred_edges:
        raise GenerationError("graph has no predicate edges")
    if params.n_objects < 1:
        raise GenerationError("n_objects must be >= 1")
    rng = np.random.default_rng(rng_seed)
    nc = g.n_categories
    cat_w = _zipf(nc, 0.8)
    attr_w = _zipf(max(g.n_attributes, 1))
    pred_w = _zipf(g.n_predicates)

    partners: dict[int, set[int]] = {}
    for c, c2 in g.predicate_pairs():
        partners.setdefault(c, set()).add(c2)
        partners.setdefault(c2, set()).add(c)
    linked = sorted(partners)
    canvas = params.canvas

    objects: list[tuple[int, BoundingBox]] = []
    for k in range(params.n_objects):
        w, h = canvas * rng.uniform(0.15, 0.35, size=2)
        if k and rng.random() < params.cluster_prob:
            ac, ab = objects[int(rng.integers(k))]
            dx, dy = rng.uniform(-0.8, 0.8, size=2)
            cx = ab.cx + dx * 0.5 * (ab.w + w)
            cy = ab.cy + dy * 0.5 * (ab.h + h)
            cat = _weighted_pick(rng, sorted(partners[ac]), cat_w)
        else:
            cx, cy = rng.uniform(0, canvas, size=2)
            cat = _weighted_pick(rng, linked, cat_w)
        cx = float(np.clip(cx, 0.0, canvas))
        cy = float(np.clip(cy, 0.0, canvas))
        objects.append((cat, BoundingBox(cx, cy, float(w), float(h))))

    attr_phrases = set()
    for k, (c, _) in enumerate(objects):
        cands = sorted(g.attributes_of(c))
        n = min(int(rng.integers(0, params.max_attrs + 1)), len(cands))
        if n:
            p = attr_w[cands] / attr_w[cands].sum()
            for a in rng.choice(cands, size=n, replace=False, p=p):
                attr_phrases.add((k, int(a)))

    # relations only between gt objects whose boxes touch
    pred_phrases = set()
    gt_boxes = [_probe(k, b) for k, (_, b) in enumerate(objects)]
    for i in range(len(objects)):
        for j in range(i + 1, len(objects)):
            if not is_neighbor(gt_boxes[i], gt_boxes[j]):
                continue
            dirs = [(a, b) for a, b in ((i, j), (j, i))
                    if g.predicates_between(objects[a][0], objects[b][0])]
            if not params.both_directions and dirs:
                dirs = [dirs[int(rng.integers(len(dirs)))]]
            for a, b in dirs:
                if rng.random() >= params.rel_prob:
                    continue
                ca, cb = objects[a][0], objects[b][0]
                weights = pred_w
                if params.families:
                    order = family_predicate_order(family_of(ca, params.families), family_of(cb, params.families),
                                                   g.n_predicates)
                    weights = np.empty(g.n_predicates)
                    weights[order] = _zipf(g.n_predicates)
                p = _weighted_pick(rng, sorted(g.predicates_between(ca, cb)), weights)
                if (ca, p, cb) not in exclude_types:
                    pred_phrases.add((a, p, b))

    instances = []
    for k, (c, b) in enumerate(objects):
        instances.append(ObjectInstance(
            id=k,
            box=_jitter(rng, b, params.noise),
            category_scores=_scores(rng, g, c, params.confusion),
            objectness=float(np.round(rng.uniform(0.5, 1.0), 6)),
        ))
    for k in range(params.clutter):
        w, h = canvas * rng.uniform(0.1, 0.3, size=2)
        cx, cy = rng.uniform(0, canvas, size=2)
        c = int(rng.integers(nc))
        instances.append(ObjectInstance(
            id=len(objects) + k,
            box=BoundingBox(float(cx), float(cy), float(w), float(h)),
            category_scores={c: float(np.round(rng.uniform(0.3, 0.7), 6))},
            objectness=float(np.round(rng.uniform(0.2, 0.6), 6)),
        ))

    return Scene(
        id=scene_id if scene_id is not None else f"synth-{_seed_tag(rng_seed)}",
        instances=tuple(instances),
        gt=GroundTruth(tuple(objects), frozenset(attr_phrases), frozenset(pred_phrases)),
    )


def _probe(k: int, b: BoundingBox) -> ObjectInstance:
    return ObjectInstance(id=k, box=b, category_scores={0: 1.0}, objectness=1.0)


def _jitter(rng: np.random.Generator, b: BoundingBox, noise: float) -> BoundingBox:
    if noise <= 0:
        return b
    dx, dy = rng.normal(0.0, noise, size=2)
    sw, sh = np.exp(rng.normal(0.0, noise, size=2))
    return BoundingBox(float(b.cx + dx * b.w), float(b.cy + dy * b.h), float(b.w * sw), float(b.h * sh))


def _scores(rng: np.random.Generator, g: SemanticGraph, c: int, confusion: float) -> dict[int, float]:
    top = float(rng.uniform(0.55, 0.95))
    scores = {c: top}
    conf = confuser_of(g, c)
    if conf is not None and rng.random() < confusion:
        scores[conf] = float(np.clip(top + rng.uniform(-0.08, 0.08), 0.01, 1.0))
    # distractors stay outside the 0.1 ambiguity margin
    for _ in range(int(rng.integers(1, 3))):
        d = int(rng.integers(g.n_categories))
        if d not in scores:
            scores[d] = float(max(0.01, top - rng.uniform(0.15, 0.5)))
    return {k: round(v, 6) for k, v in scores.items()}


def _seed_tag(seed) -> str:
    if isinstance(seed, (list, tuple)):
        return "-".join(str(s) for s in seed)
    return str(seed)


def generate_scene_set(g: SemanticGraph, seed: int, n_scenes: int, params: SceneParams = SceneParams(),
                       n_objects_range: tuple[int, int] | None = None, prefix: str = "s",
                       exclude_types=frozenset()) -> list[Scene]:
    """Generate ``n_scenes`` scenes; object counts drawn from ``n_objects_range`` when given."""
    rng = np.random.default_rng([seed, 0x5CE])
    out = []
    for k in range(n_scenes):
        p = params
        if n_objects_range is not None:
            lo, hi = n_objects_range
            p = SceneParams(**{**p.__dict__, "n_objects": int(rng.integers(lo, hi + 1))})
        out.append(generate_synthetic_scene(g, [seed, k], p, f"{prefix}{seed}-{k:05d}", exclude_types))
    return out


def holdout_predicate_types(g: SemanticGraph, frac: float, seed: int) -> frozenset[tuple[int, int, int]]:
    """A seeded ``frac`` share of the graph's relationship types, to keep out of training scenes."""
    if not 0 <= frac <= 1:
        raise ValueError("frac must be in [0, 1]")
    types = sorted(g.pred_edges)
    n = int(round(frac * len(types)))
    rng = np.random.default_rng([seed, 0x2E50])
    return frozenset(types[i] for i in rng.choice(len(types), size=n, replace=False))
