"""Scene data model, box geometry, ground-truth matching and rewards.

Null (empty attribute/predicate set) and Terminal actions are passed to the
reward functions as ``None``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .graph import IngestionError, SemanticGraph

IOU_THRESHOLD = 0.5
REWARD_HIT = 1
REWARD_MISS = -1
REWARD_NEW_OBJECT = 5
MAX_INSTANCES = 100


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive size, got w={self.w} h={self.h}")
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.w, self.h)):
            raise ValueError("box coordinates must be finite")

    @property
    def x0(self) -> float:
        return self.cx - 0.5 * self.w

    @property
    def x1(self) -> float:
        return self.cx + 0.5 * self.w

    @property
    def y0(self) -> float:
        return self.cy - 0.5 * self.h

    @property
    def y1(self) -> float:
        return self.cy + 0.5 * self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]


def union_box(a: BoundingBox, b: BoundingBox) -> BoundingBox:
    """Tight box enclosing both inputs."""
    x0, x1 = min(a.x0, b.x0), max(a.x1, b.x1)
    y0, y1 = min(a.y0, b.y0), max(a.y1, b.y1)
    return BoundingBox(0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0)


def iou(b1: BoundingBox, b2: BoundingBox) -> float:
    iw = min(b1.x1, b2.x1) - max(b1.x0, b2.x0)
    ih = min(b1.y1, b2.y1) - max(b1.y0, b2.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    if b1 == b2:
        return 1.0
    inter = iw * ih
    # the corner arithmetic can overshoot the box area by an ulp
    return min(1.0, inter / (b1.area + b2.area - inter))


@dataclass(frozen=True, eq=True)
class ObjectInstance:
    id: int
    box: BoundingBox
    category_scores: Mapping[int, float]
    objectness: float

    def __post_init__(self):
        if not self.category_scores:
            raise ValueError(f"instance {self.id}: category_scores is empty")
        for c, v in self.category_scores.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"instance {self.id}: score {v} for category {c} outside [0,1]")
        if not 0.0 <= self.objectness <= 1.0:
            raise ValueError(f"instance {self.id}: objectness {self.objectness} outside [0,1]")

    def __hash__(self):
        return hash((self.id, self.box))

    def top_category(self) -> int:
        # ties go to the lower category id
        return min(self.category_scores, key=lambda c: (-self.category_scores[c], c))

    def score(self, c: int) -> float:
        return self.category_scores.get(c, 0.0)


@dataclass(frozen=True)
class GroundTruth:
    objects: tuple[tuple[int, BoundingBox], ...] = ()
    attr_phrases: frozenset[tuple[int, int]] = frozenset()
    pred_phrases: frozenset[tuple[int, int, int]] = frozenset()

    def __post_init__(self):
        n = len(self.objects)
        for i, _ in self.attr_phrases:
            if not 0 <= i < n:
                raise ValueError(f"attribute phrase references missing gt object {i}")
        for i, _, j in self.pred_phrases:
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"predicate phrase references missing gt object {(i, j)}")

    def pred_types(self) -> set[tuple[int, int, int]]:
        """Typed triples ``(subject category, predicate, object category)``."""
        return {(self.objects[i][0], p, self.objects[j][0]) for i, p, j in self.pred_phrases}


@dataclass(frozen=True)
class Scene:
    id: str
    instances: tuple[ObjectInstance, ...]
    gt: GroundTruth
    image_feature_key: str = ""
    _cache: dict = field(default_factory=dict, compare=False, repr=False)
    _by_id: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        ids = [inst.id for inst in self.instances]
        if len(set(ids)) != len(ids):
            raise ValueError(f"scene {self.id}: duplicate instance ids")
        if not self.image_feature_key:
            object.__setattr__(self, "image_feature_key", self.id)
        self._by_id.update({inst.id: inst for inst in self.instances})

    def instance(self, inst_id: int) -> ObjectInstance:
        return self._by_id[inst_id]

    def matching_gt(self, inst: ObjectInstance, cat: int) -> frozenset[int]:
        """Indices of gt objects that overlap ``inst`` labelled as ``cat``."""
        key = (inst.id, cat)
        hit = self._cache.get(key)
        if hit is None:
            hit = frozenset(
                k for k, (gc, gb) in enumerate(self.gt.objects)
                if gc == cat and iou(inst.box, gb) >= IOU_THRESHOLD
            )
            self._cache[key] = hit
        return hit


def overlaps(inst: ObjectInstance, assigned_cat: int, gt_obj: tuple[int, BoundingBox]) -> bool:
    gc, gb = gt_obj
    return assigned_cat == gc and iou(inst.box, gb) >= IOU_THRESHOLD


def is_neighbor(s: ObjectInstance, t: ObjectInstance) -> bool:
    a, b = s.box, t.box
    return abs(b.cx - a.cx) < 0.5 * (b.w + a.w) and abs(b.cy - a.cy) < 0.5 * (b.h + a.h)


def reward_attribute(scene: Scene, s: ObjectInstance, s_cat: int, g_a: int | None) -> int:
    if g_a is None:
        return 0
    attrs = scene.gt.attr_phrases
    for k in scene.matching_gt(s, s_cat):
        if (k, g_a) in attrs:
            return REWARD_HIT
    return REWARD_MISS


def reward_predicate(scene: Scene, s: ObjectInstance, s_cat: int,
                     s2: ObjectInstance, s2_cat: int, g_p: int | None) -> int:
    if g_p is None:
        return 0
    subj = scene.matching_gt(s, s_cat)
    if not subj:
        return REWARD_MISS
    obj = scene.matching_gt(s2, s2_cat)
    preds = scene.gt.pred_phrases
    for i in subj:
        for j in obj:
            if (i, g_p, j) in preds:
                return REWARD_HIT
    return REWARD_MISS


def reward_category(scene: Scene, chosen: tuple[ObjectInstance, int] | None,
                    discovered_gt: Iterable[int]) -> int:
    if chosen is None:
        return 0
    inst, cat = chosen
    if scene.matching_gt(inst, cat) - set(discovered_gt):
        return REWARD_NEW_OBJECT
    return REWARD_MISS


# -- JSON-lines ingestion ---------------------------------------------------

def scene_to_record(scene: Scene, g: SemanticGraph) -> dict:
    rec = {
        "id": scene.id,
        "instances": [
            {
                "id": inst.id,
                "box": inst.box.as_list(),
                "scores": {g.categories[c]: v for c, v in sorted(inst.category_scores.items())},
                "objectness": inst.objectness,
            }
            for inst in scene.instances
        ],
        "gt": {
            "objects": [{"category": g.categories[c], "box": b.as_list()} for c, b in scene.gt.objects],
            "attr_phrases": [[i, g.attributes[a]] for i, a in sorted(scene.gt.attr_phrases)],
            "pred_phrases": [[i, g.predicates[p], j] for i, p, j in sorted(scene.gt.pred_phrases)],
        },
    }
    if scene.image_feature_key != scene.id:
        rec["image_feature_key"] = scene.image_feature_key
    return rec


def _box(v) -> BoundingBox:
    if not isinstance(v, (list, tuple)) or len(v) != 4:
        raise ValueError(f"box must be [cx, cy, w, h], got {v!r}")
    return BoundingBox(*(float(x) for x in v))


def scene_from_record(rec: Mapping, g: SemanticGraph, max_instances: int | None = MAX_INSTANCES) -> Scene:
    instances = []
    for k, raw in enumerate(rec["instances"]):
        scores = {g.category_id(name): float(v) for name, v in raw["scores"].items()}
        instances.append(ObjectInstance(
            id=int(raw.get("id", k)),
            box=_box(raw["box"]),
            category_scores=scores,
            objectness=float(raw["objectness"]),
        ))
    if max_instances is not None and len(instances) > max_instances:
        # keep the most confident instances, ties by id
        instances = sorted(instances, key=lambda i: (-i.objectness, i.id))[:max_instances]
        instances.sort(key=lambda i: i.id)
    gt = rec.get("gt", {})
    objects = tuple((g.category_id(o["category"]), _box(o["box"])) for o in gt.get("objects", []))
    attrs = frozenset((int(i), g.attribute_id(a)) for i, a in gt.get("attr_phrases", []))
    preds = frozenset((int(i), g.predicate_id(p), int(j)) for i, p, j in gt.get("pred_phrases", []))
    return Scene(
        id=str(rec["id"]),
        instances=tuple(instances),
        gt=GroundTruth(objects, attrs, preds),
        image_feature_key=str(rec.get("image_feature_key", rec["id"])),
    )


def iter_scenes(path: str | Path, g: SemanticGraph, max_instances: int | None = MAX_INSTANCES) -> Iterator[Scene]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield scene_from_record(json.loads(line), g, max_instances)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"{path}:{lineno}: invalid JSON: {exc}") from None
            except KeyError as exc:
                raise IngestionError(f"{path}:{lineno}: {exc.args[0]}") from None
            except (TypeError, ValueError) as exc:
                raise IngestionError(f"{path}:{lineno}: {exc}") from None


def load_scenes(path: str | Path, g: SemanticGraph, max_instances: int | None = MAX_INSTANCES) -> list[Scene]:
    scenes = list(iter_scenes(path, g, max_instances))
    ids = [s.id for s in scenes]
    if len(set(ids)) != len(ids):
        raise IngestionError(f"{path}: duplicate scene ids")
    return scenes


def save_scenes(path: str | Path, scenes: Iterable[Scene], g: SemanticGraph) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for s in scenes:
            fh.write(json.dumps(scene_to_record(s, g), sort_keys=True, separators=(",", ":")))
            fh.write("\n")
    tmp.replace(path)


def validate_scene(scene: Scene, g: SemanticGraph) -> list[str]:
    """Return a list of invariant violations (empty when the scene is valid)."""
    problems = []
    ids = [i.id for i in scene.instances]
    if len(set(ids)) != len(ids):
        problems.append("duplicate instance ids")
    for inst in scene.instances:
        if any(not 0 <= c < g.n_categories for c in inst.category_scores):
            problems.append(f"instance {inst.id}: unknown category id")
    n = len(scene.gt.objects)
    for c, _ in scene.gt.objects:
        if not 0 <= c < g.n_categories:
            problems.append(f"gt category {c} unknown")
    for i, a in scene.gt.attr_phrases:
        if not 0 <= i < n or not 0 <= a < g.n_attributes:
            problems.append(f"attribute phrase {(i, a)} invalid")
    for i, p, j in scene.gt.pred_phrases:
        if not (0 <= i < n and 0 <= j < n and 0 <= p < g.n_predicates):
            problems.append(f"predicate phrase {(i, p, j)} invalid")
    return problems
