"""Prediction ranking, Recall@K and zero-shot type splits."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .scene import IOU_THRESHOLD, BoundingBox, Scene, iou, union_box

TASKS = ("phrase", "relationship", "attribute")


@dataclass(frozen=True)
class Endpoint:
    instance: int
    category: int
    box: BoundingBox
    confidence: float


@dataclass(frozen=True)
class Prediction:
    kind: str  # "relationship" or "attribute"
    subject: Endpoint
    label: int
    q_value: float = 0.0
    object: Endpoint | None = None
    score: float = 0.0

    def __post_init__(self):
        if self.kind not in ("relationship", "attribute"):
            raise ValueError(f"unknown prediction kind {self.kind!r}")
        if self.kind == "relationship" and self.object is None:
            raise ValueError("relationship prediction needs an object endpoint")

    def type_key(self) -> tuple:
        if self.kind == "relationship":
            return (self.subject.category, self.label, self.object.category)
        return (self.subject.category, self.label)


@dataclass(frozen=True)
class ZeroShotSplit:
    unseen_types: frozenset[tuple[int, int, int]]


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def prediction_score(p: Prediction) -> float:
    s = p.subject.confidence * _sigmoid(p.q_value)
    if p.kind == "relationship":
        s *= p.object.confidence
    return s


def rank_predictions(preds: Iterable[Prediction]) -> list[Prediction]:
    """Score each prediction and sort by descending score (stable)."""
    scored = [replace(p, score=prediction_score(p)) for p in preds]
    return sorted(scored, key=lambda p: -p.score)


def _matches(p: Prediction, scene: Scene, phrase: tuple, task: str) -> bool:
    objs = scene.gt.objects
    if task == "attribute":
        if p.kind != "attribute":
            return False
        i, a = phrase
        c, b = objs[i]
        return p.label == a and p.subject.category == c and iou(p.subject.box, b) >= IOU_THRESHOLD
    if p.kind != "relationship":
        return False
    i, r, j = phrase
    (ci, bi), (cj, bj) = objs[i], objs[j]
    if p.label != r or p.subject.category != ci or p.object.category != cj:
        return False
    if task == "relationship":
        return iou(p.subject.box, bi) >= IOU_THRESHOLD and iou(p.object.box, bj) >= IOU_THRESHOLD
    return iou(union_box(p.subject.box, p.object.box), union_box(bi, bj)) >= IOU_THRESHOLD


def gt_phrases(scene: Scene, task: str, restrict_types=None) -> list[tuple]:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if task == "attribute":
        return sorted(scene.gt.attr_phrases)
    out = sorted(scene.gt.pred_phrases)
    if restrict_types is not None:
        objs = scene.gt.objects
        out = [(i, p, j) for i, p, j in out if (objs[i][0], p, objs[j][0]) in restrict_types]
    return out


def matched_gt(ranked: Sequence[Prediction], scene: Scene, k: int, task: str, restrict_types=None) -> list[tuple]:
    """Gt phrases claimed by the top-``k`` predictions.

    Predictions are taken in rank order; each claims the first still-unclaimed
    gt phrase it matches, so a gt phrase counts at most once and one prediction
    never covers two.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    free = gt_phrases(scene, task, restrict_types)
    claimed = []
    for p in ranked[:k]:
        for n, ph in enumerate(free):
            if _matches(p, scene, ph, task):
                claimed.append(free.pop(n))
                break
    return claimed


def recall_at_k(ranked: Sequence[Prediction], scene: Scene, k: int, task: str, restrict_types=None) -> float:
    """Fraction of the scene's gt phrases for ``task`` claimed by the top-``k`` predictions.

    Returns NaN when the scene has no gt phrase of the requested kind.
    """
    total = len(gt_phrases(scene, task, restrict_types))
    if total == 0:
        return math.nan
    return len(matched_gt(ranked, scene, k, task, restrict_types)) / total


def macro_mean(values: Iterable[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return sum(vals) / len(vals) if vals else 0.0


def zero_shot_split(train_scenes: Iterable[Scene], test_scenes: Iterable[Scene]) -> ZeroShotSplit:
    seen: set = set()
    for s in train_scenes:
        seen |= s.gt.pred_types()
    test: set = set()
    for s in test_scenes:
        test |= s.gt.pred_types()
    return ZeroShotSplit(frozenset(test - seen))
