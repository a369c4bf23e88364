import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vrl.graph import PhraseCounts, build_graph
from vrl.scene import BoundingBox, GroundTruth, ObjectInstance, Scene

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_graph(attrs=(), preds=(), min_count=1):
    """Graph from plain phrase tuples, every phrase counted ``min_count`` times."""
    return build_graph(PhraseCounts(tuple((s, a, min_count) for s, a in attrs),
                                    tuple((s, p, o, min_count) for s, p, o in preds)), min_count)


def inst(i, box, scores, objectness=0.9):
    return ObjectInstance(i, BoundingBox(*box), dict(scores), objectness)


@pytest.fixture
def small_graph():
    return make_graph(
        attrs=[("girl", "young"), ("girl", "smiling"), ("man", "tall"), ("horse", "brown")],
        preds=[("man", "riding", "horse"), ("man", "near", "horse"), ("girl", "on", "horse"),
               ("hat", "on", "man"), ("helmet", "on", "man")],
    )


@pytest.fixture
def rider_scene(small_graph):
    """A man riding a horse and a girl next to them; detections sit exactly on the gt boxes."""
    g = small_graph
    c = g.category_id
    objects = ((c("man"), BoundingBox(2, 2, 2, 4)), (c("horse"), BoundingBox(3, 3, 4, 3)),
               (c("girl"), BoundingBox(9, 9, 1, 2)))
    gt = GroundTruth(objects,
                     frozenset({(0, g.attribute_id("tall")), (1, g.attribute_id("brown"))}),
                     frozenset({(0, g.predicate_id("riding"), 1)}))
    instances = (
        inst(0, (2, 2, 2, 4), {c("man"): 0.8, c("girl"): 0.75}, 0.95),
        inst(1, (3, 3, 4, 3), {c("horse"): 0.9}, 0.85),
        inst(2, (9, 9, 1, 2), {c("girl"): 0.7}, 0.6),
    )
    return Scene("rider", instances, gt)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
