import numpy as np
import pytest

from vrl.agent import Agent, Variant, make_model, random_walk_episode, train
from vrl.config import TrainConfig
from vrl.features import FeatureConfig
from vrl.scene import GroundTruth, Scene
from vrl.synth import SceneParams, generate_scene_set, synthetic_graph

from conftest import inst

FEATS = FeatureConfig(16, 16, 8)
SMALL = TrainConfig(epochs=2, hidden=(16,), tau=50, batch=8, eps_anneal_epochs=2)


@pytest.fixture(scope="module")
def world():
    g = synthetic_graph(0)
    return g, generate_scene_set(g, 3, 12, SceneParams(confusion=0.5), (3, 6))


def test_variant_parse():
    assert Variant.parse("FLAT") is Variant.FLAT
    assert Variant.parse("random_walk") is Variant.RANDOM_WALK
    with pytest.raises(ValueError, match="unknown variant"):
        Variant.parse("lstm")


def test_single_instance_episode(small_graph):
    g = small_graph
    sc = Scene("one", (inst(0, (0, 0, 1, 1), {g.category_id("man"): 0.9}),), GroundTruth())
    agent = Agent(g, FEATS)
    _, log = agent.run_episode(sc, make_model(g, FEATS, SMALL, "vrl", 0), record_sets=True)
    assert len(log.steps) == 1
    assert log.steps[0].sets == {"delta_a": ["NULL"], "delta_p": ["NULL"], "delta_c": ["TERMINAL"]}
    assert log.steps[0].actions == (g.n_attributes, g.n_predicates, g.n_categories)
    assert log.predictions == []


def test_empty_scene_and_mismatched_model(small_graph, world):
    agent = Agent(small_graph, FEATS)
    trs, log = agent.run_episode(Scene("e", (), GroundTruth()), make_model(small_graph, FEATS, SMALL, "vrl", 0))
    assert trs == [] and log.steps == []
    g, _ = world
    with pytest.raises(ValueError, match="do not match"):
        agent.run_episode(Scene("e", (), GroundTruth()), make_model(g, FEATS, SMALL, "vrl", 0))


def test_rider_scene_bindings(small_graph, rider_scene):
    g = small_graph
    agent = Agent(g, FEATS)
    model = make_model(g, FEATS, SMALL, "vrl", 0)
    _, log = agent.run_episode(rider_scene, model, record_sets=True)
    first = log.steps[0]
    # the first subject is the most confident instance and its first step only binds an object
    assert first.subject == 0 and first.object is None
    assert first.sets["delta_a"] == ["NULL"] and first.sets["delta_p"] == ["NULL"]
    assert "horse@1" in first.sets["delta_c"] and "TERMINAL" in first.sets["delta_c"]


def test_step_cap_and_determinism(world):
    g, scenes = world
    model = make_model(g, FEATS, SMALL, "vrl", 5)
    for variant in ("vrl", "flat", "no-ambiguity", "historical-actions"):
        agent = Agent(g, FEATS, variant, max_steps=4)
        m = make_model(g, FEATS, SMALL, variant, 5)
        for sc in scenes[:4]:
            trs, log = agent.run_episode(sc, m, "train", 0.5, np.random.default_rng(1))
            assert len(log.steps) <= 4 and len(trs) == len(log.steps)
    agent = Agent(g, FEATS)
    for sc in scenes:
        _, a = agent.run_episode(sc, model, "eval", 0.0, np.random.default_rng(9))
        _, b = agent.run_episode(sc, model, "eval", 0.0, np.random.default_rng(10))
        assert a.steps == b.steps and a.predictions == b.predictions
        assert len(a.steps) <= 300


def test_episode_predictions_are_graph_edges(world):
    g, scenes = world
    agent = Agent(g, FEATS)
    model = make_model(g, FEATS, SMALL, "vrl", 1)
    for sc in scenes:
        _, log = agent.run_episode(sc, model, "train", 1.0, np.random.default_rng(2))
        for p in log.predictions:
            if p.kind == "relationship":
                assert (p.subject.category, p.label, p.object.category) in g.pred_edges
            else:
                assert (p.subject.category, p.label) in g.attr_edges


def test_random_walk(world):
    g, scenes = world
    rng = np.random.default_rng(0)
    assert random_walk_episode(Scene("e", (), GroundTruth()), rng, g).steps == []
    for sc in scenes:
        log = random_walk_episode(sc, rng, g)
        assert sorted([log.steps[0].subject] + [s.object for s in log.steps]) == sorted(i.id for i in sc.instances)
        for p in log.predictions:
            if p.kind == "relationship":
                assert (p.subject.category, p.label, p.object.category) in g.pred_edges


def test_schedules():
    cfg = TrainConfig()
    assert cfg.epsilon(0) == 1.0
    assert cfg.epsilon(10) == pytest.approx(0.55)
    assert cfg.epsilon(20) == cfg.epsilon(59) == pytest.approx(0.1)
    assert cfg.learning_rate(9) == 0.0007
    assert cfg.learning_rate(10) == pytest.approx(0.00007)
    assert cfg.learning_rate(25) == pytest.approx(0.000007)


def test_train_is_reproducible_and_logs_schedule(world):
    g, scenes = world
    a = train(scenes, g, SMALL, "vrl", seed=3, feats=FEATS, val_scenes=scenes[:3])
    b = train(scenes, g, SMALL, "vrl", seed=3, feats=FEATS, val_scenes=scenes[:3])
    assert a.metrics_csv() == b.metrics_csv()
    assert a.model.allclose(b.model)
    assert [m.epsilon for m in a.timeline] == [1.0, pytest.approx(0.55)]
    assert a.sync_steps == list(range(50, a.steps + 1, 50))
    c = train(scenes, g, SMALL, "vrl", seed=4, feats=FEATS)
    assert not a.model.allclose(c.model)
    with pytest.raises(ValueError):
        train([], g, SMALL)


def test_flat_sets_cover_all_pairs(world):
    g, scenes = world
    agent = Agent(g, FEATS, "flat")
    model = make_model(g, FEATS, SMALL, "flat", 0)
    sc = scenes[0]
    _, log = agent.run_episode(sc, model, record_sets=True)
    dc = log.steps[0].sets["delta_c"]
    others = len(sc.instances) - 1
    assert len(dc) == g.n_categories * others + 1
    bound = [s for s in log.steps if s.object is not None]
    assert bound, "flat episode never bound an object"
    assert len(bound[0].sets["delta_p"]) == g.n_predicates and "NULL" not in bound[0].sets["delta_p"]
    assert len(bound[0].sets["delta_a"]) == g.n_attributes
