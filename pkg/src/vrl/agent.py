"""Episode execution, training loop and evaluation for each policy variant."""

from __future__ import annotations

import enum
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import TrainConfig, stream
from .evaluation import Endpoint, Prediction, TASKS, macro_mean, rank_predictions, recall_at_k
from .features import (ActionHistory, FeatureConfig, HistoryBuffer, SyntheticFeatureProvider,
                       assemble_action_state, assemble_state, update_history)
from .graph import SemanticGraph
from .qnet import QModel, ReplayMemory, RMSProp, Transition, q_update, select_actions
from .scene import Scene, reward_attribute, reward_category, reward_predicate
from .traversal import (NULL, TERMINAL, DONE, ActionSets, SubjectScheduler, TraversalHistory,
                        advance_subject, build_attribute_actions, build_category_actions,
                        build_flat_category_actions, build_predicate_actions, resolve_category_action)


class Variant(str, enum.Enum):
    VRL = "vrl"
    FLAT = "flat"
    RANDOM_WALK = "random-walk"
    NO_AMBIGUITY = "no-ambiguity"
    HISTORICAL_ACTIONS = "historical-actions"

    @classmethod
    def parse(cls, v) -> "Variant":
        if isinstance(v, Variant):
            return v
        try:
            return cls(str(v).lower().replace("_", "-"))
        except ValueError:
            raise ValueError(f"unknown variant {v!r}; choose from {[x.value for x in cls]}") from None


@dataclass
class StepRecord:
    step: int
    subject: int
    object: int | None
    actions: tuple
    rewards: tuple[int, int, int]
    emitted: list[str]
    sets: dict | None = None


@dataclass
class EpisodeLog:
    steps: list[StepRecord] = field(default_factory=list)
    predictions: list[Prediction] = field(default_factory=list)

    @property
    def total_reward(self) -> int:
        return sum(sum(s.rewards) for s in self.steps)


def state_dim(g: SemanticGraph, feats: FeatureConfig, variant: Variant) -> int:
    if variant is Variant.HISTORICAL_ACTIONS:
        return feats.d_image + 2 * feats.d_instance + 4 * (g.n_categories + g.n_attributes + g.n_predicates)
    return feats.state_dim


def make_model(g: SemanticGraph, feats: FeatureConfig, cfg: TrainConfig, variant, seed: int) -> QModel:
    variant = Variant.parse(variant)
    return QModel(
        state_dim(g, feats, variant),
        (g.n_attributes + 1, g.n_predicates + 1, g.n_categories + 1),
        hidden=cfg.hidden,
        separate=cfg.separate_trunks,
        seed=stream(seed, "init").integers(2**63),
        dtype=np.dtype(cfg.dtype),
    )


class Agent:
    """Runs episodes of one policy variant over scenes of one graph."""

    def __init__(self, graph: SemanticGraph, feats: FeatureConfig = FeatureConfig(), variant=Variant.VRL,
                 provider=None, max_steps: int = 300):
        self.g = graph
        self.feats = feats
        self.variant = Variant.parse(variant)
        self.provider = provider if provider is not None else SyntheticFeatureProvider(feats, graph.n_categories)
        self.max_steps = max_steps
        self._zero_inst = np.zeros(feats.d_instance)

    # -- action-set plumbing -------------------------------------------

    def action_sets(self, scene: Scene, subj: int, obj: int | None, cats: dict, hist: TraversalHistory,
                    sched: SubjectScheduler) -> ActionSets:
        s = scene.instance(subj)
        flat = self.variant is Variant.FLAT
        if obj is None:
            da = dp = frozenset({NULL})
        elif flat:
            da = frozenset(range(self.g.n_attributes)) or frozenset({NULL})
            dp = frozenset(range(self.g.n_predicates)) or frozenset({NULL})
        else:
            da = build_attribute_actions(self.g, cats[subj], hist, subj)
            dp = build_predicate_actions(self.g, cats[subj], cats[obj])
        if sched.capped:
            dc = frozenset({TERMINAL})
        elif flat:
            dc = build_flat_category_actions(scene, hist, self.g.n_categories)
        else:
            dc = build_category_actions(scene, s, hist, ambiguity=self.variant is not Variant.NO_AMBIGUITY)
        return ActionSets(da, dp, dc)

    def slots(self, sets: ActionSets) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        na, np_, nc = self.g.n_attributes, self.g.n_predicates, self.g.n_categories
        a = sorted(na if x is NULL else x for x in sets.delta_a)
        p = sorted(np_ if x is NULL else x for x in sets.delta_p)
        c = sorted(nc if x is TERMINAL else x for x in sets.category_slots())
        return np.array(a), np.array(p), np.array(c)

    def _state(self, scene, subj, obj, phrase_hist, action_hist):
        img = self.provider.image_feature(scene)
        sf = self.provider.instance_feature(scene, scene.instance(subj))
        of = self._zero_inst if obj is None else self.provider.instance_feature(scene, scene.instance(obj))
        if self.variant is Variant.HISTORICAL_ACTIONS:
            return assemble_action_state(img, sf, of, action_hist, self.feats)
        return assemble_state(img, sf, of, phrase_hist, self.feats)

    def _endpoint(self, scene, inst_id, cat) -> Endpoint:
        inst = scene.instance(inst_id)
        return Endpoint(inst_id, cat, inst.box, inst.objectness)

    # -- episodes --------------------------------------------------------

    def run_episode(self, scene: Scene, model: QModel | None, mode: str = "eval", eps: float = 0.0,
                    rng: np.random.Generator | None = None,
                    on_transition: Callable[[Transition], None] | None = None,
                    record_sets: bool = False) -> tuple[list[Transition], EpisodeLog]:
        if self.variant is Variant.RANDOM_WALK:
            return [], random_walk_episode(scene, rng if rng is not None else np.random.default_rng(0),
                                           self.g, self.max_steps)
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        if model is None:
            raise ValueError("model required for learned variants")
        sizes = (self.g.n_attributes + 1, self.g.n_predicates + 1, self.g.n_categories + 1)
        if model.head_sizes != sizes:
            raise ValueError(f"model heads {model.head_sizes} do not match graph {sizes}")
        if rng is None:
            rng = np.random.default_rng(0)
        if mode == "eval":
            eps = 0.0
        log = EpisodeLog()
        transitions: list[Transition] = []
        if not scene.instances:
            return transitions, log

        g = self.g
        na, np_, nc = g.n_attributes, g.n_predicates, g.n_categories
        hist = TraversalHistory()
        sched = SubjectScheduler()
        phrases = HistoryBuffer()
        actions = ActionHistory(nc, na, np_) if self.variant is Variant.HISTORICAL_ACTIONS else None
        cats: dict[int, int] = {}

        def start_subject(sid):
            cats.setdefault(sid, scene.instance(sid).top_category())
            hist.discovered_gt.update(scene.matching_gt(scene.instance(sid), cats[sid]))

        subj = advance_subject(sched, scene, hist)
        start_subject(subj)
        obj = None
        state = self._state(scene, subj, obj, phrases, actions)
        sets = self.action_sets(scene, subj, obj, cats, hist, sched)
        slot_sets = self.slots(sets)

        for step in range(self.max_steps):
            qs = model.forward(state)
            ga, gp, gc = select_actions(qs, slot_sets, eps, rng)
            a = None if ga == na else ga
            p = None if gp == np_ else gp
            c = None if gc == nc else gc
            s_inst = scene.instance(subj)
            ra = reward_attribute(scene, s_inst, cats[subj], a)
            rp = 0 if obj is None else reward_predicate(scene, s_inst, cats[subj], scene.instance(obj), cats[obj], p)
            if c is None:
                rc, t = 0, None
            else:
                t = resolve_category_action(scene, c, sets.delta_c)
                rc = reward_category(scene, (scene.instance(t), c), hist.discovered_gt)

            emitted = []
            if a is not None:
                hist.mined_attrs.setdefault(subj, set()).add(a)
                phrase = f"{g.categories[cats[subj]]} {g.attributes[a]}"
                phrases = update_history(phrases, phrase, "attribute")
                key = (subj, a)
                if key not in hist.emitted_attr_pairs:
                    hist.emitted_attr_pairs.add(key)
                    log.predictions.append(Prediction("attribute", self._endpoint(scene, subj, cats[subj]), a,
                                                      float(qs[0][ga])))
                    emitted.append(phrase)
            if p is not None and obj is not None:
                phrase = f"{g.categories[cats[subj]]} {g.predicates[p]} {g.categories[cats[obj]]}"
                phrases = update_history(phrases, phrase, "relationship")
                triple = (subj, p, obj)
                if triple not in hist.emitted_pred_triples:
                    hist.emitted_pred_triples.add(triple)
                    log.predictions.append(Prediction("relationship", self._endpoint(scene, subj, cats[subj]), p,
                                                      float(qs[1][gp]), self._endpoint(scene, obj, cats[obj])))
                    emitted.append(phrase)
            if actions is not None:
                actions.push(c, a, p)

            log.steps.append(StepRecord(step, subj, obj, (ga, gp, gc), (ra, rp, rc), emitted,
                                        _sets_json(g, sets) if record_sets else None))

            done = False
            if t is not None:
                hist.visited.add(t)
                cats[t] = c
                hist.discovered_gt.update(scene.matching_gt(scene.instance(t), c))
                sched.record_object(t)
                obj = t
            else:
                if len(hist.visited) >= len(scene.instances):
                    done = True
                else:
                    nxt = advance_subject(sched, scene, hist)
                    if nxt is DONE:
                        done = True
                    else:
                        subj, obj = nxt, None
                        start_subject(subj)

            if done:
                next_state, slot_sets_next = state, (np.array([], int),) * 3
            else:
                next_state = self._state(scene, subj, obj, phrases, actions)
                sets = self.action_sets(scene, subj, obj, cats, hist, sched)
                slot_sets_next = self.slots(sets)

            if mode == "train":
                tr = Transition(state.astype(model.dtype), (ga, gp, gc), (ra, rp, rc),
                                next_state.astype(model.dtype), slot_sets_next, done)
                transitions.append(tr)
                if on_transition is not None:
                    on_transition(tr)
            if done:
                break
            state, slot_sets = next_state, slot_sets_next
        return transitions, log


def _sets_json(g: SemanticGraph, sets: ActionSets) -> dict:
    def name(x, table):
        return "NULL" if x is NULL else table[x]
    return {
        "delta_a": sorted(name(x, g.attributes) for x in sets.delta_a),
        "delta_p": sorted(name(x, g.predicates) for x in sets.delta_p),
        "delta_c": sorted("TERMINAL" if x is TERMINAL else f"{g.categories[x[0]]}@{x[1]}" for x in sets.delta_c),
    }


def random_walk_episode(scene: Scene, rng: np.random.Generator, g: SemanticGraph, max_steps: int = 300) -> EpisodeLog:
    """Visit instances in a uniformly random order, guessing phrases for each consecutive pair.

    Categories are the detector's top-1. Predicates and attributes are drawn
    uniformly from the graph-restricted sets.
    """
    log = EpisodeLog()
    if not scene.instances:
        return log
    order = [scene.instances[i].id for i in rng.permutation(len(scene.instances))]
    cats = {i: scene.instance(i).top_category() for i in order}
    hist = TraversalHistory()
    for step, (s, o) in enumerate(zip(order, order[1:])):
        if step >= max_steps:
            break
        si, oi = scene.instance(s), scene.instance(o)
        emitted = []
        da = sorted(x for x in build_attribute_actions(g, cats[s], hist, s) if x is not NULL)
        dp = sorted(x for x in build_predicate_actions(g, cats[s], cats[o]) if x is not NULL)
        a = da[int(rng.integers(len(da)))] if da else None
        p = dp[int(rng.integers(len(dp)))] if dp else None
        if a is not None:
            hist.mined_attrs.setdefault(s, set()).add(a)
            log.predictions.append(Prediction("attribute", Endpoint(s, cats[s], si.box, si.objectness), a, 0.0))
            emitted.append(f"{g.categories[cats[s]]} {g.attributes[a]}")
        if p is not None:
            log.predictions.append(Prediction("relationship", Endpoint(s, cats[s], si.box, si.objectness), p, 0.0,
                                              Endpoint(o, cats[o], oi.box, oi.objectness)))
            emitted.append(f"{g.categories[cats[s]]} {g.predicates[p]} {g.categories[cats[o]]}")
        log.steps.append(StepRecord(step, s, o, (a, p, o), (0, 0, 0), emitted))
    return log


# -- training ---------------------------------------------------------------

class _Learner:
    """Replay, per-step Q update and target sync for one training run."""

    def __init__(self, model: QModel, cfg: TrainConfig, seed: int, masked: bool):
        self.model = model
        self.target = model.copy()
        self.cfg = cfg
        self.opt = RMSProp(cfg.lr, cfg.rms_decay, cfg.rms_eps)
        self.memory = ReplayMemory(cfg.replay_capacity)
        self.rng = stream(seed, "replay")
        self.masked = masked
        self.step = 0
        self.sync_steps: list[int] = []

    def __call__(self, tr: Transition) -> None:
        self.memory.push(tr)
        if len(self.memory) >= self.cfg.batch:
            q_update(self.model, self.target, self.memory.sample(self.cfg.batch, self.rng),
                     self.cfg.gamma, self.opt, masked=self.masked)
        self.step += 1
        if self.step % self.cfg.tau == 0:
            self.target = self.model.copy()
            self.sync_steps.append(self.step)


@dataclass
class EpochMetrics:
    epoch: int
    mean_reward: float
    recall50_rel: float
    recall50_attr: float
    epsilon: float
    alpha: float

    def csv_row(self) -> str:
        return (f"{self.epoch},{self.mean_reward:.6f},{self.recall50_rel:.6f},{self.recall50_attr:.6f},"
                f"{self.epsilon:.6f},{self.alpha:.10g}")


METRICS_HEADER = "epoch,mean_reward,recall@50_rel,recall@50_attr,epsilon,alpha"


@dataclass
class TrainResult:
    model: QModel | None
    timeline: list[EpochMetrics]
    sync_steps: list[int] = field(default_factory=list)
    steps: int = 0

    def metrics_csv(self) -> str:
        return "\n".join([METRICS_HEADER] + [m.csv_row() for m in self.timeline]) + "\n"


def train(scenes: Sequence[Scene], graph: SemanticGraph, cfg: TrainConfig, variant=Variant.VRL, seed: int = 0,
          feats: FeatureConfig = FeatureConfig(), provider=None, val_scenes: Sequence[Scene] | None = None,
          progress: Callable[[EpochMetrics], None] | None = None) -> TrainResult:
    if not scenes:
        raise ValueError("no training scenes")
    variant = Variant.parse(variant)
    agent = Agent(graph, feats, variant, provider, cfg.max_steps)
    if variant is Variant.RANDOM_WALK:
        return TrainResult(None, [])
    model = make_model(graph, feats, cfg, variant, seed)
    learner = _Learner(model, cfg, seed, masked=variant is not Variant.FLAT)
    shuffle = stream(seed, "shuffle")
    explore = stream(seed, "eps")
    timeline = []
    for epoch in range(cfg.epochs):
        eps = cfg.epsilon(epoch)
        alpha = cfg.learning_rate(epoch)
        learner.opt.lr = alpha
        returns = []
        for i in shuffle.permutation(len(scenes)):
            _, log = agent.run_episode(scenes[i], model, "train", eps, explore, on_transition=learner)
            returns.append(log.total_reward)
        r_rel = r_attr = math.nan
        if val_scenes:
            rep = evaluate_scenes(val_scenes, agent, model, ks=(50,))
            r_rel, r_attr = rep["relationship@50"], rep["attribute@50"]
        m = EpochMetrics(epoch, float(np.mean(returns)), r_rel, r_attr, eps, alpha)
        timeline.append(m)
        if progress is not None:
            progress(m)
    return TrainResult(model, timeline, learner.sync_steps, learner.step)


# -- evaluation -------------------------------------------------------------

def scene_recalls(scene: Scene, log: EpisodeLog, ks=(50, 100), unseen=None) -> dict[str, float]:
    ranked = rank_predictions(log.predictions)
    out = {}
    for task in TASKS:
        for k in ks:
            out[f"{task}@{k}"] = recall_at_k(ranked, scene, k, task)
            if unseen is not None and task != "attribute":
                out[f"zeroshot_{task}@{k}"] = recall_at_k(ranked, scene, k, task, restrict_types=unseen)
    return out


def _eval_chunk(args):
    scenes, agent, model, ks, unseen, seed, offset = args
    rows = []
    for n, scene in enumerate(scenes):
        rng = stream(seed, "eval", offset + n)
        _, log = agent.run_episode(scene, model, "eval", 0.0, rng)
        rows.append(scene_recalls(scene, log, ks, unseen))
    return rows


def evaluate_scenes(scenes: Sequence[Scene], agent: Agent, model: QModel | None, ks=(50, 100), unseen=None,
                    seed: int = 0, jobs: int = 1, per_scene: bool = False) -> dict:
    """Macro-averaged recalls over ``scenes`` with the greedy policy."""
    scenes = list(scenes)
    if jobs > 1 and len(scenes) > 1:
        size = math.ceil(len(scenes) / jobs)
        chunks = [(scenes[i:i + size], agent, model, ks, unseen, seed, i) for i in range(0, len(scenes), size)]
        with ProcessPoolExecutor(jobs) as ex:
            rows = [r for part in ex.map(_eval_chunk, chunks) for r in part]
    else:
        rows = _eval_chunk((scenes, agent, model, ks, unseen, seed, 0))
    keys = rows[0].keys() if rows else []
    report = {k: macro_mean(r[k] for r in rows) for k in keys}
    report["scenes"] = len(scenes)
    if per_scene:
        report["per_scene"] = [{"id": s.id, **r} for s, r in zip(scenes, rows)]
    return report
