"""Command-line entry point: ``vrl <command> [options]``.

Commands: build-graph, gen-scenes, train, evaluate, ablate, inspect.
Exit status is 0 on success, 2 for usage errors and 1 for unreadable or
invalid input files.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import statistics
import sys
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .agent import Agent, Variant, evaluate_scenes, make_model, train
from .config import RunConfig, TrainConfig, dump_run_config, load_run_config, stream
from .evaluation import zero_shot_split
from .features import FeatureConfig, FileFeatureProvider
from .graph import IngestionError, SemanticGraph, build_graph, read_phrase_counts
from .qnet import load_checkpoint, save_checkpoint
from .scene import load_scenes, save_scenes
from .synth import (SceneParams, generate_scene_set, holdout_predicate_types, synthetic_phrase_counts,
                    write_phrase_counts)

ENV_HELP = ("Config keys can be overridden from the environment as VRL_<SECTION>_<KEY>, "
            "e.g. VRL_TRAIN_EPOCHS=10 or VRL_RUN_SEED=3.")
ABLATION_VARIANTS = ("vrl", "flat", "random-walk", "no-ambiguity")


class CliError(Exception):
    """Bad input file or inconsistent artifacts; reported with exit status 1."""


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_atomic(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


@dataclass(frozen=True)
class RunManifest:
    config_path: str
    seed: int
    graph_hash: str
    scenes_hash: str
    variant: str
    output_dir: str
    graph_path: str = ""
    scenes_path: str = ""

    def save(self, path: str | Path) -> None:
        write_atomic(path, json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        """Read a manifest and check that the graph and scene files still match their hashes."""
        try:
            m = cls(**json.loads(Path(path).read_text(encoding="utf-8")))
        except (TypeError, json.JSONDecodeError) as exc:
            raise CliError(f"{path}: malformed manifest: {exc}") from None
        for label, p, want in (("graph", m.graph_path, m.graph_hash), ("scenes", m.scenes_path, m.scenes_hash)):
            if p and file_hash(p) != want:
                raise CliError(f"{path}: {label} file {p} changed since the run (hash mismatch)")
        return m


# -- loading helpers ----------------------------------------------------------

def _load_graph(path) -> SemanticGraph:
    try:
        return SemanticGraph.load(path)
    except (ValueError, KeyError) as exc:
        raise CliError(f"{path}: not a graph file: {exc}") from None


def _load_scenes(path, g):
    return load_scenes(path, g)


def _provider(cfg: RunConfig, n_categories: int):
    if cfg.image_features or cfg.instance_features:
        if not (cfg.image_features and cfg.instance_features):
            raise CliError("image_features and instance_features must be given together")
        return FileFeatureProvider(cfg.image_features, cfg.instance_features, cfg.features)
    return None


def _parse_ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of integers: {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("K values must be >= 1")
    return ks


# -- commands -------------------------------------------------------------------

def cmd_build_graph(args) -> int:
    if args.counts:
        counts = read_phrase_counts(args.counts)
    else:
        counts = synthetic_phrase_counts(args.synthetic, args.categories, args.attributes, args.predicates,
                                         min_count=args.min_count)
        if args.write_counts:
            write_phrase_counts(args.write_counts, counts)
    g = build_graph(counts, args.min_count)
    g.save(args.out)
    stats = g.stats()
    stats["digest"] = g.digest()
    print(json.dumps(stats, sort_keys=True))
    return 0


def cmd_gen_scenes(args) -> int:
    g = _load_graph(args.graph)
    params = SceneParams(noise=args.noise, canvas=args.canvas, confusion=args.confusion, clutter=args.clutter)
    exclude = frozenset()
    if args.holdout_types:
        if args.holdout_frac <= 0:
            raise CliError("--holdout-types needs --holdout-frac > 0")
        exclude = holdout_predicate_types(g, args.holdout_frac, args.seed)
        names = [[g.categories[c], g.predicates[p], g.categories[c2]] for c, p, c2 in sorted(exclude)]
        write_atomic(args.holdout_types, json.dumps(names, indent=1) + "\n")
    scenes = generate_scene_set(g, args.seed, args.n, params, (args.min_objects, args.max_objects),
                                args.prefix, exclude)
    save_scenes(args.out, scenes, g)
    rels = sum(len(s.gt.pred_phrases) for s in scenes)
    print(f"wrote {len(scenes)} scenes ({rels} relationships) to {args.out}")
    return 0


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "variant", None):
        updates["variant"] = args.variant
    if getattr(args, "output", None):
        updates["output"] = args.output
    cfg = replace(cfg, **updates)
    Variant.parse(cfg.variant)
    return cfg


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if not cfg.graph or not cfg.train_scenes:
        raise CliError(f"{args.config}: [run] graph and train_scenes are required")
    g = _load_graph(cfg.graph)
    scenes = _load_scenes(cfg.train_scenes, g)
    val = _load_scenes(cfg.val_scenes, g) if cfg.val_scenes else None
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)

    def progress(m):
        if not args.quiet:
            print(f"epoch {m.epoch:3d}  reward {m.mean_reward:8.3f}  eps {m.epsilon:.3f}  alpha {m.alpha:.3g}",
                  file=sys.stderr)

    res = train(scenes, g, cfg.train, cfg.variant, cfg.seed, cfg.features, _provider(cfg, g.n_categories),
                val, progress)
    write_atomic(out / "metrics.csv", res.metrics_csv())
    write_atomic(out / "run.cfg", dump_run_config(cfg))
    if res.model is not None:
        save_checkpoint(out / "model.ckpt", res.model, step=res.steps, config=cfg.to_dict())
    RunManifest(str(args.config), cfg.seed, file_hash(cfg.graph), file_hash(cfg.train_scenes),
                Variant.parse(cfg.variant).value, str(out), str(cfg.graph), str(cfg.train_scenes)
                ).save(out / "manifest.json")
    print(f"trained {cfg.variant} for {len(res.timeline)} epochs ({res.steps} steps); outputs in {out}")
    return 0


def _report(rep: dict, cfg: RunConfig, n_unseen: int | None) -> dict:
    out = {"config_hash": cfg.digest(), "variant": Variant.parse(cfg.variant).value, "seed": cfg.seed,
           "scenes": rep["scenes"], "recall": {k: v for k, v in rep.items() if "@" in k}}
    if n_unseen is not None:
        out["unseen_types"] = n_unseen
    return out


def _per_scene_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    keys = list(rows[0]) if rows else ["id"]
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()})
    return buf.getvalue()


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    if args.run:
        run_dir = Path(args.run)
        RunManifest.load(run_dir / "manifest.json")
        cfg = replace(load_run_config(run_dir / "run.cfg"), output=str(run_dir))
    test_path = args.scenes or cfg.test_scenes
    if not cfg.graph or not test_path:
        raise CliError("evaluate needs a graph and test scenes (config [run] or --scenes)")
    g = _load_graph(cfg.graph)
    test = _load_scenes(test_path, g)
    variant = Variant.parse(cfg.variant)
    model = None
    if variant is not Variant.RANDOM_WALK:
        ckpt = args.checkpoint or Path(cfg.output) / "model.ckpt"
        model = load_checkpoint(ckpt)[0]
    unseen = None
    if cfg.train_scenes:
        unseen = zero_shot_split(_load_scenes(cfg.train_scenes, g), test).unseen_types
    agent = Agent(g, cfg.features, variant, _provider(cfg, g.n_categories), cfg.train.max_steps)
    rep = evaluate_scenes(test, agent, model, args.k, unseen, seed=cfg.seed, jobs=args.jobs,
                          per_scene=bool(args.per_scene))
    report = _report(rep, cfg, None if unseen is None else len(unseen))
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    if args.per_scene:
        write_atomic(args.per_scene, _per_scene_csv(rep["per_scene"]))
    return 0


def _split_scenes(scenes, frac: float, seed: int):
    idx = stream(seed, "split").permutation(len(scenes))
    n_train = int(round(frac * len(scenes)))
    return [scenes[i] for i in sorted(idx[:n_train])], [scenes[i] for i in sorted(idx[n_train:])]


def run_ablation(train_scenes, test_scenes, g, cfg: TrainConfig, feats: FeatureConfig, seeds, variants,
                 ks=(50, 100), jobs: int = 1, unseen=None, provider=None, log=None) -> list[dict]:
    """Train and evaluate every variant for every seed; one row per (variant, seed)."""
    rows = []
    for v in variants:
        v = Variant.parse(v)
        for seed in seeds:
            t0 = time.perf_counter()
            res = train(train_scenes, g, cfg, v, seed, feats, provider)
            agent = Agent(g, feats, v, provider, cfg.max_steps)
            rep = evaluate_scenes(test_scenes, agent, res.model, ks, unseen, seed=seed, jobs=jobs)
            row = {"variant": v.value, "seed": seed}
            row.update({k: val for k, val in rep.items() if "@" in k})
            row["seconds"] = round(time.perf_counter() - t0, 3)
            rows.append(row)
            if log is not None:
                log(row)
    return rows


def ablation_medians(rows: list[dict], key: str) -> dict[str, float]:
    by: dict[str, list[float]] = {}
    for r in rows:
        by.setdefault(r["variant"], []).append(r[key])
    return {v: statistics.median(x) for v, x in by.items()}


def _rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=[k for k in rows[0] if k != "seconds"], lineterminator="\n",
                       extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def cmd_ablate(args) -> int:
    cfg = _load_config(args) if args.config else RunConfig(seed=args.seed or 0)
    g = _load_graph(args.graph or cfg.graph)
    scenes = _load_scenes(args.scenes, g)
    if args.train_scenes:
        train_scenes, test_scenes = _load_scenes(args.train_scenes, g), scenes
    else:
        train_scenes, test_scenes = _split_scenes(scenes, args.train_frac, cfg.seed)
    if not train_scenes or not test_scenes:
        raise CliError(f"{args.scenes}: too few scenes to split into train and test")
    tcfg = cfg.train if args.epochs is None else replace(cfg.train, epochs=args.epochs)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    unseen = zero_shot_split(train_scenes, test_scenes).unseen_types

    def log(row):
        if not args.quiet:
            print(f"{row['variant']:>14} seed {row['seed']}: rel@50 {row['relationship@50']:.4f} "
                  f"({row['seconds']:.1f}s)", file=sys.stderr)

    rows = run_ablation(train_scenes, test_scenes, g, tcfg, cfg.features, seeds, args.variants, (50, 100),
                        args.jobs, unseen, _provider(cfg, g.n_categories), log)
    text = _rows_csv(rows)
    if args.out:
        write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    med = ablation_medians(rows, "relationship@50")
    print("median relationship@50: " + ", ".join(f"{v}={x:.4f}" for v, x in med.items()), file=sys.stderr)
    return 0


def cmd_inspect(args) -> int:
    g = _load_graph(args.graph)
    if not args.scenes:
        print(json.dumps({**g.stats(), "digest": g.digest()}, indent=2, sort_keys=True))
        return 0
    scenes = _load_scenes(args.scenes, g)
    if args.scene_id is not None:
        match = [s for s in scenes if s.id == args.scene_id]
        if not match:
            raise CliError(f"{args.scenes}: no scene with id {args.scene_id!r}")
        scene = match[0]
    else:
        if not 0 <= args.index < len(scenes):
            raise CliError(f"{args.scenes}: scene index {args.index} out of range ({len(scenes)} scenes)")
        scene = scenes[args.index]
    variant = Variant.parse(args.variant)
    feats = FeatureConfig()
    agent = Agent(g, feats, variant)
    model = None
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)[0]
    elif variant is not Variant.RANDOM_WALK:
        model = make_model(g, feats, TrainConfig(), variant, args.seed)
    _, log = agent.run_episode(scene, model, "eval", 0.0, stream(args.seed, "inspect"), record_sets=True)

    def plain(x):
        if isinstance(x, (np.integer,)):
            return int(x)
        return x

    steps = [{"step": s.step, "subject": s.subject, "object": s.object,
              "actions": [plain(a) if a is not None else None for a in s.actions],
              "rewards": list(s.rewards), "emitted": s.emitted, "sets": s.sets} for s in log.steps]
    print(json.dumps({"scene": scene.id, "variant": variant.value, "steps": steps}, indent=1))
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vrl", description="Relationship and attribute mining with a "
                                "variation-structured action space.", epilog=ENV_HELP)
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    b = sub.add_parser("build-graph", help="threshold phrase counts into a semantic action graph")
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--counts", help="TSV phrase counts (A/P records)")
    src.add_argument("--synthetic", type=int, metavar="SEED", help="generate synthetic counts with this seed")
    b.add_argument("--min-count", type=int, default=30, help="keep phrases seen at least this often (default 30)")
    b.add_argument("--categories", type=int, default=50, help="synthetic: number of categories")
    b.add_argument("--attributes", type=int, default=30, help="synthetic: number of attributes")
    b.add_argument("--predicates", type=int, default=20, help="synthetic: number of predicates")
    b.add_argument("--write-counts", help="synthetic: also write the generated counts TSV here")
    b.add_argument("--out", required=True, help="output graph file")
    b.set_defaults(func=cmd_build_graph)

    s = sub.add_parser("gen-scenes", help="synthesize a JSON-lines scene set from a graph")
    s.add_argument("--graph", required=True, help="graph file from build-graph")
    s.add_argument("--out", required=True, help="output scenes (.jsonl)")
    s.add_argument("--n", type=int, default=500, help="number of scenes (default 500)")
    s.add_argument("--seed", type=int, default=0, help="scene-generation seed")
    s.add_argument("--min-objects", type=int, default=4, help="fewest gt objects per scene")
    s.add_argument("--max-objects", type=int, default=8, help="most gt objects per scene")
    s.add_argument("--noise", type=float, default=0.1, help="relative box jitter of detections")
    s.add_argument("--canvas", type=float, default=10.0, help="image side length")
    s.add_argument("--confusion", type=float, default=0.0,
                   help="probability that an instance has a near-tie look-alike category")
    s.add_argument("--clutter", type=int, default=0, help="extra detections per scene with no gt object")
    s.add_argument("--prefix", default="s", help="scene id prefix")
    s.add_argument("--holdout-frac", type=float, default=0.0,
                   help="share of relationship types to keep out of these scenes")
    s.add_argument("--holdout-types", help="write the held-out types (JSON) here")
    s.set_defaults(func=cmd_gen_scenes)

    t = sub.add_parser("train", help="train a Q-network from a run config", epilog=ENV_HELP)
    t.add_argument("--config", required=True, help="run config (INI: [run] [train] [features] [scenes])")
    t.add_argument("--seed", type=int, help="override [run] seed")
    t.add_argument("--variant", choices=[v.value for v in Variant], help="override [run] variant")
    t.add_argument("--output", help="override [run] output directory")
    t.add_argument("--quiet", action="store_true", help="no per-epoch progress on stderr")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="Recall@K of a trained run on test scenes", epilog=ENV_HELP)
    e.add_argument("--config", help="run config")
    e.add_argument("--run", help="run directory written by train (manifest is verified)")
    e.add_argument("--scenes", help="test scenes (default: [run] test_scenes)")
    e.add_argument("--checkpoint", help="model checkpoint (default: <output>/model.ckpt)")
    e.add_argument("--seed", type=int, help="override [run] seed")
    e.add_argument("--variant", choices=[v.value for v in Variant], help="override [run] variant")
    e.add_argument("--k", type=_parse_ks, default=(50, 100), help="comma-separated K values (default 50,100)")
    e.add_argument("--jobs", type=int, default=1, help="worker processes for scene-parallel evaluation")
    e.add_argument("--out", help="write the JSON report here instead of stdout")
    e.add_argument("--per-scene", help="also write per-scene recalls as CSV")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="compare policy variants over several seeds", epilog=ENV_HELP)
    a.add_argument("--scenes", required=True, help="scene set (test set when --train-scenes is given)")
    a.add_argument("--graph", help="graph file (default: [run] graph)")
    a.add_argument("--train-scenes", help="separate training scenes")
    a.add_argument("--train-frac", type=float, default=0.5, help="train share when splitting --scenes")
    a.add_argument("--config", help="run config supplying training settings")
    a.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at [run] seed")
    a.add_argument("--seed", type=int, help="first seed")
    a.add_argument("--epochs", type=int, help="override [train] epochs")
    a.add_argument("--variants", nargs="+", default=list(ABLATION_VARIANTS),
                   choices=[v.value for v in Variant], help="variants to compare")
    a.add_argument("--jobs", type=int, default=1, help="worker processes for evaluation")
    a.add_argument("--out", help="CSV output (default stdout)")
    a.add_argument("--quiet", action="store_true", help="no progress on stderr")
    a.set_defaults(func=cmd_ablate)

    i = sub.add_parser("inspect", help="graph statistics or a per-step action-set trace")
    i.add_argument("--graph", required=True, help="graph file")
    i.add_argument("--scenes", help="scene set; when given, trace one episode")
    i.add_argument("--index", type=int, default=0, help="scene index to trace")
    i.add_argument("--scene-id", help="scene id to trace (overrides --index)")
    i.add_argument("--checkpoint", help="policy checkpoint (default: freshly initialized network)")
    i.add_argument("--variant", default="vrl", choices=[v.value for v in Variant], help="policy variant")
    i.add_argument("--seed", type=int, default=0, help="seed for initialization and tie-breaking")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "evaluate" and not (args.config or args.run):
        parser.error("evaluate needs --config or --run")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except IngestionError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except OSError as exc:
        where = exc.filename if exc.filename is not None else ""
        print(f"error: {where}: {exc.strerror or exc}", file=sys.stderr)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
