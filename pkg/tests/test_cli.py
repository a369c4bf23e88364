import csv
import json
import subprocess
import sys

import pytest

from vrl.cli import main
from vrl.graph import SemanticGraph
from vrl.scene import load_scenes

RUN_CFG = """\
[run]
seed = 2
variant = vrl
graph = {d}/g.bin
train_scenes = {d}/train.jsonl
val_scenes = {d}/val.jsonl
test_scenes = {d}/test.jsonl
output = {d}/run

[train]
epochs = 2
hidden = 16
tau = 40
batch = 8
eps_anneal_epochs = 2

[features]
d_image = 8
d_instance = 8
d_phrase = 4
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["build-graph", "--synthetic", "0", "--out", str(d / "g.bin"), "--write-counts", str(d / "c.tsv")]) == 0
    for name, seed, n in (("train", 1, 10), ("val", 2, 4), ("test", 3, 8)):
        assert main(["gen-scenes", "--graph", str(d / "g.bin"), "--out", str(d / f"{name}.jsonl"), "--n", str(n),
                     "--seed", str(seed), "--min-objects", "3", "--max-objects", "5", "--prefix", name]) == 0
    (d / "run.cfg").write_text(RUN_CFG.format(d=d))
    return d


def test_help_and_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["build-graph", "--counts", "x", "--bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["evaluate", "--scenes", "x"])
    assert exc.value.code == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "vrl", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("build-graph", "gen-scenes", "train", "evaluate", "ablate", "inspect"):
        assert cmd in out.stdout


def test_invalid_file_exit_one(tmp_path, capsys):
    missing = tmp_path / "nope.tsv"
    assert main(["build-graph", "--counts", str(missing), "--out", str(tmp_path / "g.bin")]) == 1
    assert str(missing) in capsys.readouterr().err
    bad = tmp_path / "bad.tsv"
    bad.write_text("A\tgirl\tyoung\t30\nP\tman\triding\n")
    assert main(["build-graph", "--counts", str(bad), "--out", str(tmp_path / "g.bin")]) == 1
    assert "2" in capsys.readouterr().err
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"\x00\x01")
    assert main(["inspect", "--graph", str(junk)]) == 1
    assert str(junk) in capsys.readouterr().err


def test_build_graph_from_counts(tmp_path, capsys):
    counts = tmp_path / "c.tsv"
    counts.write_text("A\tgirl\tyoung\t30\nA\tgirl\tsmiling\t29\nP\tman\triding\thorse\t31\n")
    out = tmp_path / "g.bin"
    assert main(["build-graph", "--counts", str(counts), "--min-count", "30", "--out", str(out)]) == 0
    g = SemanticGraph.load(out)
    assert g.attributes == ("young",) and g.predicates == ("riding",)
    assert json.loads(capsys.readouterr().out.splitlines()[0])["categories"] == 3


def test_gen_scenes_and_inspect(workdir, capsys):
    g = SemanticGraph.load(workdir / "g.bin")
    scenes = load_scenes(workdir / "test.jsonl", g)
    assert len(scenes) == 8 and all(3 <= len(s.gt.objects) <= 5 for s in scenes)
    capsys.readouterr()
    assert main(["inspect", "--graph", str(workdir / "g.bin"), "--scenes", str(workdir / "test.jsonl")]) == 0
    trace = json.loads(capsys.readouterr().out)
    first = trace["steps"][0]
    assert first["sets"]["delta_a"] == ["NULL"] and "TERMINAL" in first["sets"]["delta_c"]


def test_train_twice_identical_and_evaluate(workdir, tmp_path, capsys):
    cfg = str(workdir / "run.cfg")
    assert main(["train", "--config", cfg, "--quiet", "--output", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", cfg, "--quiet", "--output", str(tmp_path / "b")]) == 0
    a, b = (tmp_path / "a" / "metrics.csv").read_bytes(), (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a == b and a.startswith(b"epoch,mean_reward")
    assert len(a.decode().strip().splitlines()) == 3
    capsys.readouterr()
    assert main(["evaluate", "--run", str(tmp_path / "a"), "--k", "50", "--out", str(tmp_path / "r.json"),
                 "--per-scene", str(tmp_path / "ps.csv")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["scenes"] == 8 and 0.0 <= rep["recall"]["relationship@50"] <= 1.0
    assert "unseen_types" in rep
    assert len((tmp_path / "ps.csv").read_text().splitlines()) == 9


def test_evaluate_rejects_modified_inputs(workdir, tmp_path, capsys):
    cfg = str(workdir / "run.cfg")
    run = tmp_path / "run"
    assert main(["train", "--config", cfg, "--quiet", "--output", str(run)]) == 0
    manifest = json.loads((run / "manifest.json").read_text())
    manifest["graph_hash"] = "0" * len(manifest["graph_hash"])
    (run / "manifest.json").write_text(json.dumps(manifest))
    assert main(["evaluate", "--run", str(run)]) == 1
    assert "hash mismatch" in capsys.readouterr().err


def test_ablate_writes_rows(workdir, tmp_path):
    out = tmp_path / "abl.csv"
    assert main(["ablate", "--scenes", str(workdir / "test.jsonl"), "--train-scenes", str(workdir / "train.jsonl"),
                 "--config", str(workdir / "run.cfg"), "--seeds", "2", "--epochs", "1", "--quiet",
                 "--variants", "vrl", "flat", "random-walk", "no-ambiguity", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [(r["variant"], r["seed"]) for r in rows] == [(v, s) for v in ("vrl", "flat", "random-walk", "no-ambiguity")
                                                         for s in ("2", "3")]
    assert all(0.0 <= float(r["relationship@50"]) <= 1.0 for r in rows)
