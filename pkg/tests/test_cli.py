import csv
import hashlib
import json

import pytest

from affordance import cli

MODEL_HYPER = {"latent_dim": 8, "hidden": 8, "conv_widths": [4, 4, 4]}
TINY_HYPER = dict(MODEL_HYPER, embed_dim=8)


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert run("synth", "--task", "insertability", "--out", d / "ins.affd",
               "--samples-per-object", 2) == 0
    cfg = d / "run.json"
    cfg.write_text(json.dumps({"seed": 0, "hyper": TINY_HYPER,
                               "train": {"iterations": 12, "snapshot_every": 5}}))
    return d


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "m"
    assert run("train", "--data", data / "ins.affd", "--config", data / "run.json",
               "--out-dir", out) == 0
    return out


def test_help_documents_every_flag(capsys):
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    assert set(sub.choices) == {"synth", "train", "generate", "evaluate", "analyze-latent",
                                "transfer"}
    for name, sp in sub.choices.items():
        with pytest.raises(SystemExit) as exc:
            cli.main([name, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for action in sp._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)
            if action.option_strings and action.dest != "help":
                assert action.help, (name, action.dest)


def test_synth_unknown_task_fails(tmp_path, capsys):
    assert run("synth", "--task", "nosuch", "--out", tmp_path / "x.affd") == 1
    assert "unknown scenario" in capsys.readouterr().err
    assert not (tmp_path / "x.affd").exists()


def test_synth_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert run("synth", "--task", "rollability", "--out", tmp_path / f"{name}.affd",
                   "--samples-per-object", 1, "--cone-static") == 0
    assert sha(tmp_path / "a.affd") == sha(tmp_path / "b.affd")
    out = capsys.readouterr().out
    assert "novel / not-rolled" in out  # static cone


def test_synth_insertability_objects(data, capsys):
    run("synth", "--task", "insertability", "--out", data / "again.affd")
    out = capsys.readouterr().out
    assert "train: 8 objects" in out and "test: 2 objects" in out


def test_train_outputs(trained):
    names = sorted(p.name for p in (trained / "snapshots").iterdir())
    assert names == ["snapshot_0000000.affm", "snapshot_0000005.affm", "snapshot_0000010.affm",
                     "snapshot_0000012.affm"]
    rows = list(csv.reader(open(trained / "loss.csv")))
    assert rows[0] == ["step", "loss"] and len(rows) == 13
    assert (trained / "model.affm").read_bytes()[:4] == b"AFFM"
    meta = json.loads((trained / "run.json").read_text())
    assert meta["split"] == "train" and meta["seed"] == 0


def test_train_same_seed_same_hash(data, trained, tmp_path):
    assert run("train", "--data", data / "ins.affd", "--config", data / "run.json",
               "--out-dir", tmp_path / "again") == 0
    assert sha(tmp_path / "again" / "model.affm") == sha(trained / "model.affm")
    assert run("train", "--data", data / "ins.affd", "--config", data / "run.json",
               "--out-dir", tmp_path / "other", "--seed", 1) == 0
    assert sha(tmp_path / "other" / "model.affm") != sha(trained / "model.affm")


def test_train_baseline_writes_affb(data, tmp_path):
    assert run("train", "--data", data / "ins.affd", "--config", data / "run.json",
               "--out-dir", tmp_path / "b", "--baseline", "mse-with-time", "--iterations", 3) == 0
    assert (tmp_path / "b" / "baseline.affb").read_bytes()[:4] == b"AFFB"
    assert run("train", "--data", data / "ins.affd", "--out-dir", tmp_path / "c",
               "--baseline", "l1-loss", "--iterations", 1) == 1
    assert not (tmp_path / "c").exists()


@pytest.mark.parametrize("bad", [
    {"sedd": 1},
    {"train": {"iterations": 1, "learning_rate": 0.1}},
    {"hyper": {"latent": 3}},
    {"evaluation": {"metric": "mae"}},
    {"version": 3},
])
def test_unknown_config_keys_rejected(data, tmp_path, bad, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps(bad))
    assert run("train", "--data", data / "ins.affd", "--config", cfg,
               "--out-dir", tmp_path / "o") == 1
    assert "error" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_generate_csv(trained, tmp_path):
    req = tmp_path / "req.json"
    req.write_text(json.dumps({"observed": {"effect": [{"t": 0.0, "values": [0.0]},
                                                       {"t": 1.0, "values": [10.0]}]},
                               "outputs": ["ur10", "object"], "times": [0.0, 0.5, 1.0]}))
    assert run("generate", "--model", trained / "model.affm", "--request", req,
               "--out", tmp_path / "g.csv") == 0
    rows = list(csv.DictReader(open(tmp_path / "g.csv")))
    assert len(rows) == 3 * 6 + 32 * 32
    assert rows[0]["channel"] == "ur10" and float(rows[0]["sigma"]) > 0
    assert rows[-1]["channel"] == "object" and rows[-1]["t"] == ""


def test_generate_rejects_empty_observed(trained, tmp_path, capsys):
    req = tmp_path / "req.json"
    req.write_text(json.dumps({"observed": {}, "outputs": ["ur10"]}))
    assert run("generate", "--model", trained / "model.affm", "--request", req,
               "--out", tmp_path / "g.csv") == 1
    assert "observes no channel" in capsys.readouterr().err
    assert not (tmp_path / "g.csv").exists()


def test_evaluate_report(data, trained, tmp_path):
    assert run("evaluate", "--model", trained / "model.affm", "--data", data / "ins.affd",
               "--configs", "object,effect+ur10", "--report-dir", tmp_path / "r") == 0
    rows = list(csv.DictReader(open(tmp_path / "r" / "report.csv")))
    assert [(r["configuration"], r["channel"]) for r in rows][:3] == \
        [("object", "object"), ("object", "effect"), ("object", "ur10")]
    assert len(rows) == 6 and all(int(r["count"]) == 4 for r in rows)
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert summary["truth"] == "clean"
    assert run("evaluate", "--model", trained / "model.affm", "--data", data / "ins.affd",
               "--configs", "ghost", "--report-dir", tmp_path / "r2") == 1
    assert not (tmp_path / "r2").exists()


def test_analyze_latent(data, trained, tmp_path):
    assert run("analyze-latent", "--snapshots", trained / "snapshots", "--data", data / "ins.affd",
               "--out", tmp_path / "trace.csv", "--summary", tmp_path / "s.json") == 0
    rows = list(csv.DictReader(open(tmp_path / "trace.csv")))
    assert len(rows) == 4 * 10
    s = json.loads((tmp_path / "s.json").read_text())
    assert s["snapshots"] == 4 and -1.0 <= s["final_silhouette"] <= 1.0
    assert run("analyze-latent", "--snapshots", trained / "model.affm", "--data",
               data / "ins.affd", "--out", tmp_path / "t2.csv") == 1


def test_transfer_tiny(tmp_path, capsys):
    proto = tmp_path / "p.json"
    proto.write_text(json.dumps({
        "version": 1, "seed": 0, "samples_per_object": 1, "cone_rolls": False,
        "pretrain_iterations": 3, "continue_iterations": 2, "hyper": MODEL_HYPER,
        "protocols": [{"name": "p1", "initial": ["cuboid"], "new": "sphere",
                       "demo_agent": "kuka", "demo_direction": "left",
                       "expected": {"transfer": True, "direction": True}}]}))
    assert run("transfer", "--protocol", proto, "--report", tmp_path / "t.csv",
               "--json", tmp_path / "t.json") == 0
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert rows[0]["protocol"] == "p1" and rows[0]["transfer"] in ("0", "1")
    detail = json.loads((tmp_path / "t.json").read_text())[0]
    assert set(detail["details"]) == {"transfer", "direction-right", "direction-straight"}
    assert "p1: transfer=" in capsys.readouterr().out
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"protocols": [], "colour": 1}))
    assert run("transfer", "--protocol", bad, "--report", tmp_path / "u.csv") == 1
