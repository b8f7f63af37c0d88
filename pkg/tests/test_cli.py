import json
import subprocess
import sys

import pytest

from sicsrec.cli import DEFAULT_CONFIG, load_config, main
from sicsrec.data import load_catalog, load_interactions

TINY = [
    "--set", "synth.num_users=120", "--set", "synth.num_items=60", "--set", "synth.num_clusters=4",
    "--set", "synth.d_text=16", "--set", "synth.d_ima=16",
    "--set", "model.d=8", "--set", "model.n=6", "--set", "model.lora_rank=2",
    "--set", "align.sft_epochs=2",
    "--set", "stage1.epochs_max=3", "--set", "stage2.epochs_max=2",
    "--set", "bench.batch_sizes=[1,8]", "--set", "bench.repeats=2", "--set", "bench.probe_ns=[4,8]",
]


def run(cmd, out, *extra, capsys=None):
    code = main([cmd, "--out", str(out), *TINY, *extra])
    captured = capsys.readouterr() if capsys else None
    return code, captured


def pipeline(out):
    for cmd, extra in [("synth", []), ("pairs", []), ("sft", []), ("train", ["--stage", "1"]),
                       ("train", ["--stage", "2"]), ("eval", ["--split", "test"])]:
        assert main([cmd, "--out", str(out), *TINY, *extra]) == 0, cmd


# -------------------------------------------------------------------- config

def test_config_prints_effective_values(capsys):
    assert main(["config", "--set", "model.d=64", "--seed", "7"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["model"]["d"] == 64 and cfg["seed"] == 7
    assert cfg["synth"]["num_clusters"] == DEFAULT_CONFIG["synth"]["num_clusters"]


def test_unknown_key_fails_with_its_name(tmp_path, capsys):
    code, cap = run("synth", tmp_path, "--set", "model.dimension=3", capsys=capsys)
    assert code == 2
    assert "model.dimension" in cap.err


def test_unknown_key_in_file(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"stage1": {"epochs_max": 3, "patince": 2}}))
    assert main(["config", "--config", str(cfg)]) == 2
    assert "stage1.patince" in capsys.readouterr().err


def test_invalid_spec_names_field(tmp_path, capsys):
    code, cap = run("synth", tmp_path, "--set", "synth.signal_strength=1.5", capsys=capsys)
    assert code == 2
    assert "signal_strength" in cap.err


def test_config_file_and_overrides_layer(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"model": {"d": 48}, "seed": 3}))
    cfg = load_config(path, ["model.d=24"])
    assert cfg["model"]["d"] == 24 and cfg["seed"] == 3


# ----------------------------------------------------------------- artifacts

def test_synth_is_idempotent_and_loadable(tmp_path, capsys):
    assert run("synth", tmp_path / "a")[0] == 0
    assert run("synth", tmp_path / "b")[0] == 0
    for name in ("catalog.jsonl", "interactions.csv", "clusters.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    cat = load_catalog(tmp_path / "a" / "catalog.jsonl")
    log_ = load_interactions(tmp_path / "a" / "interactions.csv", cat)
    assert cat.num_items == 60 and log_.num_users == 120


def test_missing_upstream_names_producer(tmp_path, capsys):
    code, cap = run("pairs", tmp_path, capsys=capsys)
    assert code == 3
    assert "sicsrec synth" in cap.err


def test_stage2_needs_stage1(tmp_path, capsys):
    for cmd in ("synth", "pairs", "sft"):
        assert run(cmd, tmp_path)[0] == 0
    code, cap = run("train", tmp_path, "--stage", "2", capsys=capsys)
    assert code == 3
    assert "train --stage 1" in cap.err


def test_divergence_exit_code(tmp_path, capsys):
    for cmd in ("synth", "pairs", "sft"):
        assert run(cmd, tmp_path)[0] == 0
    with pytest.warns(RuntimeWarning):
        code, cap = run("train", tmp_path, "--stage", "1", "--set", "stage1.lr=1e300",
                        "--set", "stage1.batch_size=4", capsys=capsys)
    assert code == 4
    assert "non-finite" in cap.err


def test_eval_works_on_stage1_checkpoint(tmp_path, capsys):
    for cmd, extra in [("synth", []), ("pairs", []), ("sft", []), ("train", ["--stage", "1"])]:
        assert run(cmd, tmp_path, *extra)[0] == 0
    capsys.readouterr()
    code, cap = run("eval", tmp_path, "--split", "valid", capsys=capsys)
    assert code == 0
    result = json.loads(cap.out)
    assert result["checkpoint_stage"] == "stage1"
    assert 0.0 <= result["ndcg@10"] <= 1.0
    assert (tmp_path / "reports" / "ranks-valid.csv").exists()


def test_full_pipeline_manifests_match_across_runs(tmp_path):
    pipeline(tmp_path / "a")
    pipeline(tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a" / "manifests").iterdir())
    assert names == ["eval-test.json", "pairs.json", "sft.json", "synth.json",
                     "train-stage1.json", "train-stage2.json"]
    for name in names:
        a = json.loads((tmp_path / "a" / "manifests" / name).read_text())
        b = json.loads((tmp_path / "b" / "manifests" / name).read_text())
        assert set(a["timing"]) == {"started", "finished", "seconds"}
        a.pop("timing"), b.pop("timing")
        assert a == b, name
    ev = json.loads((tmp_path / "a" / "manifests" / "eval-test.json").read_text())
    assert ev["result"]["checkpoint_stage"] == "stage2"
    assert "stage2.npz" in ev["inputs"]


def test_bench_and_strategy(tmp_path, capsys):
    for cmd in ("synth", "pairs", "sft"):
        assert run(cmd, tmp_path)[0] == 0
    assert run("train", tmp_path, "--strategy", "end2end")[0] == 0
    assert (tmp_path / "end2end.npz").exists()
    assert (tmp_path / "reports" / "train-end2end.json").exists()
    capsys.readouterr()
    code, cap = run("bench", tmp_path, "--checkpoint", str(tmp_path / "end2end.npz"), capsys=capsys)
    assert code == 0
    bench = json.loads((tmp_path / "reports" / "bench.json").read_text())
    assert sorted(bench["latency"]) == ["1", "8"]
    assert "scaling_exponent" in json.loads(cap.out)


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "sicsrec", "config"], capture_output=True,
                         text=True, check=True).stdout
    assert json.loads(out)["strategy"] == "two-step"
