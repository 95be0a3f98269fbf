import json
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from spanset import kernels
from spanset.cli import EXIT_DATA, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, main, write_manifest
from spanset.corpus import load_corpus

MICRO = {"model": {"d_model": 16, "n_heads": 2, "n_enc_layers": 1, "n_dec_layers": 1, "ffn_width": 16,
                   "proposals_per_query": 3},
         "train": {"total_steps": 200, "batch_size": 4, "lr": 1e-3}}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.delenv("SPANSET_SEED", raising=False)
    (tmp_path / "spec.json").write_text(json.dumps({"n_samples": 24, "T": 8, "d_in": 8, "k_max": 2}))
    (tmp_path / "cfg.json").write_text(json.dumps(MICRO))
    return tmp_path


def _gen(d, name="train.jsonl", *extra):
    return main(["gen", "--spec", str(d / "spec.json"), "--out", str(d / "data" / name), *extra])


def test_gen_writes_corpus_and_manifest(workdir):
    assert _gen(workdir) == EXIT_OK
    samples, spec = load_corpus(workdir / "data" / "train.jsonl")
    assert len(samples) == 24 and spec.T == 8
    man = json.loads((workdir / "data" / "manifest.json").read_text())
    assert man["command"] == "gen" and man["config"]["corpus"]["n_samples"] == 24
    assert len(man["content_hash"]) == 64
    assert man["backend"] == kernels.BACKEND


def test_manifest_hash_depends_on_backend(tmp_path, monkeypatch):
    a = json.loads(write_manifest(tmp_path, "x", {"k": 1}, {}, [], 0.0).read_text())
    monkeypatch.setattr(kernels, "BACKEND", "other")
    b = json.loads(write_manifest(tmp_path, "x", {"k": 1}, {}, [], 0.0).read_text())
    assert a["content_hash"] != b["content_hash"]


def test_seed_env_overrides(workdir, monkeypatch):
    _gen(workdir, "a.jsonl", "--seed", "1")
    monkeypatch.setenv("SPANSET_SEED", "1")
    _gen(workdir, "b.jsonl", "--seed", "2")
    a = (workdir / "data" / "a.jsonl").read_bytes()
    assert a == (workdir / "data" / "b.jsonl").read_bytes()
    monkeypatch.setenv("SPANSET_SEED", "7")
    _gen(workdir, "c.jsonl")
    assert load_corpus(workdir / "data" / "c.jsonl")[1].seed == 7


def test_usage_errors(workdir, monkeypatch, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["gen"]) == EXIT_USAGE
    assert main(["gen", "--out", str(workdir / "x.jsonl"), "--n-samples", "0"]) == EXIT_USAGE
    (workdir / "bad.json").write_text("{nope")
    assert main(["gen", "--spec", str(workdir / "bad.json"), "--out", str(workdir / "x.jsonl")]) == EXIT_USAGE
    (workdir / "t3.json").write_text(json.dumps({"T": 3}))
    assert main(["gen", "--spec", str(workdir / "t3.json"), "--out", str(workdir / "x.jsonl")]) == EXIT_USAGE
    monkeypatch.setenv("SPANSET_SEED", "abc")
    assert main(["gen", "--out", str(workdir / "x.jsonl")]) == EXIT_USAGE
    assert main(["--version"]) == EXIT_OK


def test_data_errors(workdir):
    assert main(["train", "--corpus", str(workdir / "none.jsonl"), "--out", str(workdir / "r")]) == EXIT_DATA
    _gen(workdir)
    corpus = str(workdir / "data" / "train.jsonl")
    assert main(["eval", "--checkpoint", str(workdir / "none.bin"), "--corpus", corpus]) == EXIT_DATA
    assert main(["curves", str(workdir / "none.csv")]) == EXIT_DATA
    # checkpoint trained on T=8 scored on a T=16 corpus
    assert main(["train", "--corpus", corpus, "--config", str(workdir / "cfg.json"), "--out",
                 str(workdir / "r"), "--steps", "2"]) == EXIT_OK
    (workdir / "wide.json").write_text(json.dumps({"n_samples": 3, "T": 16, "d_in": 8}))
    main(["gen", "--spec", str(workdir / "wide.json"), "--out", str(workdir / "wide.jsonl")])
    assert main(["eval", "--checkpoint", str(workdir / "r" / "checkpoint.bin"),
                 "--corpus", str(workdir / "wide.jsonl")]) == EXIT_DATA
    assert main(["render", "--checkpoint", str(workdir / "r" / "checkpoint.bin"), "--corpus", corpus,
                 "--sample-id", "999", "--out", str(workdir / "x.svg")]) == EXIT_DATA


def test_divergence_exit_code(workdir):
    _gen(workdir)
    path = workdir / "data" / "train.jsonl"
    lines = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        rec["frames"] = [float("nan")] * len(rec["frames"])
        lines.append(json.dumps(rec))
    path.write_text("\n".join(lines) + "\n")
    assert main(["train", "--corpus", str(path), "--config", str(workdir / "cfg.json"), "--out",
                 str(workdir / "r"), "--steps", "20"]) == EXIT_DIVERGED


def test_train_eval_render_curves(workdir, capsys):
    _gen(workdir)
    corpus = str(workdir / "data" / "train.jsonl")
    run = workdir / "run"
    assert main(["train", "--corpus", corpus, "--config", str(workdir / "cfg.json"), "--out", str(run)]) == EXIT_OK
    rows = (run / "curves.csv").read_text().splitlines()
    assert rows[0] == "step,lr,l1,giou,set_guidance,total,grad_norm" and len(rows) == 201
    man = json.loads((run / "manifest.json").read_text())
    assert set(man["outputs"]) == {"checkpoint.bin", "curves.csv", "phase.json"}
    assert man["config"]["train"]["total_steps"] == 200
    phase = json.loads((run / "phase.json").read_text())
    assert 0 <= phase["sg_drop_step"] < 200

    out_csv = workdir / "ev" / "metrics.csv"
    assert main(["eval", "--checkpoint", str(run / "checkpoint.bin"), "--corpus", corpus,
                 "--out", str(out_csv)]) == EXIT_OK
    head, vals = out_csv.read_text().splitlines()
    assert head.startswith("R1@0.5,R1@0.7,R5@0.5,R5@0.7,mIoU")
    assert all(0.0 <= float(v) <= 1.0 for v in vals.split(",")[:5])

    svg = workdir / "viz" / "s.svg"
    assert main(["render", "--checkpoint", str(run / "checkpoint.bin"), "--corpus", corpus,
                 "--sample-id", "5", "--out", str(svg)]) == EXIT_OK
    ET.parse(svg)
    assert (workdir / "viz" / "s.attention.csv").exists()

    capsys.readouterr()
    assert main(["curves", str(run / "curves.csv"), "--out", str(workdir / "c.svg")]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["total_steps"] == 200
    ET.parse(workdir / "c.svg")


def test_resume_matches_uninterrupted(workdir):
    _gen(workdir)
    corpus = str(workdir / "data" / "train.jsonl")
    cfg = str(workdir / "cfg.json")
    common = ["--corpus", corpus, "--config", cfg, "--steps", "40"]
    assert main(["train", *common, "--out", str(workdir / "full")]) == EXIT_OK
    assert main(["train", *common, "--out", str(workdir / "part"), "--stop-at", "17",
                 "--checkpoint-every", "5"]) == EXIT_OK
    assert main(["train", "--corpus", corpus, "--out", str(workdir / "part"),
                 "--resume", str(workdir / "part" / "checkpoint.bin")]) == EXIT_OK
    for name in ("curves.csv", "checkpoint.bin", "phase.json"):
        assert (workdir / "full" / name).read_bytes() == (workdir / "part" / name).read_bytes(), name


class _Crash(Exception):
    pass


def test_resume_from_periodic_checkpoint(workdir, monkeypatch):
    import spanset.cli as cli

    _gen(workdir)
    corpus = str(workdir / "data" / "train.jsonl")
    common = ["--corpus", corpus, "--config", str(workdir / "cfg.json"), "--steps", "30"]
    main(["train", *common, "--out", str(workdir / "full")])
    real_train = cli.train

    def crashing(*args, on_step=None, **kw):
        def hook(row):
            on_step(row)
            if row["step"] == 13:
                raise _Crash()
        return real_train(*args, on_step=hook, **kw)

    monkeypatch.setattr(cli, "train", crashing)
    with pytest.raises(_Crash):
        main(["train", *common, "--out", str(workdir / "b"), "--checkpoint-every", "5"])
    monkeypatch.setattr(cli, "train", real_train)
    assert (workdir / "b" / "curves.csv").read_text().count("\n") == 11
    assert main(["train", "--corpus", corpus, "--out", str(workdir / "b"),
                 "--resume", str(workdir / "b" / "checkpoint.bin")]) == EXIT_OK
    assert (workdir / "full" / "curves.csv").read_bytes() == (workdir / "b" / "curves.csv").read_bytes()
    assert (workdir / "full" / "checkpoint.bin").read_bytes() == (workdir / "b" / "checkpoint.bin").read_bytes()


def test_identical_runs_identical_curves(workdir, monkeypatch):
    _gen(workdir)
    corpus = str(workdir / "data" / "train.jsonl")
    monkeypatch.setenv("SPANSET_SEED", "3")
    for name in ("x", "y"):
        main(["train", "--corpus", corpus, "--config", str(workdir / "cfg.json"), "--steps", "25",
              "--out", str(workdir / name)])
    assert (workdir / "x" / "curves.csv").read_bytes() == (workdir / "y" / "curves.csv").read_bytes()
    mx = json.loads((workdir / "x" / "manifest.json").read_text())
    my = json.loads((workdir / "y" / "manifest.json").read_text())
    assert mx["content_hash"] == my["content_hash"] and mx["config"]["train"]["seed"] == 3


def test_console_entry_point(workdir):
    proc = subprocess.run([sys.executable, "-m", "spanset.cli", "gen", "--spec", str(workdir / "spec.json"),
                           "--out", str(workdir / "d" / "c.jsonl")], capture_output=True, text=True)
    assert proc.returncode == EXIT_OK, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "spanset.cli", "train"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
