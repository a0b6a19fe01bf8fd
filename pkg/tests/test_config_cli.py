import json
import subprocess
import sys

import pytest

from flowtint import config as C
from flowtint.cli import main
from flowtint.dataforge import DatasetManifest
from flowtint.errors import ConfigurationError
from flowtint.evalkit import EvalReport
from flowtint.pool import save_png
from flowtint.reward import ProxyRater
from flowtint.remote import StubScript, StubServer
from flowtint.train import TrainingLog

SMALL = ["--image-size", "8", "--width", "8", "--base-steps", "5", "--base-pool", "8"]


def test_resolve_precedence():
    cfg = C.resolve({"seed": 4, "beta": 0.3}, {"beta": "0.7"}, environ={})
    assert cfg["seed"] == 4 and cfg["beta"] == 0.7
    assert C.resolve({"seed": 4}, {}, environ={"FLOWTINT_SEED": "9"})["seed"] == 9
    assert C.resolve({"seed": 4}, {"seed": "2"}, environ={"FLOWTINT_SEED": "9"})["seed"] == 2
    assert C.resolve(environ={})["rounds"] == 300


def test_load_file_rejects_unknown_and_bad_values(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 1, "learning_rate": 3}))
    with pytest.raises(ConfigurationError, match="learning_rate"):
        C.load_file(p)
    p.write_text(json.dumps({"seed": 1.5}))
    with pytest.raises(ConfigurationError):
        C.load_file(p)
    p.write_text("[1]")
    with pytest.raises(ConfigurationError):
        C.load_file(p)
    with pytest.raises(ConfigurationError):
        C.resolve({"tau_lo": 0.9, "tau_hi": 0.5}, environ={})
    with pytest.raises(ConfigurationError):
        C.resolve({"reward": "remote"}, environ={})


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for key in C.KEYS:
        assert key.name in text and key.flag in text


@pytest.mark.parametrize("argv", [[], ["bogus"], ["synth"], ["synth", "--kind", "nope"],
                                  ["score", "--reference", "a.png"], ["synth", "--kind", "rl", "--seed", "x"]])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2


def test_unknown_file_key_exits_2(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"sead": 1}))
    assert main(["synth", "--kind", "rl", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2


def test_missing_files_exit_3(tmp_path):
    assert main(["score", "--reference", str(tmp_path / "a.png"), "--prediction", str(tmp_path / "b.png")]) == 3
    assert main(["eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--manifest", str(tmp_path / "m.jsonl"),
                 "--out", str(tmp_path)]) == 3


def test_rl_without_checkpoint_exits_3(tmp_path):
    assert main(["train", "--stage", "rl", "--manifest", "m.jsonl", "--out", str(tmp_path / "x")]) == 3


def test_score_proxy_and_remote(tmp_path, capsys, fixture_images):
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    save_png(fixture_images[0], a)
    save_png(fixture_images[1], b)
    assert main(["score", "--reference", str(a), "--prediction", str(a)]) == 0
    same = json.loads(capsys.readouterr().out)
    assert same["expected_score"] == pytest.approx(ProxyRater()(fixture_images[0], fixture_images[0]), abs=1e-9)
    assert sum(same["probs"]) == pytest.approx(1.0)
    with StubServer(StubScript(mode="proxy")) as stub:
        assert main(["score", "--reference", str(a), "--prediction", str(b), "--reward", "remote",
                     "--endpoint", stub.url]) == 0
    remote = json.loads(capsys.readouterr().out)
    assert main(["score", "--reference", str(a), "--prediction", str(b)]) == 0
    local = json.loads(capsys.readouterr().out)
    assert remote["expected_score"] == pytest.approx(local["expected_score"], abs=1e-9)
    with StubServer(StubScript(mode="malformed")) as stub:
        assert main(["score", "--reference", str(a), "--prediction", str(b), "--reward", "remote",
                     "--endpoint", stub.url, "--retries", "0"]) == 5


def test_synth_counts_and_seed_env(tmp_path, monkeypatch):
    out = tmp_path / "cs"
    assert main(["synth", "--kind", "cold-start", "--n", "16", "--eval", "4", "--mismatch-ratio", "0.25",
                 "--out", str(out)]) == 0
    m = DatasetManifest.read(out / "manifest.jsonl")
    assert len(m) == 16 and sum(r.augmented for r in m.records) == 4
    assert len(DatasetManifest.read(out / "train.jsonl")) == 12
    assert len(DatasetManifest.read(out / "eval.jsonl")) == 4
    first = (out / "manifest.jsonl").read_bytes()
    monkeypatch.setenv("FLOWTINT_SEED", "0")
    assert main(["synth", "--kind", "cold-start", "--n", "16", "--eval", "4", "--mismatch-ratio", "0.25",
                 "--out", str(tmp_path / "again"), "--seed", "0"]) == 0
    assert (tmp_path / "again" / "manifest.jsonl").read_bytes() == first
    monkeypatch.setenv("FLOWTINT_SEED", "7")
    assert main(["synth", "--kind", "cold-start", "--n", "16", "--eval", "4", "--out", str(tmp_path / "s7")]) == 0
    assert (tmp_path / "s7" / "manifest.jsonl").read_bytes() != first


def test_pipeline_small(tmp_path, capsys):
    d = tmp_path / "data"
    assert main(["synth", "--kind", "cold-start", "--n", "8", "--eval", "2", "--image-size", "8",
                 "--out", str(d / "cs")]) == 0
    assert main(["synth", "--kind", "rl", "--n", "6", "--eval", "2", "--image-size", "8", "--anchors",
                 "--out", str(d / "rl")]) == 0
    cold, rl = tmp_path / "cold.ckpt", tmp_path / "rl.ckpt"
    assert main(["train", "--stage", "cold", "--manifest", str(d / "cs" / "train.jsonl"), "--steps", "5",
                 "--out", str(cold), *SMALL]) == 0
    assert main(["train", "--stage", "rl", "--checkpoint", str(cold), "--manifest", str(d / "rl" / "train.jsonl"),
                 "--anchors-file", str(d / "rl" / "anchors.jsonl"), "--rounds", "2", "--g-online", "3",
                 "--t-rollout", "2", "--out", str(rl)]) == 0
    log = TrainingLog.read(tmp_path / "rl.ckpt.log.jsonl")
    assert len(log) == 2 and len(log[0]["raw_scores"]) == 5
    assert main(["eval", "--checkpoint", str(rl), "--manifest", str(d / "cs" / "eval.jsonl"), "--steps", "2",
                 "--out", str(tmp_path / "rep")]) == 0
    rep = EvalReport.read(tmp_path / "rep" / "report.json")
    assert rep.paired and len(rep.rows) == 2 and rep.rows[0]["psnr"] is not None
    assert (tmp_path / "rep" / "report.csv").exists()
    assert main(["eval", "--checkpoint", str(rl), "--manifest", str(d / "rl" / "eval.jsonl"), "--steps", "2",
                 "--out", str(tmp_path / "rep_rl"), "--no-figures"]) == 0
    rep = EvalReport.read(tmp_path / "rep_rl" / "report.json")
    assert not rep.paired and "psnr" not in rep.rows[0]
    with StubServer(StubScript(mode="proxy")) as stub:
        assert main(["eval", "--checkpoint", str(rl), "--manifest", str(d / "cs" / "eval.jsonl"), "--steps", "2",
                     "--out", str(tmp_path / "rep_remote"), "--no-figures", "--reward", "remote",
                     "--endpoint", stub.url]) == 0
    local = json.loads((tmp_path / "rep" / "report.json").read_text())["aggregate"]["means"]["expected_score"]
    remote = json.loads((tmp_path / "rep_remote" / "report.json").read_text())["aggregate"]["means"]
    assert remote["expected_score"] == pytest.approx(local, abs=1e-9)
    src = d / "cs" / "images"
    one = sorted(src.glob("*_src.png"))[0]
    assert main(["sample", "--checkpoint", str(rl), "--source", str(one),
                 "--reference", str(one).replace("_src", "_ref"), "--steps", "2", "--out", str(tmp_path / "o.png")]) == 0
    assert (tmp_path / "o.png").exists()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "flowtint", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "synth" in res.stdout
