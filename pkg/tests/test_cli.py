import io
import json
import subprocess
import sys

import pytest

from conftest import FIXTURES, walk_reply
from oracles import JUDGE_EXPECTED, JUDGE_SAMPLES
from walkguide.cli import main
from walkguide.domain import TriggerState
from walkguide.engine import QA_ANSWERED, REMINDER_EMITTED, EventLog
from walkguide.hplanner import request_key
from walkguide.metrics.judge import judge_pair
from walkguide.tap import TapConfig, constant_model, init_model, model_save


def cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def models(tmp_path_factory):
    root = tmp_path_factory.mktemp("models")
    paths = {}
    for name, model in {
        "random": init_model(TapConfig(), seed=1),
        "high": constant_model(TapConfig(), TriggerState.HIGH),
        "n2": init_model(TapConfig(n_history=2), seed=1),
    }.items():
        paths[name] = root / f"{name}.tap"
        model_save(model, paths[name])
    return paths


def write_json(path, doc):
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def write_lines(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


# ---- annotate ----

def test_annotate_check_sample(capsys):
    assert cli("annotate", "check", FIXTURES / "sample_annotation.txt") == 0
    assert capsys.readouterr().out.strip() == "events: A:1 B:1 E:1 O:1"


def test_annotate_check_bad_code(tmp_path, capsys):
    text = (FIXTURES / "sample_annotation.txt").read_text(encoding="utf-8").replace("2m43s-B", "2m43s-Z")
    bad = tmp_path / "bad.txt"
    bad.write_text(text, encoding="utf-8")
    assert cli("annotate", "check", bad) == 1
    err = capsys.readouterr().err
    assert "line" in err and "Z" in err


def test_annotate_check_static_only(tmp_path, capsys):
    text = (FIXTURES / "sample_annotation.txt").read_text(encoding="utf-8")
    static = text[: text.index("⟨")] if "⟨" in text else text
    path = tmp_path / "static.txt"
    path.write_text(static, encoding="utf-8")
    assert cli("annotate", "check", path) == 0
    assert "events: none" in capsys.readouterr().out


def test_annotate_missing_file(tmp_path):
    assert cli("annotate", "check", tmp_path / "nope.txt") == 1


# ---- eval ----

def test_eval_text_identical(tmp_path, capsys):
    pairs = write_lines(tmp_path / "pairs.jsonl", [
        {"id": "1", "reference": "turn left at the corner", "candidate": "turn left at the corner"},
        {"id": "2", "reference": "a car is coming", "candidate": "a car is coming"},
    ])
    out = tmp_path / "report.json"
    assert cli("eval", "text", "--pairs", pairs, "--out", out) == 0
    agg = json.loads(out.read_text())["aggregate"]
    assert agg["rouge1"] == agg["rouge2"] == agg["rougeL"] == 1.0
    assert agg["tfidf"] == pytest.approx(1.0, abs=1e-9)
    assert "rougeL" in capsys.readouterr().out


def test_eval_text_malformed(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "1", "reference": "x"}\n')
    assert cli("eval", "text", "--pairs", bad) == 1
    bad.write_text("not json\n")
    assert cli("eval", "text", "--pairs", bad) == 1


def test_eval_trf(tmp_path, capsys):
    gt = tmp_path / "gt.txt"
    gt.write_text("A\nB\nC\nHigh\n")
    assert cli("eval", "trf", "--pred", gt, "--gt", gt) == 0
    assert "TRF macro-F1: 1.0000" in capsys.readouterr().out
    pred = write_lines(tmp_path / "pred.jsonl", [{"level": "B"}, {"level": "C"}, {"level": "A"}, {"gt_state": "A"}])
    assert cli("eval", "trf", "--pred", pred, "--gt", gt) == 0
    assert "TRF macro-F1: 0.0000" in capsys.readouterr().out
    short = tmp_path / "short.txt"
    short.write_text("A\n")
    assert cli("eval", "trf", "--pred", short, "--gt", gt) == 1
    short.write_text("A\nQ\nB\nC\n")
    assert cli("eval", "trf", "--pred", short, "--gt", gt) == 1


def test_eval_judge_with_mock_table(tmp_path, capsys):
    # script a content-keyed judge by tabulating its reply to every rendered prompt
    table = {}
    for gt, a, b in JUDGE_SAMPLES:
        for x, y in ((a, b), (b, a)):
            reply = "tie" if len(x) == len(y) else ("[[A]]" if len(x) > len(y) else "[[B]]")
            table[request_key(judge_pair(gt, x, y))] = reply
    mock = write_json(tmp_path / "mock.json", {"table": table})
    samples = write_lines(tmp_path / "samples.jsonl", [{"gt": g, "a": a, "b": b} for g, a, b in JUDGE_SAMPLES])
    out = tmp_path / "judge.json"
    assert cli("eval", "judge", "--samples", samples, "--backend", "mock", "--mock-responses", mock, "--out", out) == 0
    report = json.loads(out.read_text())
    for key, want in JUDGE_EXPECTED.items():
        assert report[key] == pytest.approx(want)
    assert "win_rate_a 0.6667" in capsys.readouterr().out


def test_eval_judge_http_without_key_is_fatal(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("WG_ABSENT_KEY", raising=False)
    cfg = write_json(tmp_path / "cfg.json", {"engine": {"backend": {"kind": "http", "endpoint_url": "http://127.0.0.1:9", "api_key_env": "WG_ABSENT_KEY"}}})
    samples = write_lines(tmp_path / "s.jsonl", [{"gt": "g", "a": "a", "b": "b"}])
    assert cli("eval", "judge", "--samples", samples, "--config", cfg) == 2
    assert "WG_ABSENT_KEY" in capsys.readouterr().err


# ---- tap ----

def test_gradcheck_seed_7(capsys):
    assert cli("tap", "gradcheck", "--seed", 7) == 0
    line = capsys.readouterr().out
    err = float(line.split(":")[1].split()[0])
    assert err < 1e-6


def test_gradcheck_tolerance_failure():
    # a huge step makes the finite differences useless
    assert cli("tap", "gradcheck", "--seed", 7, "--eps", 0.5) == 1


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["tap", "synth", "--out-dir", str(out), "--n", "40", "--size", "16", "--seed", "2"]) == 0
    return out


def test_tap_train_and_eval(synth, tmp_path, capsys):
    cfg = write_json(tmp_path / "cfg.json", {
        "tap": {"input_hw": 16, "conv_channels": [4, 8], "fv_dim": 8, "fs_hidden": 8, "fs_dim": 8, "fusion_hidden": 8},
        "train": {"epochs": 40, "stop_at_accuracy": 1.0},
    })
    model = tmp_path / "m.tap"
    assert cli("tap", "train", "--samples", synth / "samples.jsonl", "--frames", synth / "frames", "--config", cfg, "--out", model) == 0
    out = capsys.readouterr().out
    acc = float(out.split("final train accuracy:")[1].split()[0])
    assert acc >= 0.95
    history = json.loads((tmp_path / "m.tap.history.json").read_text())
    assert history["final_train_accuracy"] == acc and history["loss"]
    assert cli("tap", "eval", "--model", model, "--samples", synth / "samples.jsonl", "--frames", synth / "frames") == 0
    assert "TRF macro-F1" in capsys.readouterr().out


def test_tap_eval_mismatched_history(synth, models, capsys):
    assert cli("tap", "eval", "--model", models["n2"], "--samples", synth / "samples.jsonl", "--frames", synth / "frames") == 1
    assert "n_history" in capsys.readouterr().err


def test_tap_train_bad_samples(tmp_path, synth):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"frame_indices": [0, 1], "state_history": ["A"], "gt_state": "A"}\n')
    assert cli("tap", "train", "--samples", bad, "--frames", synth / "frames", "--out", tmp_path / "m.tap", "--epochs", 1) == 1


# ---- run ----

def test_run_writes_log(stream_dir, models, tmp_path, capsys):
    out = tmp_path / "log.ndjson"
    args = ("run", "--frames", stream_dir / "frames", "--detections", stream_dir / "dets.jsonl", "--tap-model", models["random"], "--out", out, "--backend", "mock")
    assert cli(*args) == 0
    first = out.read_bytes()
    assert cli(*args) == 0
    assert out.read_bytes() == first
    log = EventLog.loads(first.decode())
    assert log.count("TapDecision") == 58
    assert "TapDecision 58" in capsys.readouterr().out


def test_run_with_mock_replies(stream_dir, models, tmp_path):
    mock = write_json(tmp_path / "mock.json", {"fallback": walk_reply(instruction="the path is clear, keep going")})
    cfg = write_json(tmp_path / "cfg.json", {"mock_responses": "mock.json"})
    out = tmp_path / "log.ndjson"
    assert cli("run", "--frames", stream_dir / "frames", "--tap-model", models["high"], "--config", cfg, "--out", out) == 0
    emitted = EventLog.loads(out.read_text()).of_kind(REMINDER_EMITTED)
    assert emitted and emitted[0].payload["text"] == "the path is clear, keep going"


def test_run_missing_frames(models, tmp_path, capsys):
    missing = tmp_path / "no-such-dir"
    assert cli("run", "--frames", missing, "--tap-model", models["random"], "--out", tmp_path / "o") == 1
    assert str(missing) in capsys.readouterr().err


def test_run_interactive(stream_dir, models, tmp_path, monkeypatch):
    monkeypatch.setattr(sys, "stdin", io.StringIO("what is in front of me?\n\nis it safe to cross?\n:quit\n"))
    out = tmp_path / "log.ndjson"
    assert cli("run", "--frames", stream_dir / "frames", "--tap-model", models["random"], "--out", out, "--interactive") == 0
    qa = EventLog.loads(out.read_text()).of_kind(QA_ANSWERED)
    assert [e.payload["question"] for e in qa] == ["what is in front of me?", "is it safe to cross?"]


def test_run_http_without_key_is_fatal(stream_dir, models, tmp_path, monkeypatch):
    monkeypatch.delenv("WG_ABSENT_KEY", raising=False)
    cfg = write_json(tmp_path / "cfg.json", {"engine": {"backend": {"kind": "http", "endpoint_url": "http://127.0.0.1:9", "api_key_env": "WG_ABSENT_KEY"}}})
    assert cli("run", "--frames", stream_dir / "frames", "--tap-model", models["high"], "--config", cfg, "--out", tmp_path / "o") == 2


def test_run_http_without_endpoint(stream_dir, models, tmp_path):
    assert cli("run", "--frames", stream_dir / "frames", "--tap-model", models["high"], "--backend", "http", "--out", tmp_path / "o") == 1


# ---- config ----

@pytest.mark.parametrize("doc", [
    {"engine": {"fsp": 2}},
    {"bogus": 1},
    {"engine": {"policy": {"threshold": 0.5}}},
    {"tap": {"n_history": 2}},
    {"engine": {"fps": -1}},
])
def test_bad_config(doc, stream_dir, models, tmp_path, capsys):
    cfg = write_json(tmp_path / "cfg.json", doc)
    assert cli("run", "--frames", stream_dir / "frames", "--tap-model", models["random"], "--config", cfg, "--out", tmp_path / "o") == 1
    assert str(cfg) in capsys.readouterr().err


def test_console_script():
    proc = subprocess.run([sys.executable, "-m", "walkguide.cli", "annotate", "check", str(FIXTURES / "sample_annotation.txt")], capture_output=True, text=True)
    assert proc.returncode == 0 and "A:1" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "walkguide.cli", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage" in proc.stderr


def test_usage_errors_exit_1(capsys):
    assert cli("run") == 1
    assert cli("--version") == 0
