import csv
import json

import pytest

from casa_lab import cli, verify
from casa_lab.sequence import dump_jsonl, parse_pattern


def write_cfg(path, **sections):
    d = {"schema": 1, "seed": 0,
         "model": {"d_model": 16, "n_heads": 2, "n_layers": 2, "vocab_size": 12, "dtype": "float64"},
         "data": {"grid": 2, "n_colors": 4, "n_train": 64, "n_eval": 16},
         "train": {"steps": 4, "batch_samples": 4, "eval_every": 2},
         "stream": {"frame_tokens": 8, "text_per_frame": 2},
         "bench": {"d_model": 16, "n_heads": 2, "n_windows": 2, "img_per_window": 8, "text_per_window": 2}}
    for k, v in sections.items():
        d[k].update(v)
    path.write_text(json.dumps(d))
    return path


def test_usage_errors_exit_2(capsys):
    assert cli.run(["frobnicate"]) == 2
    assert cli.run(["cost"]) == 2
    assert cli.run(["verify", "--suite", "nope"]) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_config_exit_3(tmp_path):
    assert cli.run(["train", "--config", str(tmp_path / "absent.json")]) == 3


def test_bad_config_exit_2(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"schema": 1, "model": {"layers": 3}}))
    assert cli.run(["stream", "--config", str(p), "--frames", "2"]) == 2


def test_cost_synthetic_table(capsys):
    assert cli.run(["cost", "--layout", "10x1024+50"]) == 0
    assert "115347600" in capsys.readouterr().out


def test_cost_jsonl_csv(tmp_path, capsys):
    f = tmp_path / "s.jsonl"
    dump_jsonl([parse_pattern("I2 T T", token_ids=[1, 2]), parse_pattern("T I3 T", token_ids=[3, 4])], f)
    assert cli.run(["--out", str(tmp_path / "o"), "cost", "--layout", str(f), "--csv"]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert [r["mode"] for r in rows][:2] == ["insertion", "ca"]
    assert (tmp_path / "o" / "cost.csv").exists()


def test_stream_ledger(tmp_path):
    cfg = write_cfg(tmp_path / "c.json")
    out = tmp_path / "run"
    assert cli.run(["--out", str(out), "stream", "--config", str(cfg), "--frames", "20",
                    "--mode", "casa-parallel"]) == 0
    rows = list(csv.DictReader(open(out / "ledger.csv")))
    frame_rows = [r for r in rows if r["event_kind"] == "frame"]
    assert len(frame_rows) == 20 and len({r["casa_window_scalars"] for r in frame_rows}) == 1
    assert cli.run(["--out", str(out), "stream", "--config", str(cfg), "--frames", "3",
                    "--mode", "insertion", "--qformer", "2"]) == 0


def test_train_then_probe(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", model={"vocab_size": 12})
    out = tmp_path / "t"
    assert cli.run(["--out", str(out), "train", "--config", str(cfg), "--steps", "4"]) == 0
    assert (out / "metrics.csv").exists()
    for kind in ("ablate", "stats", "grad"):
        code = cli.run(["--out", str(out), "probe", "--checkpoint", str(out / "model"), "--kind", kind,
                        "--samples", "4"])
        assert code == 0, kind
        rep = json.loads((out / f"probe-{kind}.json").read_text())
        assert rep["kind"] == kind
    assert set(json.loads((out / "probe-ablate.json").read_text())) >= {"MaskSelf", "MaskRandomAny"}


def test_train_vocab_too_small(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", model={"vocab_size": 8})
    assert cli.run(["train", "--config", str(cfg)]) == 2


def test_probe_needs_casa_mode(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", model={"mode": "ca"})
    out = tmp_path / "t"
    assert cli.run(["--out", str(out), "train", "--config", str(cfg), "--steps", "1"]) == 0
    assert cli.run(["probe", "--checkpoint", str(out / "model"), "--kind", "stats"]) == 1


def test_bench(tmp_path):
    cfg = write_cfg(tmp_path / "c.json")
    assert cli.run(["--out", str(tmp_path), "bench", "--config", str(cfg), "--trials", "2"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "bench.csv")))
    assert {r["mode"]: r["params_added"] for r in rows}["casa-replace"] == "0"


@pytest.fixture
def fake_suites(monkeypatch):
    state = {"ok": True}

    def check():
        return verify.CheckResult("fake", state["ok"], 0.0, "")
    monkeypatch.setattr(verify, "SUITE_CHECKS", {k: [check] for k in verify.SUITES})
    return state


def test_verify_exit_codes(tmp_path, fake_suites):
    assert cli.run(["--out", str(tmp_path), "verify"]) == 0
    summary = json.loads((tmp_path / "verify.json").read_text())
    assert summary["tests"] == 4 and summary["failures"] == 0
    fake_suites["ok"] = False
    assert cli.run(["verify", "--suite", "masks"]) == 1
