import json

import pytest

from powerformer.cli import main

SMOKE = ["--case", "case30", "--steps", "120", "--count", "8", "--d", "4", "--eval-interval", "40",
         "--update-every", "2", "--seed", "5"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_generate(tmp_path, capsys):
    path = tmp_path / "s.txt"
    code, out, _ = run(capsys, "generate", "--case", "case30", "--count", "1", "--scenarios", str(path))
    assert code == 0
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    assert len(lines) == 1
    assert "train" in out and "test" in out


def test_generate_bad_sections(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"sections": [{"id": 42, "lines": [[1, 30]], "p_min": 0, "p_max": 5}]}))
    code, _, err = run(capsys, "generate", "--case", "case30", "--sections", str(bad), "--out", str(tmp_path))
    assert code != 0
    assert "UnknownBranch" in err and "section 42" in err


def test_train_artifacts_and_rerun(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "train", *SMOKE, "--out", str(a))[0] == 0
    assert run(capsys, "train", *SMOKE, "--out", str(b))[0] == 0
    for name in ("model.ckpt", "metrics.csv", "learning_curve.svg"):
        assert (a / name).exists()
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
    header = (a / "metrics.csv").read_text().splitlines()[0]
    assert header == "step,trailing_success_rate,loss,epsilon,wall_seconds"
    svg = (a / "learning_curve.svg").read_text()
    assert 'viewBox="0 0 800 500"' in svg and "<polyline" in svg


def test_evaluate_untrained(tmp_path, capsys):
    out = tmp_path / "run"
    assert run(capsys, "train", *SMOKE[:-2], "--steps", "0", "--out", str(out))[0] == 0
    code, text, _ = run(capsys, "evaluate", "--out", str(out), "--count", "8", "--split", "all", "--baseline")
    assert code == 0
    report = (out / "report.txt").read_text()
    for key in ("success_rate_percent", "mean_economic_cost", "inference_seconds_mean", "section 1"):
        assert key in report
    assert (out / "episodes.csv").exists() and (out / "embeddings.csv").exists()
    assert "random policy" in text


def test_evaluate_errors(tmp_path, capsys):
    code, _, err = run(capsys, "evaluate", "--checkpoint", str(tmp_path / "nope.ckpt"))
    assert code != 0 and "not found" in err
    out = tmp_path / "run9"
    assert run(capsys, "train", "--case", "case9", "--steps", "0", "--count", "4", "--d", "4", "--out", str(out))[0] == 0
    code, _, err = run(capsys, "evaluate", "--checkpoint", str(out / "model.ckpt"), "--case", "case30",
                       "--sections", "none.json", "--out", str(tmp_path / "x"))
    assert code != 0


def test_evaluate_shape_mismatch(tmp_path, capsys):
    out = tmp_path / "run9"
    assert run(capsys, "train", "--case", "case9", "--steps", "0", "--count", "4", "--d", "4", "--out", str(out))[0] == 0
    sec = tmp_path / "s30.json"
    sec.write_text(json.dumps({"sections": [{"id": 1, "lines": [[4, 12]], "p_min": 100, "p_max": 200}]}))
    code, _, err = run(capsys, "evaluate", "--checkpoint", str(out / "model.ckpt"), "--case", "case30",
                       "--sections", str(sec), "--count", "2", "--split", "all", "--out", str(tmp_path / "x"))
    assert code != 0 and "ShapeMismatch" in err


def test_config_precedence(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"count": 3, "seed": 9}))
    path = tmp_path / "s.txt"
    run(capsys, "generate", "--config", str(cfg), "--scenarios", str(path))
    assert path.read_text().startswith("# powerformer-scenarios v1 case=case30 seed=9 count=3")
    run(capsys, "generate", "--config", str(cfg), "--count", "2", "--scenarios", str(path))
    assert "count=2" in path.read_text().splitlines()[0]
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run(capsys, "generate", "--config", str(cfg))[0] != 0


def test_solve_and_bench(tmp_path, capsys):
    code, out, _ = run(capsys, "solve", "--case", "case118", "--out", str(tmp_path))
    assert code == 0 and "iterations" in out and "section 7" in out
    assert len((tmp_path / "buses.csv").read_text().splitlines()) == 119
    code, out, _ = run(capsys, "solve", "--case", "case9", "--dc", "--out", str(tmp_path / "dc"))
    assert code == 0
    code, out, _ = run(capsys, "bench", "--sizes", "20,40", "--d", "8", "--repeats", "1", "--out", str(tmp_path))
    assert code == 0 and "exponent" in out


def test_missing_case(capsys):
    code, _, err = run(capsys, "solve", "--case", "/no/such/case.m")
    assert code != 0 and "not found" in err


def test_bad_network_kind(capsys):
    with pytest.raises(SystemExit):
        main(["train", "--network", "gpt"])
