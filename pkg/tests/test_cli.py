import csv
import json
import logging

import numpy as np
import pytest

from vip.cli import build_parser, main
from vip.fixtures import TOY_CONFIG
from vip.imageio import read_ppm
from vip.vit import load_weights

FAST = ["--lmax", "2", "--iters", "20", "--check-every", "10"]


@pytest.fixture(scope="module")
def inputs(tmp_path_factory):
    d = tmp_path_factory.mktemp("inputs")
    assert main(["gen-weights", "--seed", "7", "--out", str(d / "m.vitw")]) == 0
    assert main(["gen-image", "--seed", "7", "--out", str(d / "img.ppm")]) == 0
    (d / "boxes.txt").write_text("16 16 32 32\n")
    return d


def attack_args(inputs, out, *extra):
    return ["attack", "--model", str(inputs / "m.vitw"), "--image", str(inputs / "img.ppm"),
            "--boxes", str(inputs / "boxes.txt"), "--out-dir", str(out), *FAST, *extra]


def sweep_args(inputs, out, *extra):
    return ["sweep", "--model", str(inputs / "m.vitw"), "--image", str(inputs / "img.ppm"),
            "--boxes", str(inputs / "boxes.txt"), "--out", str(out), *FAST, *extra]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- gen-weights ---------------------------------------------------------------

def test_gen_weights_is_deterministic(tmp_path, inputs):
    assert main(["gen-weights", "--seed", "7", "--out", str(tmp_path / "b.vitw")]) == 0
    assert (tmp_path / "b.vitw").read_bytes() == (inputs / "m.vitw").read_bytes()
    assert load_weights(tmp_path / "b.vitw").config == TOY_CONFIG


def test_gen_weights_env_seed(tmp_path, monkeypatch, inputs):
    monkeypatch.setenv("VIP_SEED", "7")
    assert main(["gen-weights", "--out", str(tmp_path / "env.vitw")]) == 0
    assert (tmp_path / "env.vitw").read_bytes() == (inputs / "m.vitw").read_bytes()
    assert main(["gen-weights", "--seed", "8", "--out", str(tmp_path / "flag.vitw")]) == 0
    assert (tmp_path / "flag.vitw").read_bytes() != (inputs / "m.vitw").read_bytes()


def test_gen_weights_bad_config(tmp_path, caplog):
    code = main(["gen-weights", "--embed-dim", "66", "--heads", "4", "--out", str(tmp_path / "x")])
    assert code == 2
    assert "divisible" in caplog.text
    assert not (tmp_path / "x").exists()


def test_help_documents_defaults(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["gen-weights", "--help"])
    text = capsys.readouterr().out
    assert "default: 64" in text and "default: 16" in text and "default: 128" in text


def test_attack_defaults():
    args = build_parser().parse_args(["attack", "--model", "m", "--image", "i", "--boxes", "b",
                                      "--out-dir", "o"])
    assert (args.alpha, args.iters, args.patience, args.check_every) == (1e-3, 1500, 10, 100)
    assert args.mode == "A+V" and args.optimizer == "adam" and args.linf is None


# -- attack --------------------------------------------------------------------

def test_attack_writes_artifacts(tmp_path, inputs):
    out = tmp_path / "run"
    code = main(attack_args(inputs, out))
    assert code in (0, 3)
    result = json.loads((out / "result.json").read_text())
    manifest = json.loads((out / "manifest.json").read_text())
    assert (code == 0) == result["success"]
    assert len(result["loss_history"]) == 20
    assert result["roi_tokens"] == [6]
    for name, path in manifest["artifacts"].items():
        assert (out / path.rsplit("/", 1)[-1]).exists(), name
    assert read_ppm(out / "adversarial.ppm").width == 64
    assert read_ppm(out / "rollout_clean.ppm").width == 64


def test_attack_budget(tmp_path, inputs):
    out = tmp_path / "run"
    main(attack_args(inputs, out, "--linf", "20", "--alpha", "0.05"))
    result = json.loads((out / "result.json").read_text())
    assert result["config"]["linf"] == 20
    assert 0 < result["max_abs_delta"] <= 20


def test_mode_v_ignores_lambda(tmp_path, inputs, caplog):
    with caplog.at_level(logging.WARNING):
        main(attack_args(inputs, tmp_path / "v", "--mode", "V", "--lambda-v", "5"))
    assert "ignored" in caplog.text or "ignoring" in caplog.text
    result = json.loads((tmp_path / "v" / "result.json").read_text())
    assert result["config"]["lambda_v"] == 1.0
    assert result["attention_reads"] == 0


def test_empty_roi_exit_code(tmp_path, inputs, caplog):
    (tmp_path / "none.txt").write_text("# nothing here\n")
    args = attack_args(inputs, tmp_path / "o")
    args[args.index("--boxes") + 1] = str(tmp_path / "none.txt")
    assert main(args) == 2
    assert "empty" in caplog.text.lower()


def test_box_outside_frame_exit_code(tmp_path, inputs):
    (tmp_path / "bad.txt").write_text("0 0 65 10\n")
    args = attack_args(inputs, tmp_path / "o", "--no-auto-resize")
    args[args.index("--boxes") + 1] = str(tmp_path / "bad.txt")
    assert main(args) == 2


def test_missing_model_exit_code(tmp_path, inputs):
    args = attack_args(inputs, tmp_path / "o")
    args[args.index("--model") + 1] = str(tmp_path / "missing.vitw")
    assert main(args) == 4


def test_bad_image_exit_code(tmp_path, inputs):
    (tmp_path / "bad.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    args = attack_args(inputs, tmp_path / "o")
    args[args.index("--image") + 1] = str(tmp_path / "bad.ppm")
    assert main(args) == 4


def test_larger_image_is_resized(tmp_path, inputs):
    assert main(["gen-image", "--resolution", "128", "--out", str(tmp_path / "big.ppm")]) == 0
    (tmp_path / "big.txt").write_text("32 32 64 64\n")
    args = attack_args(inputs, tmp_path / "o")
    args[args.index("--image") + 1] = str(tmp_path / "big.ppm")
    args[args.index("--boxes") + 1] = str(tmp_path / "big.txt")
    assert main(args) in (0, 3)
    result = json.loads((tmp_path / "o" / "result.json").read_text())
    assert result["image"]["resized"] and result["roi_tokens"] == [6]


# -- sweep ---------------------------------------------------------------------

def test_sweep_rows(tmp_path, inputs):
    out = tmp_path / "lmax.csv"
    assert main(sweep_args(inputs, out, "--param", "lmax", "--values", "1", "2", "4")) == 0
    rows = read_csv(out)
    assert [r["value"] for r in rows] == ["1", "2", "4"]
    assert all(r["error"] == "" and r["stop_reason"] for r in rows)
    assert out.with_suffix(".manifest.json").exists()


def test_sweep_failures_are_recorded(tmp_path, inputs):
    out = tmp_path / "bad.csv"
    assert main(sweep_args(inputs, out, "--param", "lmax", "--values", "9", "1")) == 0
    rows = read_csv(out)
    assert "l_max" in rows[0]["error"] and rows[1]["error"] == ""


def test_single_value_sweep_matches_attack(tmp_path, inputs):
    main(attack_args(inputs, tmp_path / "a", "--lambda-v", "0.5"))
    result = json.loads((tmp_path / "a" / "result.json").read_text())
    main(sweep_args(inputs, tmp_path / "s.csv", "--param", "lambda-v", "--values", "0.5"))
    row = read_csv(tmp_path / "s.csv")[0]
    assert row["final_loss"] == f"{result['loss_history'][-1]['total']:.6g}"
    assert row["ssim"] == f"{result['metrics']['ssim']:.6g}"
    assert row["iterations"] == str(result["iterations"])


def test_zero_lambda_matches_mode_a(tmp_path, inputs):
    main(attack_args(inputs, tmp_path / "a", "--mode", "A"))
    result = json.loads((tmp_path / "a" / "result.json").read_text())
    main(sweep_args(inputs, tmp_path / "s.csv", "--param", "lambda-v", "--values", "0"))
    row = read_csv(tmp_path / "s.csv")[0]
    assert row["final_loss"] == f"{result['loss_history'][-1]['total']:.6g}"


def test_parallel_sweep_keeps_order(tmp_path, inputs):
    serial, parallel = tmp_path / "a.csv", tmp_path / "b.csv"
    values = ["--param", "lambda-v", "--values", "2", "0", "1"]
    main(sweep_args(inputs, serial, *values))
    main(sweep_args(inputs, parallel, *values, "--jobs", "3"))
    assert serial.read_text() == parallel.read_text()


# -- analyze -------------------------------------------------------------------

@pytest.mark.parametrize("kind, expected", [("identity", 1.0), ("uniform", 1 / 17)])
def test_analyze_dominance(tmp_path, inputs, kind, expected):
    model = tmp_path / f"{kind}.vitw"
    assert main(["gen-weights", "--kind", kind, "--out", str(model)]) == 0
    out = tmp_path / "an"
    assert main(["analyze", "--model", str(model), "--images", str(inputs / "img.ppm"),
                 str(inputs / "img.ppm"), "--out-dir", str(out)]) == 0
    rows = read_csv(out / "diagonal_dominance.csv")
    assert [int(r["layer"]) for r in rows] == [1, 2, 3, 4]
    for r in rows:
        assert float(r["diagonal_dominance"]) == pytest.approx(expected, abs=1e-5)
    heat = read_ppm(out / "attention_layer2.ppm")
    assert (heat.width, heat.height) == (17 * 8, 17 * 8)


def test_analyze_bad_layer(tmp_path, inputs):
    assert main(["analyze", "--model", str(inputs / "m.vitw"), "--images", str(inputs / "img.ppm"),
                 "--layer", "5", "--out-dir", str(tmp_path)]) == 2
