import json
import subprocess
import sys

import numpy as np
import pytest

from persam.cli import main
from persam.viz import quantize, read_csv, read_pgm, write_pgm

TINY_SPEC = {"n_cases": 15, "pool_size": 8, "patch_size": 8}
TINY_RUN = {
    "model": {"encoder": {"R": 8, "L": 6, "clinical_hidden": 8, "conv_channels": [4, 4],
                          "patch_shape": [8, 8, 3]}, "clf_hidden": 8, "attn_hidden": 8},
    "optim": {"epochs": 4},
    "clinical_optim": {"epochs": 4},
    "cv": {"k": 5, "L": 6, "train_bags": 1, "eval_bags": 1},
}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = write_json(root / "spec.json", TINY_SPEC)
    assert main(["gen", "--spec", spec, "--seed", "3", "--out", str(root / "ds")]) == 0
    return root / "ds"


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    root = tmp_path_factory.mktemp("run")
    cfg = write_json(root / "run.json", TINY_RUN)
    assert main(["train", "--data", str(dataset), "--config", cfg, "--out", str(root / "out"), "--seed", "1"]) == 0
    return root / "out", cfg


def test_gen_is_byte_identical(tmp_path, capsys):
    spec = write_json(tmp_path / "spec.json", TINY_SPEC)
    for name in ("a", "b"):
        assert main(["gen", "--spec", spec, "--seed", "9", "--out", str(tmp_path / name)]) == 0
    out = capsys.readouterr().out
    assert "class counts: 0=5, 1=5, 2=5" in out
    for f in ("manifest.json", "data.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_gen_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["gen", "--seed", "1"])
    assert info.value.code == 2
    bad = write_json(tmp_path / "bad.json", {"n_cases": 3, "shade": 2})
    assert main(["gen", "--spec", bad, "--out", str(tmp_path / "x")]) == 2
    assert main(["gen", "--spec", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]) == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "persam.cli", "gen"], capture_output=True, text=True)
    assert res.returncode == 2 and "--out" in res.stderr


def test_train_outputs(trained):
    out, _ = trained
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    for f in manifest["files"]:
        assert (out / f).exists()
    lines = [json.loads(l) for l in (out / "log.jsonl").read_text().splitlines()]
    assert lines[0]["seed"] == 1 and "config" in lines[0]
    recs = lines[1:]
    assert {"model", "fold", "epoch", "split", "loss", "accuracy"} <= set(recs[0])
    assert "PersAM" in (out / "report.txt").read_text()


def test_train_is_reproducible(tmp_path, dataset, trained):
    out, cfg = trained
    assert main(["train", "--data", str(dataset), "--config", cfg, "--out", str(tmp_path / "again"),
                 "--seed", "1"]) == 0
    assert (tmp_path / "again" / "log.jsonl").read_bytes() == (out / "log.jsonl").read_bytes()


def test_eval_reproduces_recorded_val_loss(tmp_path, dataset, trained):
    out, _ = trained
    ck = out / "checkpoints" / "persam" / "fold2"
    assert main(["eval", "--data", str(dataset), "--checkpoint", str(ck), "--out", str(tmp_path / "ev")]) == 0
    res = json.loads((tmp_path / "ev" / "eval.json").read_text())
    assert abs(res["val_loss"] - res["recorded_val_loss"]) <= 1e-9


def test_all_models_report(tmp_path, dataset):
    cfg = write_json(tmp_path / "run.json", TINY_RUN)
    assert main(["eval", "--data", str(dataset), "--config", cfg, "--out", str(tmp_path / "all"),
                 "--all-models"]) == 0
    rows = (tmp_path / "all" / "report.txt").read_text().splitlines()[2:]
    assert len(rows) == 6
    assert len(json.loads((tmp_path / "all" / "results.json").read_text())) == 6


def test_injected_nan_exits_3(tmp_path, dataset):
    run = json.loads(json.dumps(TINY_RUN))
    run["optim"]["inject_nan_at"] = 2
    cfg = write_json(tmp_path / "nan.json", run)
    assert main(["train", "--data", str(dataset), "--config", cfg, "--out", str(tmp_path / "nan")]) == 3
    last = json.loads((tmp_path / "nan" / "log.jsonl").read_text().splitlines()[-1])
    assert last["error"] == "non-finite loss" and last["batch"] == 2


def test_bad_config_exits_2(tmp_path, dataset):
    cfg = write_json(tmp_path / "bad.json", {"optimizer": {}})
    assert main(["train", "--data", str(dataset), "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2


def test_attend_real_record(tmp_path, dataset, trained):
    out, _ = trained
    ck = str(out / "checkpoints" / "persam" / "fold0")
    dest = tmp_path / "att"
    assert main(["attend", "--checkpoint", ck, "--data", str(dataset), "--case", "4", "--out", str(dest)]) == 0
    manifest = json.loads((dest / "manifest.json").read_text())
    assert len(manifest["reports"]) == 1
    table = read_csv(dest / "case4_real.csv")
    assert len(table["patch"]) == 8
    # CSV values equal the in-memory report to 6 decimals
    from persam.checkpoint import load_checkpoint
    from persam.data import load_dataset
    from persam.viz import attention_report

    rep = attention_report(load_checkpoint(ck).build(), load_dataset(dataset).by_id(4))
    np.testing.assert_allclose(table["exploratory"], rep.exploratory, atol=5e-7)
    np.testing.assert_allclose(table["explanatory_1"], rep.explanatory[:, 1], atol=5e-7)
    np.testing.assert_allclose(table["clinical_to_patch_0"], rep.clinical_to_patch[0], atol=5e-7)
    img = read_pgm(dest / "case4_real_exploratory.pgm")
    assert img.shape == rep.grid_shape
    np.testing.assert_array_equal(img[rep.grid[:, 0], rep.grid[:, 1]], np.rint(255 * rep.exploratory))


def test_attend_class_swap_emits_three_reports(tmp_path, dataset, trained):
    out, _ = trained
    ck = str(out / "checkpoints" / "persam" / "fold0")
    dest = tmp_path / "swap"
    assert main(["attend", "--checkpoint", ck, "--data", str(dataset), "--case", "4", "--swap-record", "class",
                 "--out", str(dest)]) == 0
    manifest = json.loads((dest / "manifest.json").read_text())
    assert [r["record"] for r in manifest["reports"]] == ["class:0", "class:1", "class:2"]
    assert main(["attend", "--checkpoint", ck, "--data", str(dataset), "--case", "4", "--swap-record", "7",
                 "--out", str(tmp_path / "one")]) == 0


def test_attend_errors(tmp_path, dataset, trained):
    out, _ = trained
    ck = str(out / "checkpoints" / "persam" / "fold0")
    assert main(["attend", "--checkpoint", ck, "--data", str(dataset), "--case", "999", "--out", str(tmp_path)]) == 2
    assert main(["attend", "--checkpoint", ck, "--data", str(dataset), "--case", "1", "--swap-record", "x",
                 "--out", str(tmp_path)]) == 2
    mil = str(out / "checkpoints" / "persam" / "missing")
    assert main(["attend", "--checkpoint", mil, "--data", str(dataset), "--case", "1", "--out", str(tmp_path)]) == 2


def test_quantization_and_pgm(tmp_path):
    assert quantize(np.array([1.0]))[0] == 255
    assert quantize(np.array([0.0, 0.5, 0.002]))[1:].tolist() == [128, 1]
    with pytest.raises(ValueError):
        quantize(np.array([1.2]))
    grid = np.array([[0, 0], [0, 1], [1, 0]])
    path = write_pgm(tmp_path / "h.pgm", np.array([1.0, 0.0, 0.25]), grid, (2, 2))
    assert path.read_bytes().startswith(b"P5\n2 2\n255\n")
    np.testing.assert_array_equal(read_pgm(path), [[255, 0], [64, 0]])


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    for g in ("f", "g", "enc", "agg", "clf"):
        assert any(line.split()[0] == g for line in out.splitlines() if line.strip())
    assert main(["gradcheck", "--seed", "0", "--corrupt-backward"]) == 4
    assert "FAILED" in capsys.readouterr().out
