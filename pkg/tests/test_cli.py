import csv
import json

import numpy as np
import pytest

from splatmark.cli import main
from splatmark.evaluation import comparable
from splatmark.scene import load_scene


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out.strip().splitlines()
    return code, (json.loads(out[-1]) if out and code == 0 else None)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--seed", "7", "--n-gaussians", "60", "--n-views", "2", "--out", str(d / "s.json")]) == 0
    assert main(["fgd", "--scene", str(d / "s.json"), "--out", str(d / "f.json")]) == 0
    assert main(["embed", "--scene", str(d / "f.json"), "--out", str(d / "w.json"), "--epochs", "1",
                 "--figure", str(d / "train.png")]) == 0
    return d


def test_pipeline_outputs(pipeline):
    for name in ("s.json", "f.json", "f_fgd.json", "w.json", "w_log.jsonl", "w_watermark.json", "train.png"):
        assert (pipeline / name).exists(), name
    log_lines = (pipeline / "w_log.jsonl").read_text().splitlines()
    assert len(log_lines) == 1 and "bit_accuracy" in json.loads(log_lines[0])


def test_extract_matches_report(pipeline, capsys):
    d = pipeline
    code, extracted = run(capsys, "extract", "--watermark", d / "w_watermark.json", "--scene", d / "w.json")
    assert code == 0
    code, _ = run(capsys, "evaluate", "--scene", d / "w.json", "--watermark", d / "w_watermark.json",
                  "--out", d / "r.json", "--figure", d / "r.png")
    assert code == 0
    report = json.loads((d / "r.json").read_text())
    assert extracted["bit_accuracy"] == report["bit_accuracy"]
    assert [r["name"] for r in report["rows"]][0] == "none" and len(report["rows"]) == 12
    assert report["codec"]["pillow"] and report["resize_policy"]
    assert (d / "r.png").stat().st_size > 0


def test_evaluate_is_reproducible(pipeline, capsys):
    d = pipeline
    for name in ("a.json", "b.json"):
        assert run(capsys, "evaluate", "--scene", d / "w.json", "--watermark", d / "w_watermark.json",
                   "--out", d / name)[0] == 0
    assert comparable(d / "a.json") == comparable(d / "b.json")


def test_extract_from_png(pipeline, capsys):
    d = pipeline
    assert run(capsys, "render", "--scene", d / "w.json", "--out-dir", d / "png", "--view", "0")[0] == 0
    _, from_png = run(capsys, "extract", "--watermark", d / "w_watermark.json", "--image", d / "png" / "view_000.png")
    _, from_scene = run(capsys, "extract", "--watermark", d / "w_watermark.json", "--scene", d / "w.json",
                        "--view", "0")
    assert from_png["views"][0]["bits"] == from_scene["views"][0]["bits"]


def test_extract_unembedded_is_near_chance(pipeline, capsys):
    d = pipeline
    accs = []
    for seed in range(6):
        (d / "k.json").write_text(json.dumps({"seed": 900 + seed, "n_bits": 32, "G": 16, "reject": 4,
                                              "ll2_shape": [16, 16], "domain": "ll2"}))
        _, out = run(capsys, "extract", "--watermark", d / "k.json", "--scene", d / "s.json")
        accs.append(out["bit_accuracy"])
    assert 0.35 <= np.mean(accs) <= 0.65


def test_sweep_writes_csv_and_figure(pipeline, capsys):
    d = pipeline
    code, _ = run(capsys, "sweep", "--scene", d / "w.json", "--watermark", d / "w_watermark.json",
                  "--attack", '{"type": "JpegCompress", "quality": 90}', "--strengths", "90", "50", "10",
                  "--out", d / "sw.csv", "--figure", d / "sw.png")
    assert code == 0
    rows = list(csv.DictReader(open(d / "sw.csv")))
    assert [float(r["strength"]) for r in rows] == [90, 50, 10]
    assert (d / "sw.png").exists()


def test_attack_commands(pipeline, capsys):
    d = pipeline
    (d / "rm.json").write_text('{"type": "ModelRemove", "fraction": 0.5, "seed": 2}')
    code, out = run(capsys, "attack", "--spec", d / "rm.json", "--scene", d / "w.json", "--out", d / "rm_scene.json")
    assert code == 0 and out["n_after"] == out["n_before"] - out["n_before"] // 2
    assert len(load_scene(d / "rm_scene.json")[0]) == out["n_after"]
    code, _ = run(capsys, "attack", "--spec", '{"type": "Crop", "keep_area_fraction": 0.25}',
                  "--image", d / "png" / "view_000.png", "--out", d / "crop.png")
    assert code == 0 and (d / "crop.png").exists()


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_gaussians": 5, "n-views": 1, "resolution": [16, 16], "seed": 3}))
    code, out = run(capsys, "synth", "--config", cfg, "--n-gaussians", "7", "--out", tmp_path / "s.json")
    assert code == 0 and out["n_gaussians"] == 7 and out["n_views"] == 1


def test_exit_codes(tmp_path, capsys):
    assert main(["synth", "--bogus"]) == 1
    assert main(["synth"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"colour": 1}))
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "x.json")]) == 1
    assert main(["extract", "--watermark", str(tmp_path / "missing.json"), "--scene", "x"]) == 1
    assert main(["synth", "--n-gaussians", "6", "--n-views", "1", "--resolution", "16", "16",
                 "--out", str(tmp_path / "s.json")]) == 0
    blow = tmp_path / "blow.json"
    lr = {k: 1e300 for k in ("positions", "colors", "opacity_logits", "log_scales", "rotations")}
    blow.write_text(json.dumps({"finetune": {"lr": lr, "epochs": 1, "grid": 4, "reject": 1}}))
    assert main(["embed", "--config", str(blow), "--scene", str(tmp_path / "s.json"),
                 "--out", str(tmp_path / "w.json")]) == 2
    capsys.readouterr()
