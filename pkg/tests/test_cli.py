"""Command-line surface: exit codes, determinism, file outputs and the end-to-end toy pipeline."""

import csv
import io
import json
import os

import numpy as np
import pytest
from PIL import Image

from danet.cli import EXIT_FAILED, EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from danet.config import PRESETS, format_config, preset
from danet.imaging import encode_raw, read_image
from danet.metrics import pck
from danet.records import load_annotations

from conftest import TOY_SAMPLES


def run(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], out=out)
    return code, out.getvalue()


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def no_temp_files(directory):
    return not [p for p in os.listdir(directory) if p.startswith(".")]


# -- usage ------------------------------------------------------------------------------------

def test_no_command_is_usage_error():
    assert run()[0] == EXIT_USAGE


def test_unknown_command_and_flag_rejected(capsys):
    assert run("train")[0] == EXIT_USAGE
    assert run("summary", "--preset", "tiny", "--bogus")[0] == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err


def test_invalid_preset_lists_presets(capsys):
    code, _ = run("summary", "--preset", "danet50")
    err = capsys.readouterr().err
    assert code == EXIT_USAGE and all(name in err for name in PRESETS)


def test_summary_needs_a_model(capsys):
    assert run("summary")[0] == EXIT_USAGE
    assert "usage: danet summary" in capsys.readouterr().err


def test_help_exits_zero():
    assert run("--help")[0] == EXIT_OK


# -- summary ------------------------------------------------------------------------------------

def summary_total(tmp_path, name):
    out = tmp_path / f"{name}.csv"
    code, text = run("summary", "--preset", name, "--out", out)
    assert code == EXIT_OK and "FLOPs convention: mac" in text
    rows = read_csv(out)
    assert rows[0] == ["module", "params", "flops"] and rows[-1][0] == "total"
    assert sum(int(r[1]) for r in rows[1:-1]) == int(rows[-1][1])
    return int(rows[-1][1]), int(rows[-1][2])


def test_summary_danet72(tmp_path):
    params, flops = summary_total(tmp_path, "danet72")
    assert abs(params / 1e6 - 3.4) <= 0.34 and abs(flops / 1e9 - 1.0) <= 0.25


def test_summary_baseline2_exceeds_baseline1(tmp_path):
    b1, _ = summary_total(tmp_path, "baseline1")
    b2, _ = summary_total(tmp_path, "baseline2")
    assert b2 > b1 and abs(b2 / 1e6 - 4.5) <= 0.45


def test_summary_from_config_file(tmp_path):
    cfg = tmp_path / "net.cfg"
    cfg.write_text(format_config(preset("tiny")))
    assert run("summary", "--config", cfg)[0] == EXIT_OK


def test_bad_config_reports_line(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[stem]\nchannels = 16\nwidth = 3\n")
    code, _ = run("summary", "--config", cfg)
    assert code == EXIT_INPUT and "line 3" in capsys.readouterr().err


# -- train-toy ------------------------------------------------------------------------------------

def test_train_toy_deterministic(tmp_path):
    args = ["train-toy", "--preset", "tiny", "--samples", 2, "--batch-size", 2, "--iters", 3, "--seed", 7]
    assert run(*args, "--out", tmp_path / "a")[0] == EXIT_OK
    assert run(*args, "--out", tmp_path / "b")[0] == EXIT_OK
    for name in ("weights.danw", "loss.csv", "config.txt", "samples/annotations.json", "samples/sample_001.raw"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    assert read_csv(tmp_path / "a" / "loss.csv")[0] == ["iter", "lr", "loss"]
    assert no_temp_files(tmp_path / "a") and no_temp_files(tmp_path / "a" / "samples")


def test_train_toy_nan_is_numerical_failure(tmp_path, capsys):
    with np.errstate(all="ignore"):
        code, _ = run("train-toy", "--preset", "tiny", "--samples", 2, "--batch-size", 2, "--iters", 5,
                      "--lr", 1e30, "--out", tmp_path)
    assert code == EXIT_NUMERIC and "iteration" in capsys.readouterr().err


def test_train_toy_needs_out():
    assert run("train-toy", "--preset", "tiny", "--iters", 1)[0] == EXIT_USAGE


# -- infer ------------------------------------------------------------------------------------------

def infer_records(toy_run, index, *extra, out=None):
    args = ["infer", "--preset", "tiny", "--weights", toy_run.weights, "--image",
            toy_run.out / "samples" / f"sample_{index:03d}.raw", "--ann-id", index, "--image-id", index, *extra]
    if out is not None:
        args += ["--out", out]
    code, text = run(*args)
    assert code == EXIT_OK
    text = out.read_text() if out is not None else text
    return [json.loads(line) for line in text.splitlines()]


def test_infer_recovers_toy_keypoints(toy_run):
    anns = {a.id: a for a in load_annotations(toy_run.out / "samples" / "annotations.json")}
    ok = total = 0
    for i in range(TOY_SAMPLES):
        rec = infer_records(toy_run, i)[0]
        gt = anns[i].keypoints
        vis = gt[:, 2] > 0
        hit = pck(np.array(rec["keypoints"])[None, :, :2], gt[None, :, :2], vis[None], np.array([anns[i].head_size]))
        ok += int(hit.sum())
        total += int(vis.sum())
    assert ok / total >= 0.95, ok / total


def test_infer_schema_with_and_without_flip(toy_run):
    plain = infer_records(toy_run, 0)[0]
    flipped = infer_records(toy_run, 0, "--flip")[0]
    assert list(plain) == list(flipped) == ["image_id", "id", "box", "score", "keypoints"]
    assert len(plain["keypoints"]) == len(flipped["keypoints"]) == 17
    assert plain["keypoints"] != flipped["keypoints"]


def test_infer_deterministic_and_atomic(toy_run, tmp_path):
    a = infer_records(toy_run, 3, "--flip", out=tmp_path / "a.jsonl")
    b = infer_records(toy_run, 3, "--flip", out=tmp_path / "b.jsonl")
    assert a == b and (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert no_temp_files(tmp_path)


def test_infer_clamps_box_with_warning(toy_run, capsys):
    recs = infer_records(toy_run, 1, "--box=-20,-10,140,160")
    assert recs[0]["box"] == [0.0, 0.0, 96.0, 128.0]
    assert "clamped" in capsys.readouterr().err


def test_infer_multiple_boxes(toy_run):
    args = ["infer", "--preset", "tiny", "--weights", toy_run.weights, "--image",
            toy_run.out / "samples" / "sample_000.raw", "--box", "0,0,96,128", "--box", "10,10,40,60"]
    code, text = run(*args)
    assert code == EXIT_OK and len(text.splitlines()) == 2
    assert run(*args, "--ann-id", 1)[0] == EXIT_USAGE


def test_infer_unreadable_image(tmp_path, toy_run, capsys):
    bad = tmp_path / "bad.raw"
    bad.write_bytes(b"not an image")
    code, _ = run("infer", "--preset", "tiny", "--weights", toy_run.weights, "--image", bad)
    assert code == EXIT_INPUT
    code, _ = run("infer", "--preset", "tiny", "--weights", toy_run.weights, "--image", tmp_path / "missing.png")
    assert code == EXIT_INPUT


def test_infer_png_input(tmp_path, toy_run):
    raw = toy_run.out / "samples" / "sample_002.raw"
    Image.fromarray(read_image(raw)).save(tmp_path / "s.png")
    code, text = run("infer", "--preset", "tiny", "--weights", toy_run.weights, "--image", tmp_path / "s.png")
    assert code == EXIT_OK
    code2, text2 = run("infer", "--preset", "tiny", "--weights", toy_run.weights, "--image", raw)
    assert text == text2


def test_infer_wrong_weights_for_config(toy_run, capsys):
    code, _ = run("infer", "--preset", "danet72", "--weights", toy_run.weights, "--image",
                  toy_run.out / "samples" / "sample_000.raw")
    assert code == EXIT_INPUT and "stem" in capsys.readouterr().err


# -- eval -------------------------------------------------------------------------------------------

def write_ann(path, anns):
    doc = {"images": [{"id": a["image_id"], "width": 640, "height": 480} for a in anns], "annotations": anns}
    path.write_text(json.dumps(doc))


def ann_dict(i, xy, area=6400.0, head=10.0, image_id=None):
    kp = [v for x, y in xy for v in (float(x), float(y), 2)]
    return {"id": i, "image_id": i if image_id is None else image_id, "bbox": [0, 0, 80, 80], "area": area,
            "keypoints": kp, "num_keypoints": len(xy), "head_size": head, "extra": "ignored"}


def pred_line(i, xy, score=1.0, image_id=None):
    return json.dumps({"image_id": i if image_id is None else image_id, "id": i, "box": None, "score": score,
                       "keypoints": [[float(x), float(y), 1.0] for x, y in xy]})


@pytest.fixture
def eval_files(tmp_path):
    g = np.random.default_rng(0)
    xys = [g.uniform(100, 300, (17, 2)) for _ in range(3)]
    ann = tmp_path / "ann.json"
    write_ann(ann, [ann_dict(i, xy) for i, xy in enumerate(xys)])
    return tmp_path, ann, xys


def test_eval_perfect_predictions(eval_files):
    tmp, ann, xys = eval_files
    pred = tmp / "pred.jsonl"
    pred.write_text("".join(pred_line(i, xy) + "\n" for i, xy in enumerate(xys)))
    code, text = run("eval", "--pred", pred, "--ann", ann, "--out", tmp / "coco.csv")
    assert code == EXIT_OK and text.startswith("AP 100.0")
    rows = read_csv(tmp / "coco.csv")
    assert rows[0] == ["AP", "AP50", "AP75", "APM", "APL", "AR"] and float(rows[1][0]) == 1.0
    code, text = run("eval", "--mode", "mpii", "--pred", pred, "--ann", ann)
    assert code == EXIT_OK and text.strip() == "Mean 100.0"


def test_eval_empty_predictions(eval_files):
    tmp, ann, _ = eval_files
    (tmp / "empty.jsonl").write_text("")
    code, text = run("eval", "--pred", tmp / "empty.jsonl", "--ann", ann)
    assert code == EXIT_OK and text.startswith("AP 0.0")


def test_eval_three_instance_fixture_matches_oracle(eval_files):
    from danet.records import load_predictions
    from oracles import coco_ap_oracle

    tmp, ann, xys = eval_files
    pred = tmp / "pred.jsonl"
    lines = [pred_line(0, xys[0] + 0.5, 0.9, 0), pred_line(1, xys[1] + 6.0, 0.4, 0), pred_line(2, xys[0] + 300, 0.7, 0)]
    pred.write_text("\n".join(lines) + "\n")
    anns = [dict(ann_dict(i, xy), image_id=0) for i, xy in enumerate(xys)]
    write_ann(ann, anns)
    code, _ = run("eval", "--pred", pred, "--ann", ann, "--out", tmp / "r.csv")
    assert code == EXIT_OK
    ap, ar = coco_ap_oracle([p for p, _ in load_predictions(pred)], load_annotations(ann))
    row = dict(zip(*read_csv(tmp / "r.csv")))
    assert float(row["AP"]) == pytest.approx(ap, abs=1e-12) and float(row["AR"]) == pytest.approx(ar, abs=1e-12)


def test_eval_schema_violation_names_record(eval_files, capsys):
    tmp, ann, xys = eval_files
    pred = tmp / "pred.jsonl"
    pred.write_text(pred_line(0, xys[0]) + "\n" + json.dumps({"image_id": 1, "keypoints": [[1, 2]]}) + "\n")
    code, _ = run("eval", "--pred", pred, "--ann", ann)
    assert code == EXIT_INPUT and "prediction record 1" in capsys.readouterr().err
    bad = tmp / "bad.json"
    bad.write_text(json.dumps({"annotations": [ann_dict(0, xys[0]), {"id": 1, "image_id": 1}]}))
    code, _ = run("eval", "--pred", pred, "--ann", bad)
    assert code == EXIT_INPUT and "annotation record 1" in capsys.readouterr().err


def test_eval_mpii_missing_prediction_is_a_miss(eval_files):
    tmp, ann, xys = eval_files
    pred = tmp / "pred.jsonl"
    pred.write_text(pred_line(0, xys[0]) + "\n" + pred_line(2, xys[2]) + "\n")
    code, text = run("eval", "--mode", "mpii", "--pred", pred, "--ann", ann)
    assert code == EXIT_OK and text.strip() == "Mean 66.7"


# -- bench and analyze-weights -----------------------------------------------------------------------------

def test_bench_writes_report(tmp_path, monkeypatch):
    monkeypatch.setenv("DANET_THREADS", "2")
    code, text = run("bench", "--preset", "tiny", "--input-size", "64x48", "--persons", 2, "--warmup", 0,
                     "--out", tmp_path / "b.csv")
    rows = read_csv(tmp_path / "b.csv")
    assert code == EXIT_OK and "PPS" in text and dict(zip(*rows))["threads"] == "2"


def test_bench_bad_thread_env(monkeypatch):
    monkeypatch.setenv("DANET_THREADS", "many")
    assert run("bench", "--preset", "tiny", "--persons", 1)[0] == EXIT_USAGE
    assert run("bench", "--preset", "tiny", "--persons", 1, "--batch-size", 2, "--threads", 1)[0] == EXIT_USAGE


def test_analyze_weights_outputs_deterministic(tmp_path, toy_run):
    for name in ("a", "b"):
        code, _ = run("analyze-weights", "--preset", "tiny", "--weights", toy_run.weights, "--out", tmp_path / name)
        assert code == EXIT_OK
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == [f"stage{i}_connectivity.{e}" for i in range(1, 5) for e in ("csv", "svg")]
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


# -- selftest ---------------------------------------------------------------------------------------------

def test_selftest_passes_and_is_deterministic():
    code, first = run("selftest", "--seed", 3)
    assert code == EXIT_OK and "FAIL" not in first
    assert run("selftest", "--seed", 3)[1] == first


def test_selftest_reports_corrupt_weights(tmp_path, toy_run):
    data = bytearray(toy_run.weights.read_bytes())
    bad = tmp_path / "bad.danw"
    bad.write_bytes(bytes(data[: len(data) - 100]))
    code, text = run("selftest", "--preset", "tiny", "--weights", bad)
    fails = [line for line in text.splitlines() if line.startswith("FAIL")]
    assert code == EXIT_FAILED and len(fails) == 1 and fails[0].startswith("FAIL weights: load bad.danw")


def test_selftest_loads_good_weights(toy_run):
    code, text = run("selftest", "--preset", "tiny", "--weights", toy_run.weights)
    assert code == EXIT_OK and "PASS weights: load weights.danw as tiny" in text


def test_raw_image_header_checked(tmp_path, toy_run):
    img = np.zeros((4, 4, 3), np.uint8)
    payload = encode_raw(img)
    (tmp_path / "short.raw").write_bytes(payload[:-1])
    code, _ = run("infer", "--preset", "tiny", "--weights", toy_run.weights, "--image", tmp_path / "short.raw")
    assert code == EXIT_INPUT
