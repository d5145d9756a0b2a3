import csv
import json

import numpy as np
import pytest

from iap.cli import main
from iap.data import LabeledImage, read_image_ppm, synthetic_dataset, write_cifar10_binary, write_image_ppm
from iap.model import build_default_model, save_weights


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """An untrained model plus a small dataset labelled by that model's own predictions."""
    root = tmp_path_factory.mktemp("cli")
    model = build_default_model(10, seed=1)
    save_weights(model, root / "model.iapw")
    items = synthetic_dataset(24, 3)
    preds = model.predict(np.stack([it.image for it in items]))
    relabelled = [LabeledImage(it.image, int(p), it.id) for it, p in zip(items, preds)]
    data = root / "data"
    data.mkdir()
    write_cifar10_binary(relabelled[:12], data / "data_batch_1.bin")
    write_cifar10_binary(relabelled[12:], data / "test_batch.bin")
    return root


def run(*argv):
    return main([str(a) for a in argv])


def common(ws, out, *extra):
    return ["--dataset", ws / "data", "--model", ws / "model.iapw", "--out", out, *extra]


def test_train_is_deterministic(tmp_path, workspace, capsys):
    args = ["--dataset", workspace / "data", "--set", "epochs=1", "--set", "batch=4", "--seed", 3]
    assert run("train", *args, "--out", tmp_path / "a") == 0
    assert run("train", *args, "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "model.iapw").read_bytes() == (tmp_path / "b" / "model.iapw").read_bytes()
    log = list(csv.reader((tmp_path / "a" / "train_log.csv").open()))
    assert log[0] == ["epoch", "train_loss", "test_accuracy"] and len(log) == 2
    assert "final test accuracy" in capsys.readouterr().out


def test_missing_dataset_is_usage_error(tmp_path, capsys):
    assert run("train", "--dataset", tmp_path / "nope", "--out", tmp_path / "o") == 2
    assert "does not exist" in capsys.readouterr().err


def test_bad_flag_and_config_are_usage_errors(tmp_path, capsys, monkeypatch):
    with pytest.raises(SystemExit) as exc:
        run("attack", "--patch-shape", "hexagon")
    assert exc.value.code == 2
    assert run("attack", "--set", "bogus=1") == 2
    monkeypatch.setenv("IAP_LOG", "loud")
    assert run("attack") == 2


def test_missing_model_is_usage_error(tmp_path, workspace):
    assert run("attack", "--dataset", workspace / "data", "--out", tmp_path) == 2


def test_model_dataset_mismatch_exits_3(tmp_path, workspace):
    save_weights(build_default_model(3, seed=0), tmp_path / "m3.iapw")
    rc = run("attack", "--dataset", workspace / "data", "--model", tmp_path / "m3.iapw", "--out", tmp_path / "o")
    assert rc == 3
    bad = tmp_path / "bad.iapw"
    bad.write_bytes(b"nope")
    assert run("attack", "--dataset", workspace / "data", "--model", bad, "--out", tmp_path / "o") == 3


def test_attack_outputs_and_replay(tmp_path, workspace):
    argv = common(workspace, tmp_path / "a", "--set", "T=5", "--set", "reinit_limit=0", "--limit", 4)
    assert run("attack", *argv) == 0
    out = tmp_path / "a"
    records = sorted(out.glob("*.json"))
    assert len(records) == 4
    rec = json.loads(records[0].read_text())
    assert rec["region"]["w"] == 12 and rec["region"]["h"] == 12 and rec["method"] == "iap"
    assert rec["target"] == (rec["label"] + 1) % 10
    assert "s = 0.9" in (out / "config.txt").read_text()
    argv_b = common(workspace, tmp_path / "b", "--set", "T=5", "--set", "reinit_limit=0", "--limit", 4)
    assert run("attack", *argv_b) == 0
    for p in out.glob("*.adv.ppm"):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()
    for rec_path in records:
        rec = json.loads(rec_path.read_text())
        x = read_image_ppm(out / f"{rec['id']}.orig.ppm")
        adv = read_image_ppm(out / f"{rec['id']}.adv.ppm")
        i, j = rec["anchor"]
        outside = np.ones(x.shape[:2], bool)
        outside[i : i + 12, j : j + 12] = False
        assert np.array_equal(x[outside], adv[outside])


def test_attack_with_baselines_and_fixed_target(tmp_path, workspace):
    argv = common(workspace, tmp_path, "--set", "T=3", "--set", "mpgd_steps=3", "--set", "lavan_steps=3",
                  "--limit", 3, "--target", 4, "--baselines", "--patch-shape", "circle")
    assert run("attack", *argv) == 0
    for sub in ("mpgd", "lavan"):
        recs = [json.loads(p.read_text()) for p in (tmp_path / sub).glob("*.json")]
        assert recs and all(r["method"] == sub and r["target"] == 4 for r in recs)
    assert all(json.loads(p.read_text())["region"]["shape"] == "circle" for p in tmp_path.glob("*.json"))


def test_localize_writes_anchor_and_field(tmp_path, workspace):
    assert run("localize", *common(workspace, tmp_path, "--limit", 2, "--stride", 2), "--dump-maps") == 0
    rows = list(csv.DictReader((tmp_path / "localize.csv").open()))
    assert len(rows) == 2
    assert int(rows[0]["anchor_row"]) % 2 == 0 and int(rows[0]["anchor_col"]) % 2 == 0
    field = list(csv.DictReader((tmp_path / "fields" / f"{rows[0]['id']}.csv").open()))
    assert len(field) == 21 * 21
    on_grid = [f for f in field if int(f["row"]) % 2 == 0 and int(f["col"]) % 2 == 0]
    top = max(on_grid, key=lambda f: float(f["score"]))
    assert float(top["score"]) == float(rows[0]["score"])
    assert (tmp_path / "maps" / f"{rows[0]['id']}.cam.pgm").exists()


def _plant(directory, n_same, n_changed, success):
    rng = np.random.default_rng(0)
    directory.mkdir(parents=True, exist_ok=True)
    for k in range(n_same + n_changed):
        x = rng.uniform(0.1, 0.9, size=(32, 32, 3))
        adv = x.copy()
        if k >= n_same:
            adv[4:16, 4:16] = rng.uniform(size=(12, 12, 3))
        write_image_ppm(x, directory / f"img{k}.orig.ppm")
        write_image_ppm(adv, directory / f"img{k}.adv.ppm")
        rec = {"id": f"img{k}", "method": "iap", "label": 0, "target": 1, "predicted": 1 if success else 0,
               "success": success, "final_confidence": 0.95 if success else 0.1, "iterations_used": 3,
               "reinits_used": 0, "anchor": [4, 4], "region": {"w": 12, "h": 12, "shape": "rect", "area": 144}}
        (directory / f"img{k}.json").write_text(json.dumps(rec))


def test_eval_zero_successes(tmp_path, capsys):
    _plant(tmp_path / "att", 1, 1, False)
    assert run("eval", tmp_path / "att") == 0
    out = capsys.readouterr().out
    assert "ASR" in out and "0.0000" in out.split("ASR")[1].splitlines()[0]


def test_eval_identity_rows_and_recomputed_means(tmp_path, capsys):
    _plant(tmp_path / "att", 2, 2, True)
    assert run("eval", tmp_path / "att", "--out", tmp_path / "rep") == 0
    rows = list(csv.DictReader((tmp_path / "rep" / "report.csv").open()))
    by_id = {r["id"]: r for r in rows}
    assert float(by_id["img0"]["ssim_local"]) == 1.0 and float(by_id["img1"]["ssim_local"]) == 1.0
    assert float(by_id["img2"]["ssim_local"]) < 0.5
    report = json.loads((tmp_path / "rep" / "report.json").read_text())
    for key in ("ssim_local", "uiq_global", "sre_local"):
        vals = [float(r[key]) for r in rows]
        assert abs(report["aggregates"][key]["mean"] - sum(vals) / len(vals)) < 1e-9
    printed = {line.split()[0]: line.split()[1] for line in capsys.readouterr().out.splitlines()[1:]}
    assert abs(float(printed["ssim_local"]) - report["aggregates"]["ssim_local"]["mean"]) < 5e-5
    assert printed["NoPatchLoc"] == "n/a"
    heat = list(csv.DictReader((tmp_path / "rep" / "heatmap.csv").open()))
    assert len(heat) == 1024 and sum(int(h["anchor_count"]) for h in heat) == 4


def test_eval_missing_outcomes(tmp_path):
    (tmp_path / "empty").mkdir()
    assert run("eval", tmp_path / "empty") == 3
    assert run("eval", tmp_path / "absent") == 2
    _plant(tmp_path / "broken", 0, 1, True)
    (tmp_path / "broken" / "img0.adv.ppm").unlink()
    assert run("eval", tmp_path / "broken") == 3


def test_eval_uses_model_from_attack_config(tmp_path, workspace, capsys):
    argv = common(workspace, tmp_path / "a", "--set", "T=2", "--set", "reinit_limit=0", "--limit", 2,
                  "--set", "s=0.0001")
    assert run("attack", *argv) == 0
    capsys.readouterr()
    assert run("eval", tmp_path / "a") == 0
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["asr"] is not None
    if report["asr"] > 0:
        assert report["no_patch_loc"] is not None


def test_ablate_w3_sweep(tmp_path, workspace, capsys):
    argv = common(workspace, tmp_path, "--axis", "w3", "--values", "0,7", "--set", "T=2", "--set", "reinit_limit=0",
                  "--limit", 2)
    assert run("ablate", *argv) == 0
    rows = list(csv.DictReader((tmp_path / "sweep.csv").open()))
    assert [float(r["value"]) for r in rows] == [0.0, 7.0]
    assert json.loads((tmp_path / "sweep.json").read_text())["axis"] == "w3"
    assert run("ablate", *common(workspace, tmp_path, "--axis", "w3", "--values", "a,b")) == 2


def test_gen_data(tmp_path):
    assert run("gen-data", "--out", tmp_path, "--set", "n_train=5", "--set", "n_test=3") == 0
    assert (tmp_path / "data_batch_1.bin").stat().st_size == 5 * 3073
    assert (tmp_path / "test_batch.bin").stat().st_size == 3 * 3073
