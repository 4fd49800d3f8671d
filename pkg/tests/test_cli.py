"""Harness end to end: synth -> train -> infer -> eval -> export-slices."""

import json

import numpy as np
import pytest

from vgan.cli import main
from vgan.volume_io import load_volume

TINY_CFG = {
    "seed": 0, "lr": 1e-3, "batch_size": 1, "epochs": 1, "max_steps": 2,
    "adv_weight": 1.0, "flip_p": 0.0, "patch_extents": [16, 16, 16],
    "num_down": 3, "embed_dim": 64, "num_heads": 4,
    "num_transformer_layers": 1, "base_channels": 16,
    "disc_base_channels": 8, "disc_blocks": 4, "checkpoint_every": 100,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One synth+train pipeline shared by the downstream command tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(TINY_CFG))
    data = root / "data"
    rc = main(["synth", "--count", "2", "--seed", "0",
               "--extents", "16,16,16", "--grade-ratio", "1:1",
               "--out", str(data)])
    assert rc == 0
    run = root / "run"
    rc = main(["train", "--config", str(cfg_path),
               "--data", str(data / "manifest.json"),
               "--out", str(run), "--normalize-timestamps"])
    assert rc == 0
    return root


def test_synth_writes_dataset(workspace):
    data = workspace / "data"
    entries = json.loads((data / "manifest.json").read_text())
    assert len(entries) == 2
    assert {e["grade"] for e in entries} == {"HGG", "LGG"}
    for e in entries:
        assert (data / e["image"]).exists()
        assert (data / e["labels"]).exists()


def test_synth_is_deterministic(tmp_path):
    for d in ("a", "b"):
        rc = main(["synth", "--count", "1", "--seed", "3",
                   "--extents", "16,16,16", "--out", str(tmp_path / d)])
        assert rc == 0
    a, b = tmp_path / "a", tmp_path / "b"
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n


def test_train_run_layout(workspace):
    run = workspace / "run"
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["started"] == "1970-01-01T00:00:00Z"
    assert manifest["finished"] == "1970-01-01T00:00:00Z"
    assert manifest["seed"] == 0
    assert manifest["checkpoints"] == [["gen_ep0001.vgan", "disc_ep0001.vgan"]]
    lines = (run / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("# lr=")
    assert lines[1] == "step, loss_G, loss_D, bce, dice, msL1"
    assert len(lines) == 4  # max_steps 2


def test_train_reruns_identically(workspace, tmp_path):
    rc = main(["train", "--config", str(workspace / "cfg.json"),
               "--data", str(workspace / "data" / "manifest.json"),
               "--out", str(tmp_path / "again"), "--normalize-timestamps"])
    assert rc == 0
    assert ((tmp_path / "again" / "metrics.csv").read_bytes()
            == (workspace / "run" / "metrics.csv").read_bytes())
    assert ((tmp_path / "again" / "manifest.json").read_bytes()
            == (workspace / "run" / "manifest.json").read_bytes())


def test_seed_env_override(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("VGAN_SEED", "7")
    rc = main(["train", "--config", str(workspace / "cfg.json"),
               "--data", str(workspace / "data" / "manifest.json"),
               "--out", str(tmp_path / "envrun"), "--normalize-timestamps"])
    assert rc == 0
    manifest = json.loads((tmp_path / "envrun" / "manifest.json").read_text())
    assert manifest["seed"] == 7

    monkeypatch.setenv("VGAN_SEED", "not-a-number")
    rc = main(["train", "--config", str(workspace / "cfg.json"),
               "--data", str(workspace / "data" / "manifest.json"),
               "--out", str(tmp_path / "envrun2")])
    assert rc == 2


def test_infer_names_and_contents(workspace, tmp_path):
    preds = tmp_path / "preds"
    vol = workspace / "data" / "hgg-00000000_img.vvol"
    rc = main(["infer", "--config", str(workspace / "cfg.json"),
               "--checkpoint", str(workspace / "run" / "gen_ep0001.vgan"),
               "--out", str(preds), "--slices", str(vol)])
    assert rc == 0
    out = preds / "hgg-00000000_pred.vvol"
    assert out.exists()
    labels = load_volume(out)
    assert labels.shape == (1, 16, 16, 16)
    assert labels.dtype == np.uint8
    assert set(np.unique(labels)) <= {0, 1, 2, 4}
    assert list(preds.glob("hgg-00000000_pred_ax*.ppm"))


def test_infer_rejects_mismatched_volume(workspace, tmp_path):
    bad_cfg = dict(TINY_CFG, patch_extents=[32, 32, 32], num_down=3)
    cfg_path = tmp_path / "bad.json"
    cfg_path.write_text(json.dumps(bad_cfg))
    rc = main(["infer", "--config", str(cfg_path),
               "--checkpoint", str(workspace / "run" / "gen_ep0001.vgan"),
               "--out", str(tmp_path / "p"),
               str(workspace / "data" / "hgg-00000000_img.vvol")])
    assert rc == 1  # checkpoint scalars cannot match the bigger config


def test_eval_scores_predictions(workspace, tmp_path, capsys):
    preds = tmp_path / "preds"
    gt = tmp_path / "gt"
    gt.mkdir()
    vol = workspace / "data" / "hgg-00000000_img.vvol"
    main(["infer", "--config", str(workspace / "cfg.json"),
          "--checkpoint", str(workspace / "run" / "gen_ep0001.vgan"),
          "--out", str(preds), str(vol)])
    # eval pairs volumes by filename across the two directories
    lbl = (workspace / "data" / "hgg-00000000_lbl.vvol").read_bytes()
    (gt / "hgg-00000000_pred.vvol").write_bytes(lbl)
    scores = tmp_path / "scores.csv"
    rc = main(["eval", "--pred", str(preds), "--gt", str(gt),
               "--out", str(scores)])
    assert rc == 0
    lines = scores.read_text().splitlines()
    assert lines[0] == "case_id, region, dice, ppv, sensitivity, tp, fp, fn"
    regions = [ln.split(", ")[1] for ln in lines[1:4]]
    assert regions == ["WT", "TC", "ET"]
    assert sum(1 for ln in lines if ln.startswith("mean, ")) == 3


def test_eval_requires_shared_names(workspace, tmp_path):
    empty = tmp_path / "none"
    empty.mkdir()
    rc = main(["eval", "--pred", str(empty), "--gt", str(empty)])
    assert rc == 2


def test_export_slices_command(workspace, tmp_path):
    out = tmp_path / "slices"
    lbl = workspace / "data" / "hgg-00000000_lbl.vvol"
    rc = main(["export-slices", str(lbl), "--axis", "1",
               "--indices", "2,5", "--out", str(out)])
    assert rc == 0
    written = sorted(p.name for p in out.iterdir())
    assert written == ["hgg-00000000_lbl_ax1_0002.ppm",
                       "hgg-00000000_lbl_ax1_0005.ppm"]
    rc = main(["export-slices", str(lbl), "--indices", "99",
               "--out", str(out)])
    assert rc == 1


def test_gradcheck_command_single_op(capsys):
    rc = main(["gradcheck", "sigmoid"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "sigmoid" in out
    assert "1/1 ops passed" in out


def test_gradcheck_unknown_op_is_usage_error():
    assert main(["gradcheck", "nonsense_op"]) == 2


def test_print_defaults_is_valid_json(capsys):
    rc = main(["train", "--print-defaults"])
    assert rc == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["lr"] == 1e-4


def test_usage_errors_map_to_exit_two(tmp_path):
    assert main(["train", "--data", "whatever"]) == 2  # no config
    assert main(["train", "--config", str(tmp_path / "missing.json"),
                 "--data", "x"]) == 2
    assert main(["synth", "--count", "1", "--extents", "16,16",
                 "--out", str(tmp_path / "d")]) == 2
    assert main(["synth", "--count", "1", "--extents", "16,16,16",
                 "--grade-ratio", "fish", "--out", str(tmp_path / "d")]) == 2


def test_runtime_errors_map_to_exit_one(workspace, tmp_path):
    # nonexistent checkpoint file -> OSError -> 1
    rc = main(["infer", "--config", str(workspace / "cfg.json"),
               "--checkpoint", str(tmp_path / "ghost.vgan"),
               "--out", str(tmp_path / "p"),
               str(workspace / "data" / "hgg-00000000_img.vvol")])
    assert rc == 1
    # corrupt volume -> format error -> 1
    broken = tmp_path / "broken.vvol"
    broken.write_bytes(b"JUNKJUNKJUNK")
    rc = main(["export-slices", str(broken), "--out", str(tmp_path / "s")])
    assert rc == 1
