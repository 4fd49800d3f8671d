"""Alternating-update loop: isolation, determinism, persistence, divergence."""

import numpy as np
import pytest

from vgan import training
from vgan.checkpoint import CheckpointError
from vgan.data import synth_phantom
from vgan.engine import ConfigError
from vgan.losses import LossReport
from vgan.training import (
    TrainConfig,
    TrainingDiverged,
    build_models,
    discriminator_step,
    generator_step,
    load_discriminator,
    load_generator,
    make_batch,
    train_loop,
)


def tiny_config(**overrides):
    base = dict(
        seed=0, lr=1e-3, batch_size=1, epochs=2, max_steps=0, adv_weight=1.0,
        flip_p=0.0, patch_extents=(16, 16, 16), num_down=3, embed_dim=64,
        num_heads=4, num_transformer_layers=1, base_channels=16,
        disc_base_channels=8, disc_blocks=4, checkpoint_every=100,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def phantoms():
    return [synth_phantom(i, (16, 16, 16)) for i in range(2)]


def test_config_dict_roundtrip_and_unknown_keys():
    cfg = tiny_config()
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_dict({"learning_rate": 1e-3})


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(lr=0.0)
    with pytest.raises(ConfigError):
        tiny_config(ds_weights=(1.0, 0.0, 0.0))
    with pytest.raises(ConfigError):
        tiny_config(dtype="float16")
    with pytest.raises(ConfigError):
        tiny_config(threshold=1.0)
    # normalization happens on construction
    assert sum(tiny_config().ds_weights) == pytest.approx(1.0)


def test_build_models_is_deterministic():
    a = build_models(tiny_config())
    b = build_models(tiny_config())
    for name in a.g_params:
        assert np.array_equal(a.g_params[name].data, b.g_params[name].data)
    for name in a.d_params:
        assert np.array_equal(a.d_params[name].data, b.d_params[name].data)


def test_make_batch_crops_to_patch(phantoms):
    cfg = tiny_config()
    big = [synth_phantom(7, (24, 24, 24))]
    rng = np.random.default_rng(0)
    x, gt = make_batch(big, cfg, rng, np.float32)
    assert x.shape == (1, 4, 16, 16, 16)
    assert gt.shape == (1, 3, 16, 16, 16)
    assert x.dtype == np.float32
    assert set(np.unique(gt)) <= {0.0, 1.0}


def test_generator_step_leaves_critic_untouched(phantoms):
    cfg = tiny_config()
    models = build_models(cfg)
    batch = make_batch(phantoms[:1], cfg, np.random.default_rng(0), np.float32)
    d_before = {n: p.data.copy() for n, p in models.d_params.items()}
    g_before = {n: p.data.copy() for n, p in models.g_params.items()}
    parts = generator_step(batch, models, cfg)
    assert set(parts) == {"bce", "dice", "ds", "adv", "loss_G"}
    for n, p in models.d_params.items():
        assert np.array_equal(p.data, d_before[n]), n
        assert p.requires_grad  # freeze must be undone
    moved = [n for n, p in models.g_params.items()
             if not np.array_equal(p.data, g_before[n])]
    assert moved, "generator never updated"


def test_discriminator_step_leaves_generator_untouched(phantoms):
    cfg = tiny_config()
    models = build_models(cfg)
    batch = make_batch(phantoms[:1], cfg, np.random.default_rng(0), np.float32)
    g_before = {n: p.data.copy() for n, p in models.g_params.items()}
    d_before = {n: p.data.copy() for n, p in models.d_params.items()}
    parts = discriminator_step(batch, models, cfg)
    assert np.isfinite(parts["loss_D"])
    for n, p in models.g_params.items():
        assert np.array_equal(p.data, g_before[n]), n
        assert p.grad is None, f"gradient leaked into generator {n}"
    moved = [n for n, p in models.d_params.items()
             if not np.array_equal(p.data, d_before[n])]
    assert moved, "critic never updated"
    assert models.adam_d.t == 1
    assert models.adam_g.t == 0


def test_train_loop_writes_metrics_and_checkpoints(tmp_path, phantoms):
    cfg = tiny_config(epochs=2)
    res = train_loop(phantoms, cfg, tmp_path)
    assert res.steps == 4  # 2 epochs x 2 samples at batch 1
    lines = res.metrics_path.read_text().splitlines()
    assert lines[0] == "# lr=0.001"
    assert lines[1] == LossReport.CSV_HEADER
    assert len(lines) == 2 + res.steps
    assert lines[2].startswith("1, ")
    # checkpoint cadence 100 never fires mid-run; the final epoch still saves
    assert len(res.checkpoints) == 1
    g_path, d_path = res.checkpoints[0]
    assert g_path.name == "gen_ep0002.vgan"
    assert d_path.name == "disc_ep0002.vgan"
    assert (tmp_path / "adam_g.vgst").exists()
    assert (tmp_path / "adam_d.vgst").exists()


def test_train_loop_is_deterministic(tmp_path, phantoms):
    cfg = tiny_config(epochs=1)
    a = train_loop(phantoms, cfg, tmp_path / "a")
    b = train_loop(phantoms, cfg, tmp_path / "b")
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    assert (a.checkpoints[-1][0].read_bytes()
            == b.checkpoints[-1][0].read_bytes())


def test_checkpoints_roundtrip_through_loaders(tmp_path, phantoms):
    cfg = tiny_config(epochs=1)
    res = train_loop(phantoms, cfg, tmp_path)
    g_path, d_path = res.checkpoints[-1]

    # the trained generator comes back bitwise (weights are stored f32)
    params = load_generator(g_path, cfg.generator_config())
    assert len(params) > 0
    with pytest.raises(CheckpointError, match="scalars"):
        load_generator(g_path, tiny_config(base_channels=32).generator_config())

    d_params, d_states = load_discriminator(d_path, cfg.discriminator_config())
    assert len(d_states) == cfg.disc_blocks
    # running stats were updated away from the init during training
    assert any(np.any(s.mean != 0) for s in d_states)


def test_empty_dataset_rejected(tmp_path):
    with pytest.raises(ConfigError, match="empty"):
        train_loop([], tiny_config(), tmp_path)


def test_divergence_aborts_after_two_bad_steps(tmp_path, phantoms, monkeypatch):
    calls = {"n": 0}

    def exploding(batch, models, cfg):
        calls["n"] += 1
        return {"bce": 0.0, "dice": 0.0, "ds": 0.0, "adv": 0.0,
                "loss_G": float("nan")}

    monkeypatch.setattr(training, "generator_step", exploding)
    with pytest.raises(TrainingDiverged, match="non-finite"):
        train_loop(phantoms, tiny_config(epochs=5), tmp_path)
    assert calls["n"] == 2  # one free skip, then the abort


def test_single_bad_step_is_forgiven(tmp_path, phantoms, monkeypatch):
    real = generator_step
    calls = {"n": 0}

    def flaky(batch, models, cfg):
        calls["n"] += 1
        if calls["n"] == 1:
            return {"bce": 0.0, "dice": 0.0, "ds": 0.0, "adv": 0.0,
                    "loss_G": float("inf")}
        return real(batch, models, cfg)

    monkeypatch.setattr(training, "generator_step", flaky)
    res = train_loop(phantoms, tiny_config(epochs=1), tmp_path)
    assert res.steps == 2
    assert not res.reports[0].is_finite()
    assert res.reports[1].is_finite()


def test_max_steps_caps_the_run(tmp_path, phantoms):
    cfg = tiny_config(epochs=50, max_steps=3)
    res = train_loop(phantoms, cfg, tmp_path)
    assert res.steps == 3


def test_adv_weight_zero_skips_the_critic(tmp_path, phantoms):
    cfg = tiny_config(adv_weight=0.0, epochs=1)
    res = train_loop(phantoms, cfg, tmp_path)
    assert all(r.adversarial == 0.0 for r in res.reports)
    assert all(r.loss_D == 0.0 for r in res.reports)
    # with no critic step the discriminator optimizer never ticks
    models = build_models(cfg)
    batch = make_batch(phantoms[:1], cfg, np.random.default_rng(0), np.float32)
    generator_step(batch, models, cfg)
    assert models.adam_d.t == 0
