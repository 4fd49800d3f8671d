"""Alternating adversarial training.

The generator minimizes deep-supervision BCE+Dice plus the multi-scale L1
feature distance; the discriminator maximizes that same distance (Adam on
its negation). Each alternating step runs the discriminator update first,
then the generator update, on the same batch.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_params, restore_params, \
    save_adam_state, save_params
from .data import random_crop, random_flip, remap_labels
from .discriminator import (
    DiscriminatorConfig,
    disc_in_channels,
    disc_input,
    init_disc_params,
    init_disc_state,
    multiscale_l1,
    pair_features,
)
from .engine import ConfigError, Tensor, no_grad
from .generator import GeneratorConfig, generator_forward, init_params, \
    parameter_count
from .losses import LossReport, binary_cross_entropy, deep_supervision_loss, \
    soft_dice
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 10
    max_steps: int = 0  # cap on alternating step pairs; 0 leaves epochs in charge
    adv_weight: float = 1.0
    d_steps_per_g: int = 1
    ds_weights: tuple = (4.0, 2.0, 1.0)  # finest head weighted highest
    threshold: float = 0.5
    flip_p: float = 0.5
    dtype: str = "float32"
    checkpoint_every: int = 1
    # generator architecture
    in_channels: int = 4
    base_channels: int = 16
    num_down: int = 5
    num_transformer_layers: int = 2
    embed_dim: int = 256
    num_heads: int = 8
    ffn_hidden: int = 0
    patch_extents: tuple = (160, 192, 160)
    # discriminator architecture
    disc_blocks: int = 6
    disc_base_channels: int = 16
    masked_input: bool = True

    def __post_init__(self):
        self.patch_extents = tuple(int(e) for e in self.patch_extents)
        ws = tuple(float(w) for w in self.ds_weights)
        if len(ws) != 3 or any(w <= 0 for w in ws):
            raise ConfigError("ds_weights must be three positive numbers")
        self.ds_weights = tuple(w / sum(ws) for w in ws)
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.d_steps_per_g < 1:
            raise ConfigError("d_steps_per_g must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold {self.threshold} outside (0, 1)")
        if not 0.0 <= self.flip_p <= 1.0:
            raise ConfigError(f"flip_p {self.flip_p} outside [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        # constructing the sub-configs runs their own validation
        self.generator_config()
        self.discriminator_config()

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def generator_config(self):
        return GeneratorConfig(
            in_channels=self.in_channels,
            base_channels=self.base_channels,
            num_down=self.num_down,
            num_transformer_layers=self.num_transformer_layers,
            embed_dim=self.embed_dim,
            num_heads=self.num_heads,
            ffn_hidden=self.ffn_hidden,
            patch_extents=self.patch_extents,
        )

    def discriminator_config(self):
        return DiscriminatorConfig(
            in_channels=disc_in_channels(self.in_channels, self.masked_input),
            base_channels=self.disc_base_channels,
            num_blocks=self.disc_blocks,
            masked_input=self.masked_input,
        )

    def to_dict(self):
        d = asdict(self)
        d["patch_extents"] = list(self.patch_extents)
        d["ds_weights"] = list(self.ds_weights)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}")
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)


@dataclass
class Models:
    g_cfg: GeneratorConfig
    d_cfg: DiscriminatorConfig
    g_params: dict
    d_params: dict
    d_state: list
    adam_g: AdamState
    adam_d: AdamState


def build_models(cfg):
    dtype = cfg.np_dtype()
    rng = np.random.default_rng(cfg.seed)
    g_cfg = cfg.generator_config()
    d_cfg = cfg.discriminator_config()
    return Models(
        g_cfg=g_cfg,
        d_cfg=d_cfg,
        g_params=init_params(g_cfg, rng, dtype),
        d_params=init_disc_params(d_cfg, rng, dtype),
        d_state=init_disc_state(d_cfg, dtype),
        adam_g=AdamState(lr=cfg.lr),
        adam_d=AdamState(lr=cfg.lr),
    )


def make_batch(samples, cfg, rng, dtype):
    """Crop and flip each sample to the patch, stack images and region maps."""
    imgs, gts = [], []
    for s in samples:
        if tuple(s.extents) != cfg.patch_extents:
            s = random_crop(s, cfg.patch_extents, rng)
        if cfg.flip_p > 0:
            s = random_flip(s, cfg.flip_p, rng)
        imgs.append(s.image.astype(dtype))
        gts.append(remap_labels(s.labels).astype(dtype))
    return np.stack(imgs), np.stack(gts)


def _zero_grads(params):
    for p in params.values():
        p.grad = None


def generator_step(batch, models, cfg):
    """One update of the generator; discriminator parameters stay frozen."""
    x_arr, gt_arr = batch
    x = Tensor(x_arr)
    for p in models.d_params.values():
        p.requires_grad = False
    try:
        heads = generator_forward(x, models.g_params, models.g_cfg)
        ds = deep_supervision_loss(heads, gt_arr, cfg.ds_weights)
        adv_val = 0.0
        loss = ds
        if cfg.adv_weight != 0:
            pred_in = disc_input(x, heads[0], models.d_cfg.masked_input)
            gt_in = disc_input(x, Tensor(gt_arr), models.d_cfg.masked_input)
            f_pred, f_gt = pair_features(pred_in, gt_in, models.d_params,
                                         models.d_cfg, models.d_state, True)
            adv = multiscale_l1(f_pred, f_gt)
            adv_val = float(adv.item())
            loss = ds + adv * cfg.adv_weight
        with no_grad():
            head = Tensor(heads[0].data)
            target = Tensor(gt_arr)
            bce_val = float(binary_cross_entropy(head, target).item())
            dice_val = float(soft_dice(head, target).item())
        parts = {
            "bce": bce_val,
            "dice": dice_val,
            "ds": float(ds.item()),
            "adv": adv_val,
            "loss_G": float(loss.item()),
        }
        if not np.isfinite(parts["loss_G"]):
            log.warning("non-finite generator loss, update skipped")
            return parts
        loss.backward()
        grads = {n: p.grad for n, p in models.g_params.items()}
        adam_step(models.g_params, grads, models.adam_g)
        _zero_grads(models.g_params)
        return parts
    finally:
        for p in models.d_params.values():
            p.requires_grad = True


def discriminator_step(batch, models, cfg):
    """One ascent step on the feature distance; generator output is constant."""
    x_arr, gt_arr = batch
    with no_grad():
        heads = generator_forward(Tensor(x_arr), models.g_params, models.g_cfg)
        pred_arr = heads[0].data
    x = Tensor(x_arr)
    pred_in = disc_input(x, Tensor(pred_arr), models.d_cfg.masked_input)
    gt_in = disc_input(x, Tensor(gt_arr), models.d_cfg.masked_input)
    f_pred, f_gt = pair_features(pred_in, gt_in, models.d_params,
                                 models.d_cfg, models.d_state, True)
    msl1 = multiscale_l1(f_pred, f_gt)
    val = float(msl1.item())
    if not np.isfinite(val):
        log.warning("non-finite discriminator objective, update skipped")
        return {"loss_D": val}
    (-msl1).backward()
    grads = {n: p.grad for n, p in models.d_params.items()}
    adam_step(models.d_params, grads, models.adam_d)
    _zero_grads(models.d_params)
    return {"loss_D": val}


def save_generator(path, params):
    save_params(path, params)


def load_generator(path, g_cfg, dtype=np.float32):
    records = load_params(path)
    total = sum(int(np.prod(a.shape)) for a in records.values())
    expected = parameter_count(g_cfg)
    if total != expected:
        raise CheckpointError(
            f"checkpoint holds {total} scalars, config implies {expected}"
        )
    params = init_params(g_cfg, np.random.default_rng(0), dtype)
    restore_params(params, records, dtype)
    return params


def save_discriminator(path, params, states):
    records = dict(params)
    for i, st in enumerate(states):
        records[f"blk{i}.bn.mean"] = st.mean
        records[f"blk{i}.bn.var"] = st.var
    save_params(path, records)


def load_discriminator(path, d_cfg, dtype=np.float32):
    records = load_params(path)
    states = init_disc_state(d_cfg, dtype)
    for i, st in enumerate(states):
        try:
            st.mean[:] = records.pop(f"blk{i}.bn.mean")
            st.var[:] = records.pop(f"blk{i}.bn.var")
        except KeyError as e:
            raise CheckpointError(f"missing running statistic {e.args[0]!r}")
    params = init_disc_params(d_cfg, np.random.default_rng(0), dtype)
    restore_params(params, records, dtype)
    return params, states


@dataclass
class TrainResult:
    metrics_path: Path
    checkpoints: list
    steps: int
    reports: list = field(default_factory=list)


def train_loop(dataset, cfg, out_dir):
    """Alternating updates over shuffled batches; returns paths and reports.

    Halts with a diagnostic when the loss is non-finite twice in a row.
    Deterministic for a fixed config and seed.
    """
    if not dataset:
        raise ConfigError("dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    models = build_models(cfg)
    data_rng = np.random.default_rng([cfg.seed, 0xDA7A])
    dtype = cfg.np_dtype()

    metrics_path = out_dir / "metrics.csv"
    ckpts = []
    reports = []
    step = 0
    bad_streak = 0
    stop = False
    with open(metrics_path, "w") as mf:
        mf.write(f"# lr={cfg.lr:g}\n")
        mf.write(LossReport.CSV_HEADER + "\n")
        for epoch in range(cfg.epochs):
            order = data_rng.permutation(len(dataset))
            for at in range(0, len(order), cfg.batch_size):
                if cfg.max_steps and step >= cfg.max_steps:
                    stop = True
                    break
                chosen = [dataset[i] for i in order[at:at + cfg.batch_size]]
                batch = make_batch(chosen, cfg, data_rng, dtype)
                d_parts = {"loss_D": 0.0}
                if cfg.adv_weight != 0:
                    for _ in range(cfg.d_steps_per_g):
                        d_parts = discriminator_step(batch, models, cfg)
                g_parts = generator_step(batch, models, cfg)
                step += 1
                report = LossReport(
                    step=step,
                    bce=g_parts["bce"],
                    dice=g_parts["dice"],
                    deep_supervision_total=g_parts["ds"],
                    adversarial=g_parts["adv"],
                    loss_G=g_parts["loss_G"],
                    loss_D=d_parts["loss_D"],
                )
                reports.append(report)
                mf.write(report.csv_row() + "\n")
                if report.is_finite():
                    bad_streak = 0
                else:
                    bad_streak += 1
                    if bad_streak >= 2:
                        mf.flush()
                        raise TrainingDiverged(
                            f"non-finite loss at steps {step - 1} and {step}: "
                            f"loss_G={report.loss_G}, loss_D={report.loss_D}"
                        )
            last_epoch = stop or epoch == cfg.epochs - 1
            if (epoch + 1) % cfg.checkpoint_every == 0 or last_epoch:
                g_path = out_dir / f"gen_ep{epoch + 1:04d}.vgan"
                d_path = out_dir / f"disc_ep{epoch + 1:04d}.vgan"
                save_generator(g_path, models.g_params)
                save_discriminator(d_path, models.d_params, models.d_state)
                save_adam_state(out_dir / "adam_g.vgst", models.adam_g)
                save_adam_state(out_dir / "adam_d.vgst", models.adam_d)
                ckpts.append((g_path, d_path))
            if stop:
                break
    return TrainResult(metrics_path, ckpts, step, reports)
