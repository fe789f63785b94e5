"""Reconstruction, adversarial and contextual losses and the alternating GAN training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .beats import BeatImage
from .errors import ConfigError, ContractError, ShapeError
from .model import (
    DiscriminatorParams,
    GeneratorParams,
    ModelConfig,
    Reconstruction,
    init_discriminator,
    init_generator,
    generate,
    mask_indices,
    masked_column_count,
    patchify,
    sample_wave_mask,
    discriminate,
)
from .numerics import AdamWState, LrSchedule, Tensor

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


def loss_mae(original, predicted) -> Tensor:
    """Mean squared error over the masked pixels.

    ``original`` and ``predicted`` hold the masked patches, (..., M, P*P).
    The sum of squared errors is divided by the number of masked pixels.
    """
    predicted = nx.as_tensor(predicted)
    target = original.data if isinstance(original, Tensor) else np.asarray(original, dtype=np.float64)
    if target.shape != predicted.shape:
        raise ShapeError(f"masked target {target.shape} and prediction {predicted.shape} differ")
    if predicted.size == 0:
        raise ContractError("reconstruction loss needs a non-empty mask")
    return nx.mean(nx.power(predicted - target, 2))


def loss_con(original, reconstructed) -> Tensor:
    """Mean absolute pixel difference between an image and its reassembled reconstruction."""
    reconstructed = nx.as_tensor(reconstructed)
    x = original.data if isinstance(original, Tensor) else np.asarray(original, dtype=np.float64)
    if x.shape != reconstructed.shape:
        raise ShapeError(f"image {x.shape} and reconstruction {reconstructed.shape} differ")
    return nx.mean(nx.tabs(reconstructed - x))


def loss_adv_discriminator(d_real, d_fake) -> Tensor:
    """-mean log D(real) - mean log(1 - D(fake)), probabilities clamped to [1e-7, 1 - 1e-7]."""
    real = nx.clip(d_real, PROB_EPS, 1.0 - PROB_EPS)
    fake = nx.clip(d_fake, PROB_EPS, 1.0 - PROB_EPS)
    return -nx.mean(nx.log(real)) - nx.mean(nx.log(1.0 - fake))


def loss_adv_generator(d_fake) -> Tensor:
    """Non-saturating generator loss, -mean log D(fake)."""
    return -nx.mean(nx.log(nx.clip(d_fake, PROB_EPS, 1.0 - PROB_EPS)))


@dataclass
class LossBundle:
    l_mae: float
    l_adv: float
    l_con: float
    l_total: float
    gamma_adv: float
    gamma_con: float
    tensor: Tensor | None = field(default=None, repr=False)


def loss_total(l_mae, l_adv_g, l_con, gamma_adv: float = 0.001, gamma_con: float = 0.0) -> LossBundle:
    """l_mae + gamma_adv * l_adv_g + gamma_con * l_con.

    Accepts floats or scalar tensors; with tensors the combined graph node
    is kept on ``.tensor`` for backpropagation.
    """
    if gamma_adv < 0 or gamma_con < 0:
        raise ConfigError("loss weights must be non-negative")
    total = l_mae + gamma_adv * l_adv_g + gamma_con * l_con

    def val(x):
        return x.item() if isinstance(x, Tensor) else float(x)

    return LossBundle(val(l_mae), val(l_adv_g), val(l_con), val(total), gamma_adv, gamma_con,
                      total if isinstance(total, Tensor) else None)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    base_lr: float = 1e-3
    warmup_steps: int = 40
    weight_decay: float = 0.05
    mask_ratio: float = 0.3
    gamma_adv: float = 0.001
    gamma_con: float = 0.0
    disc_lr: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        for name in ("base_lr", "weight_decay", "gamma_adv", "gamma_con"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.disc_lr is not None and self.disc_lr < 0:
            raise ConfigError("disc_lr must be non-negative")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1]")


@dataclass
class TrainResult:
    generator: GeneratorParams
    discriminator: DiscriminatorParams
    history: list[dict[str, float]]


HISTORY_COLUMNS = ("epoch", "l_mae", "l_adv_d", "l_adv_g", "l_con", "l_total", "lr")


def _stack_images(images: Sequence[BeatImage]) -> np.ndarray:
    bad = [im.source for im in images if im.aami_class != "N"]
    if bad:
        raise ContractError(f"training set must be class N only; {len(bad)} other beats, e.g. {bad[0]}")
    return np.stack([im.pixels for im in images])


def generator_objective(patches: np.ndarray, masks, gen: GeneratorParams, disc: DiscriminatorParams,
                        gamma_adv: float, gamma_con: float):
    """Forward the generator under ``masks`` and build the combined objective.

    Returns the reconstruction and the loss bundle (with its graph node).
    """
    rec = generate(patches, masks, gen)
    _, drop, _ = mask_indices(masks)
    rows = np.arange(patches.shape[0])[:, None]
    l_mae = loss_mae(patches[rows, drop], rec.predicted_masked)
    l_con = loss_con(patches, rec.full)
    l_adv = loss_adv_generator(discriminate(rec.predicted_masked, drop, disc))
    return rec, loss_total(l_mae, l_adv, l_con, gamma_adv, gamma_con)


def discriminator_step(patches: np.ndarray, rec: Reconstruction, disc: DiscriminatorParams,
                       state: AdamWState, lr: float) -> float:
    """One AdamW step on D: visible patches are real, detached predictions fake."""
    keep, drop, _ = mask_indices(rec.masks)
    rows = np.arange(patches.shape[0])[:, None]
    nx.zero_grads(disc.tensors.values())
    d_real = discriminate(patches[rows, keep], keep, disc)
    d_fake = discriminate(rec.predicted_masked.detach(), drop, disc)
    l_d = loss_adv_discriminator(d_real, d_fake)
    l_d.backward()
    nx.adamw_step(disc.tensors, state, lr)
    nx.zero_grads(disc.tensors.values())
    return l_d.item()


def generator_step(patches: np.ndarray, rec: Reconstruction, gen: GeneratorParams,
                   disc: DiscriminatorParams, state: AdamWState, lr: float,
                   gamma_adv: float, gamma_con: float) -> LossBundle:
    """One AdamW step on the generator against the current discriminator.

    D's parameters receive gradients during the backward pass; they are
    cleared afterwards and never stepped here.
    """
    _, drop, _ = mask_indices(rec.masks)
    rows = np.arange(patches.shape[0])[:, None]
    nx.zero_grads(gen.tensors.values())
    l_mae = loss_mae(patches[rows, drop], rec.predicted_masked)
    l_con = loss_con(patches, rec.full)
    l_g = loss_adv_generator(discriminate(rec.predicted_masked, drop, disc))
    bundle = loss_total(l_mae, l_g, l_con, gamma_adv, gamma_con)
    bundle.tensor.backward()
    nx.adamw_step(gen.tensors, state, lr)
    nx.zero_grads(disc.tensors.values())
    return bundle


def train(images: Sequence[BeatImage], cfg: TrainConfig, model_cfg: ModelConfig | None = None,
          progress: bool = False) -> TrainResult:
    """Alternate one discriminator and one generator AdamW step per batch.

    Every image gets a fresh wave mask each time it is drawn. The
    discriminator sees visible patches as real and detached reconstructions
    as fake; the generator then minimises the combined objective against
    the updated discriminator.
    """
    if not images:
        raise ContractError("training set is empty")
    model_cfg = model_cfg or ModelConfig(mask_ratio=cfg.mask_ratio)
    grid = model_cfg.grid
    if masked_column_count(grid.cols, cfg.mask_ratio) >= grid.cols:
        raise ConfigError("mask_ratio masks every column; nothing left for the encoder")
    if masked_column_count(grid.cols, cfg.mask_ratio) == 0:
        raise ConfigError("mask_ratio masks no column; the reconstruction loss is undefined")
    pixels = _stack_images(images)
    patches = patchify(pixels, grid)
    gen = init_generator(model_cfg, cfg.seed)
    disc = init_discriminator(model_cfg, cfg.seed)
    history: list[dict[str, float]] = []
    if cfg.epochs == 0:
        return TrainResult(gen, disc, history)

    rng = np.random.default_rng([cfg.seed, 2])
    n = len(patches)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    warmup = min(cfg.warmup_steps, total - 1)
    g_sched = LrSchedule(cfg.base_lr, warmup, total) if cfg.base_lr > 0 else None
    disc_lr = cfg.base_lr if cfg.disc_lr is None else cfg.disc_lr
    d_sched = LrSchedule(disc_lr, warmup, total) if disc_lr > 0 else None
    g_state = AdamWState(lr_base=cfg.base_lr, weight_decay=cfg.weight_decay)
    d_state = AdamWState(lr_base=disc_lr, weight_decay=cfg.weight_decay)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = dict.fromkeys(("l_mae", "l_adv_d", "l_adv_g", "l_con", "l_total"), 0.0)
        lr = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = patches[idx]
            masks = [sample_wave_mask(grid, cfg.mask_ratio, rng, model_cfg.mask_sigma,
                                      model_cfg.mask_sampling) for _ in idx]
            step += 1
            lr = g_sched(step) if g_sched else 0.0
            dlr = d_sched(step) if d_sched else 0.0

            rec = generate(batch, masks, gen)
            l_d = discriminator_step(batch, rec, disc, d_state, dlr)
            bundle = generator_step(batch, rec, gen, disc, g_state, lr, cfg.gamma_adv, cfg.gamma_con)

            sums["l_mae"] += bundle.l_mae
            sums["l_adv_d"] += l_d
            sums["l_adv_g"] += bundle.l_adv
            sums["l_con"] += bundle.l_con
            sums["l_total"] += bundle.l_total
        row = {"epoch": epoch + 1, **{k: v / steps_per_epoch for k, v in sums.items()}, "lr": lr}
        history.append(row)
        if progress:
            log.info("epoch %d  l_mae %.5f  l_con %.5f  l_adv_d %.4f  l_adv_g %.4f",
                     row["epoch"], row["l_mae"], row["l_con"], row["l_adv_d"], row["l_adv_g"])
    nx.zero_grads(gen.tensors.values())
    return TrainResult(gen, disc, history)


def write_history(path: str | Path, history: Sequence[dict[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])


def read_history(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]
