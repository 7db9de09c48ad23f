"""Staged self-training restorer.

Training is split into ``t`` stages. Within a stage, rays are drawn from
the entropy budget of the current working images and the model is fitted
with a loss that weights unmasked rays by ``1 - alpha`` and masked rays by
``alpha``. At each stage boundary the masked pixels of the working images
are overwritten with the model's renders, the budgets are recomputed and
``alpha`` grows by ``delta_alpha``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import pere
from .field import (EncodingConfig, NerfModel, adam_step, init_model, lr_schedule, save_checkpoint,
                    LR_FINAL, LR_INIT)
from .metrics import evaluate_views
from .renderer import SamplingConfig, backward_rays, quantize, render_image, render_pixels, render_rays
from .scene_data import Dataset, ValidationError, camera_rays, split_patches

log = logging.getLogger(__name__)

LOSSES = ("dw", "mse")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    stages: int = 5
    alpha0: float = 0.0
    delta_alpha: float = 0.125
    n_p: float = 2
    w_min: Optional[float] = None          # None: 1 / (K * n_p)
    patch_unit: int = 10
    batch: int = 1024
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    seed: int = 0
    lr_init: float = LR_INIT
    lr_final: float = LR_FINAL
    use_pere: bool = True
    rewrite: bool = True
    loss: str = "dw"                       # "mse": plain unweighted loss over all rays
    L_pos: int = 10
    L_dir: int = 4
    width: int = 64
    quantize_rewrites: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.stages < 1:
            raise ValidationError("stage count must be >= 1")
        if self.epochs < 0 or (self.epochs > 0 and self.epochs < self.stages):
            raise ValidationError(f"need epochs >= stages, got {self.epochs} < {self.stages}")
        if self.alpha0 < 0 or self.delta_alpha < 0:
            raise ValidationError("alpha0 and delta_alpha must be non-negative")
        if self.alpha0 + (self.stages - 1) * self.delta_alpha > 1 + 1e-12:
            raise ValidationError("alpha schedule exceeds 1 before the last stage")
        if self.loss not in LOSSES:
            raise ValidationError(f"unknown loss {self.loss!r}")
        if self.batch < 1 or self.patch_unit < 1 or self.n_p < 1:
            raise ValidationError("batch, patch_unit and n_p must be positive")

    @property
    def encoding(self) -> EncodingConfig:
        return EncodingConfig(self.L_pos, self.L_dir)


def ablation(config: TrainConfig, pere_on: bool = True, pire_on: bool = True,
             dw: Optional[bool] = None) -> TrainConfig:
    """Map component switches onto a config.

    Without PIRE training runs as a single stage with no rewriting; the
    weighted loss then defaults to off (plain loss over all rays) unless
    ``dw`` forces it on.
    """
    if dw is None:
        dw = pire_on
    kw = dict(use_pere=pere_on, loss="dw" if dw else "mse")
    if not pire_on:
        kw.update(stages=1, rewrite=False)
    return replace(config, **kw)


@dataclass
class StageState:
    stage: int
    alpha: float
    dataset: Dataset
    model: NerfModel
    budgets: list


@dataclass
class TrainResult:
    model: NerfModel
    restored: Dataset
    log: list
    alphas: list
    restored_float: Optional[np.ndarray] = None


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg, model, log):
        super().__init__(msg)
        self.model = model
        self.log = log


def dw_loss(preds, target, is_masked, alpha: float):
    """Dynamically weighted squared error.

    ``preds`` is (B, 3) or a stack (P, B, 3) of predictions (coarse and
    fine); every prediction contributes
    ``(1 - alpha) * sum_R |c_hat - c|^2 + alpha * sum_M |c_hat - c|^2``.
    Returns ``(loss, grad)`` with ``grad`` shaped like ``preds``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    return weighted_sq_loss(preds, target, is_masked, 1.0 - alpha, alpha)


def weighted_sq_loss(preds, target, is_masked, w_unmasked: float, w_masked: float):
    preds = np.asarray(preds, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    m = np.asarray(is_masked).astype(bool)
    if preds.shape[-2:] != target.shape or m.shape != target.shape[:1]:
        raise ValidationError(
            f"batch shapes differ: preds {preds.shape}, target {target.shape}, mask {m.shape}")
    w = np.where(m, w_masked, w_unmasked)
    diff = preds - target
    per_ray = (diff * diff).sum(-1)
    loss = float((per_ray * w).sum())
    grad = 2.0 * w[:, None] * diff
    return loss, grad


def partition_stages(T: int, t: int) -> list:
    """``t`` contiguous epoch ranges of ``T // t``; the remainder goes to the last one."""
    if t < 1 or T < t:
        raise ValidationError(f"need T >= t >= 1, got T={T}, t={t}")
    size = T // t
    out = []
    for j in range(t):
        start = j * size
        stop = T if j == t - 1 else start + size
        out.append((j, range(start, stop)))
    return out


def advance_alpha(alpha_prev: float, delta_alpha: float) -> float:
    a = alpha_prev + delta_alpha
    if a > 1.0:
        log.warning("alpha %.6g clamped to 1.0", a)
        return 1.0
    return a


def _masked_renders(model, dataset: Dataset, masks, sampling: SamplingConfig):
    out = []
    for v, m in zip(dataset.views, masks):
        rows, cols = np.nonzero(m)
        if len(rows) == 0:
            out.append((rows, cols, np.zeros((0, 3))))
            continue
        rgb = render_pixels(model, dataset.intrinsics, v.pose, rows, cols, dataset.near, dataset.far,
                            sampling)
        out.append((rows, cols, rgb))
    return out


def rewrite_masked_regions(model: NerfModel, dataset: Dataset, masks,
                           sampling: SamplingConfig = SamplingConfig()) -> Dataset:
    """Replace every masked pixel with the deterministic fine render through it.

    Unmasked pixels and the mask matrices are left untouched.
    """
    images = []
    for v, (rows, cols, rgb) in zip(dataset.views, _masked_renders(model, dataset, masks, sampling)):
        img = v.image.copy()
        img[rows, cols] = quantize(rgb)
        images.append(img)
    return dataset.with_images(images)


def _rewrite_float(model, dataset, masks, work: np.ndarray, sampling, quantized: bool) -> np.ndarray:
    work = work.copy()
    for i, (rows, cols, rgb) in enumerate(_masked_renders(model, dataset, masks, sampling)):
        vals = quantize(rgb).astype(np.float32) / 255.0 if quantized else np.clip(rgb, 0, 1)
        work[i, rows, cols] = vals
    return work


LOG_COLUMNS = ["epoch", "stage", "alpha", "lr", "loss_R", "loss_M", "psnr_holdout"]


def write_log_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], r["stage"], repr(r["alpha"]), repr(r["lr"]),
                        repr(r["loss_R"]), repr(r["loss_M"]),
                        "" if r["psnr_holdout"] is None else repr(r["psnr_holdout"])])


def _nanmean(total, n):
    return total / n if n else float("nan")


def train(dataset: Dataset, masks=None, config: TrainConfig = TrainConfig(),
          holdout: Optional[Dataset] = None, model: Optional[NerfModel] = None,
          on_stage_end: Optional[Callable[[StageState], None]] = None,
          checkpoint_dir=None) -> TrainResult:
    """Fit coarse and fine fields to a masked dataset, restoring masked pixels stage by stage.

    ``masks`` defaults to the masks stored on the views (all zeros if none).
    """
    V = len(dataset.views)
    H, W = dataset.intrinsics.height, dataset.intrinsics.width
    if masks is None:
        masks = dataset.masks
    if masks is None:
        masks = np.zeros((V, H, W), dtype=np.uint8)
    masks = np.asarray(masks).astype(np.uint8)
    if masks.shape != (V, H, W):
        raise ValidationError(f"masks shape {masks.shape} does not match dataset {(V, H, W)}")

    dtype = np.dtype(config.dtype)
    if model is None:
        model = init_model(config.encoding, config.seed, config.width, dtype, config.sampling.use_fine)
    original = dataset.images
    work = original.astype(np.float32) / 255.0
    working_ds = dataset
    bool_masks = masks.astype(bool)

    grid = split_patches(W, H, config.patch_unit)
    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    ray_o = np.empty((V, H, W, 3))
    ray_d = np.empty((V, H, W, 3))
    for i, v in enumerate(dataset.views):
        o, d = camera_rays(dataset.intrinsics, v.pose, rows.ravel(), cols.ravel())
        ray_o[i], ray_d[i] = o.reshape(H, W, 3), d.reshape(H, W, 3)

    # every epoch emits the same number of rays whatever the allocation
    n_epoch_rays = int(round(V * grid.K * config.n_p))
    T = config.epochs
    alpha = config.alpha0
    alphas: list = []
    rows_log: list = []
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    if T == 0:
        return TrainResult(model, dataset, rows_log, alphas, work)

    w_unm, w_msk = (1.0, 1.0)
    last_good = model
    for j, epochs in partition_stages(T, config.stages):
        alphas.append(alpha)
        if config.loss == "dw":
            w_unm, w_msk = 1.0 - alpha, alpha
        imgs_u8 = quantize(work)
        _, budgets = pere.budgets_for_views(imgs_u8, grid, config.n_p, config.w_min, config.use_pere)
        for epoch in epochs:
            lr = lr_schedule(epoch, T, config.lr_init, config.lr_final)
            pix = pere.sample_ray_pixels(budgets, grid, np.random.default_rng([config.seed, epoch, 0]),
                                         n_rays=n_epoch_rays)
            acc = dict(r_sum=0.0, r_n=0, m_sum=0.0, m_n=0)
            for b, s in enumerate(range(0, len(pix), config.batch)):
                vi, ri, ci = pix[s:s + config.batch].T
                rng = np.random.default_rng([config.seed, epoch, b + 1])
                target = work[vi, ri, ci].astype(np.float64)
                is_m = bool_masks[vi, ri, ci]
                rgb_c, rgb_f, state = render_rays(model, ray_o[vi, ri, ci], ray_d[vi, ri, ci],
                                                  dataset.near, dataset.far, config.sampling, rng,
                                                  keep_state=True)
                loss, grad = weighted_sq_loss(np.stack([rgb_c, rgb_f]), target, is_m, w_unm, w_msk)
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}", last_good, rows_log)
                err = ((rgb_f - target) ** 2).sum(-1)
                acc["r_sum"] += float(err[~is_m].sum())
                acc["r_n"] += int((~is_m).sum())
                acc["m_sum"] += float(err[is_m].sum())
                acc["m_n"] += int(is_m.sum())
                g_c, g_f = backward_rays(model, state, grad[0], grad[1])
                c_opt, coarse = adam_step(model.coarse_opt, model.coarse, g_c, lr)
                fine, f_opt = model.fine, model.fine_opt
                if g_f is not None:
                    f_opt, fine = adam_step(model.fine_opt, model.fine, g_f, lr)
                model = NerfModel(coarse, fine, c_opt, f_opt, model.step + 1)
            rows_log.append(dict(epoch=epoch, stage=j, alpha=alpha, lr=lr,
                                 loss_R=_nanmean(acc["r_sum"], acc["r_n"]),
                                 loss_M=_nanmean(acc["m_sum"], acc["m_n"]), psnr_holdout=None))

        if config.rewrite and bool_masks.any():
            work = _rewrite_float(model, dataset, masks, work, config.sampling,
                                  config.quantize_rewrites)
            # unmasked pixels always come from the originals
            work[~bool_masks] = original[~bool_masks].astype(np.float32) / 255.0
        working_ds = dataset.with_images(quantize(work))
        if holdout is not None:
            preds = [render_image(model, holdout.intrinsics, v.pose, holdout.near, holdout.far,
                                  config.sampling) for v in holdout.views]
            rep = evaluate_views(preds, [v.image for v in holdout.views], regions=("full",))
            rows_log[-1]["psnr_holdout"] = rep["full"].psnr
        last_good = model
        if ckpt_dir is not None:
            save_checkpoint(ckpt_dir / f"stage_{j + 1}.npz", model,
                            {"stage": j + 1, "alpha": alpha, "epoch": epochs.stop})
        if on_stage_end is not None:
            on_stage_end(StageState(j, alpha, working_ds, model, budgets))
        log.info("stage %d/%d done: alpha=%.3f loss_R=%.5f loss_M=%.5f", j + 1, config.stages, alpha,
                 rows_log[-1]["loss_R"], rows_log[-1]["loss_M"])
        if j < config.stages - 1:
            alpha = advance_alpha(alpha, config.delta_alpha)

    return TrainResult(model, working_ds, rows_log, alphas, work)
