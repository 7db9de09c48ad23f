"""Shared setup for the toy-scale experiment scripts."""
import argparse
import time
from dataclasses import replace

from nerf_mir.masking import MaskSpec, mask_dataset
from nerf_mir.metrics import evaluate_views
from nerf_mir.pire import TrainConfig, train
from nerf_mir.renderer import SamplingConfig, render_image
from nerf_mir.toy_scenes import build_scene, two_primitive_spec


def base_parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--views", type=int, default=12)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--level", type=float, default=0.25)
    p.add_argument("--mask-unit", type=int, default=8)
    p.add_argument("--mask-seed", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="results")
    return p


def toy_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, stages=5, patch_unit=8, batch=512, L_pos=6, L_dir=4,
                       lr_init=5e-3, lr_final=5e-4, sampling=SamplingConfig(n_coarse=16, n_fine=16),
                       seed=args.seed)


def clean_scene(args):
    return build_scene(two_primitive_spec(views=args.views, size=args.size))


def run(clean, config: TrainConfig, level: float, mask_unit: int, mask_seed: int, label: str = ""):
    """Train on the masked scene and score training-pose renders against the clean images."""
    masked = mask_dataset(clean, MaskSpec(level=level, unit=mask_unit, seed=mask_seed))
    t0 = time.perf_counter()
    res = train(masked, config=config)
    preds = [render_image(res.model, clean.intrinsics, v.pose, clean.near, clean.far, config.sampling)
             for v in clean.views]
    report = evaluate_views(preds, list(clean.images), masked.masks)
    secs = time.perf_counter() - t0
    print(f"{label:<28s} " + "  ".join(f"{k} {v.psnr:6.2f}" for k, v in report.items())
          + f"  ({res.model.step} steps, {secs:.0f}s)", flush=True)
    return report


__all__ = ["base_parser", "toy_config", "clean_scene", "run", "replace"]
