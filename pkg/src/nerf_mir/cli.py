"""Command line entry point: ``nerf-mir <subcommand> ...``.

Subcommands: toy, mask, train, render, eval, heatmap. Every option can also
come from a JSON config file (``--config``, a flat object keyed by option
name with underscores) or from ``NERF_MIR_<OPTION>`` environment variables;
precedence is file < environment < flags. All outputs go under ``--out``,
which also receives ``outputs.json`` listing the files written and the
resolved options.

Exit status: 0 on success, 2 on invalid input or configuration, 1 on I/O
or numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import pere
from .field import NumericError, init_model, load_checkpoint, save_checkpoint
from .masking import DEFAULT_FILL, MaskSpec, mask_dataset
from .metrics import REGIONS, evaluate_views, write_eval_csv
from .pire import TrainConfig, TrainingDiverged, ablation, train, write_log_csv
from .renderer import SamplingConfig, render_image, render_rays, write_ray_debug_csv
from .scene_data import (CameraIntrinsics, ValidationError, camera_rays, load_dataset, save_dataset,
                         split_patches)
from .toy_scenes import orbit_poses, two_primitive_spec, generate_scene

log = logging.getLogger("nerf_mir")

ENV_PREFIX = "NERF_MIR_"


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"not a boolean: {v!r}")


def _rgb(v):
    if isinstance(v, (list, tuple)):
        parts = list(v)
    else:
        parts = str(v).split(",")
    if len(parts) != 3:
        raise ValidationError(f"fill must be R,G,B, got {v!r}")
    rgb = tuple(int(p) for p in parts)
    if not all(0 <= c <= 255 for c in rgb):
        raise ValidationError(f"fill components must lie in 0..255, got {v!r}")
    return rgb


# name -> (type, default, help)
OPTIONS = {
    # paths
    "manifest": (str, None, "input dataset manifest"),
    "out": (str, None, "output directory"),
    "checkpoint": (str, None, "checkpoint file (.npz)"),
    "holdout": (str, None, "clean manifest of held-out views for PSNR curves"),
    "pred": (str, None, "predicted images: a manifest or a directory of PNGs"),
    "gt": (str, None, "ground-truth images: a manifest or a directory of PNGs"),
    "masks_from": (str, None, "manifest whose mask PNGs define the masked region"),
    # toy scenes
    "views": (int, 12, "number of orbit views"),
    "size": (int, 64, "image width and height"),
    # masking
    "level": (float, 0.25, "fraction of cells to mask"),
    "shape": (str, "square", "square or round"),
    "style": (str, "random", "random (per view) or fixed (shared)"),
    "unit": (int, 10, "mask cell side in pixels"),
    "fill": (_rgb, DEFAULT_FILL, "fill colour R,G,B"),
    "seed": (int, 0, "random seed"),
    # training
    "epochs": (int, 50, "total epochs T"),
    "stages": (int, 5, "stage count t"),
    "alpha0": (float, 0.0, "initial loss weight of masked rays"),
    "delta_alpha": (float, 0.125, "alpha increment per stage"),
    "n_p": (float, 2.0, "average rays per patch"),
    "w_min": (float, None, "weight floor threshold (default 1/(K*n_p))"),
    "patch_unit": (int, 10, "PERE patch side in pixels"),
    "batch": (int, 1024, "rays per optimiser step"),
    "lr_init": (float, 5e-4, "initial learning rate"),
    "lr_final": (float, 8e-5, "final learning rate"),
    "L_pos": (int, 10, "position encoding frequencies"),
    "L_dir": (int, 4, "direction encoding frequencies"),
    "width": (int, 64, "hidden layer width"),
    "dtype": (str, "float32", "parameter dtype"),
    "no_pere": (_bool, False, "uniform ray budgets"),
    "no_pire": (_bool, False, "single stage, no rewriting"),
    "dw": (_bool, None, "force the dynamically weighted loss on or off"),
    "float_rewrites": (_bool, False, "keep rewritten pixels in float instead of 8-bit"),
    # sampling
    "n_coarse": (int, 32, "coarse samples per ray"),
    "n_fine": (int, 32, "fine samples per ray"),
    "no_fine": (_bool, False, "disable the fine pass"),
    # rendering
    "orbit": (int, None, "render this many poses on a circular orbit instead of a manifest"),
    "radius": (float, 4.0, "orbit radius"),
    "elevation": (float, 20.0, "orbit elevation in degrees"),
    "fov": (float, 40.0, "orbit camera field of view in degrees"),
    "near": (float, 2.0, "orbit near bound"),
    "far": (float, 6.0, "orbit far bound"),
    "ray_debug": (_bool, False, "dump centre-pixel samples and weights as CSV"),
    # eval
    "scene": (str, "scene", "scene label for the CSV"),
    "setting": (str, "restored", "setting label for the CSV"),
}

BOOL_FLAGS = {"no_pere", "no_pire", "float_rewrites", "no_fine", "ray_debug"}

COMMANDS = {
    "toy": ["out", "views", "size", "seed"],
    "mask": ["manifest", "out", "level", "shape", "style", "unit", "fill", "seed"],
    "train": ["manifest", "out", "holdout", "checkpoint", "epochs", "stages", "alpha0", "delta_alpha",
              "n_p", "w_min", "patch_unit", "batch", "lr_init", "lr_final", "L_pos", "L_dir", "width",
              "dtype", "no_pere", "no_pire", "dw", "float_rewrites", "n_coarse", "n_fine", "no_fine",
              "seed"],
    "render": ["checkpoint", "out", "manifest", "orbit", "size", "radius", "elevation", "fov", "near",
               "far", "n_coarse", "n_fine", "no_fine", "ray_debug"],
    "eval": ["pred", "gt", "masks_from", "out", "scene", "setting"],
    "heatmap": ["manifest", "out", "patch_unit", "n_p", "w_min", "no_pere"],
}

REQUIRED = {
    "toy": ["out"],
    "mask": ["manifest", "out"],
    "train": ["manifest", "out"],
    "render": ["checkpoint", "out"],
    "eval": ["pred", "gt", "out"],
    "heatmap": ["manifest", "out"],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nerf-mir", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, names in COMMANDS.items():
        p = sub.add_parser(cmd, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON config file")
        for name in names:
            typ, default, help_ = OPTIONS[name]
            flags = ["--" + name.replace("_", "-")]
            if cmd == "heatmap" and name == "patch_unit":
                flags.append("--unit")
            if name in BOOL_FLAGS:
                p.add_argument(*flags, dest=name, action="store_true", help=help_)
            elif name == "dw":
                p.add_argument("--dw", dest="dw", action="store_true", help="force the weighted loss on")
                p.add_argument("--no-dw", dest="dw", action="store_false", help="force the weighted loss off")
            else:
                p.add_argument(*flags, dest=name, type=str, metavar=name.upper(),
                               help=f"{help_} (default {default})")
    return parser


def resolve_options(command: str, flags: dict, environ=None) -> dict:
    """Merge defaults, config file, environment and flags for one subcommand."""
    environ = os.environ if environ is None else environ
    names = COMMANDS[command]
    opts = {n: OPTIONS[n][1] for n in names}
    cfg_path = flags.pop("config", None) or environ.get(ENV_PREFIX + "CONFIG")
    if cfg_path:
        try:
            with open(cfg_path) as f:
                doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"config file {cfg_path} is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ValidationError(f"config file {cfg_path} must hold a JSON object")
        unknown = sorted(set(doc) - set(OPTIONS))
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        opts.update({k: v for k, v in doc.items() if k in names})
    for n in names:
        key = ENV_PREFIX + n.upper()
        if key in environ:
            opts[n] = environ[key]
    opts.update({k: v for k, v in flags.items() if k in names})
    out = {}
    for n, v in opts.items():
        typ = OPTIONS[n][0]
        try:
            out[n] = v if v is None else typ(v)
        except (TypeError, ValueError) as e:
            raise ValidationError(f"bad value for {n}: {v!r}") from e
    missing = [n for n in REQUIRED[command] if out.get(n) is None]
    if missing:
        raise ValidationError("missing required option(s): " + ", ".join("--" + m.replace("_", "-")
                                                                        for m in missing))
    return out


class Outputs:
    """Collects produced files and writes ``outputs.json``."""

    def __init__(self, out_dir: Path, command: str, options: dict):
        self.root = out_dir
        self.command = command
        self.options = options
        self.files: list = []
        out_dir.mkdir(parents=True, exist_ok=True)

    def add(self, path) -> Path:
        path = Path(path)
        self.files.append(str(path.relative_to(self.root)))
        return path

    def add_tree(self, sub: Path):
        for p in sorted(sub.rglob("*")):
            if p.is_file():
                self.add(p)

    def write(self):
        doc = {"command": self.command, "options": _jsonable(self.options), "files": sorted(self.files)}
        with open(self.root / "outputs.json", "w") as f:
            json.dump(doc, f, indent=1, sort_keys=True)


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def sampling_from(o: dict) -> SamplingConfig:
    return SamplingConfig(n_coarse=o["n_coarse"], n_fine=o["n_fine"], use_fine=not o["no_fine"])


def train_config_from(o: dict) -> TrainConfig:
    cfg = TrainConfig(epochs=o["epochs"], stages=1 if o["no_pire"] else o["stages"], alpha0=o["alpha0"],
                      delta_alpha=o["delta_alpha"], n_p=o["n_p"], w_min=o["w_min"],
                      patch_unit=o["patch_unit"], batch=o["batch"], sampling=sampling_from(o),
                      seed=o["seed"], lr_init=o["lr_init"], lr_final=o["lr_final"], L_pos=o["L_pos"],
                      L_dir=o["L_dir"], width=o["width"], dtype=o["dtype"],
                      quantize_rewrites=not o["float_rewrites"])
    if o["no_pere"] or o["no_pire"] or o["dw"] is not None:
        cfg = ablation(cfg, pere_on=not o["no_pere"], pire_on=not o["no_pire"], dw=o["dw"])
    return cfg


# ---------------------------------------------------------------------------
# subcommands

def cmd_toy(o: dict) -> int:
    out = Outputs(Path(o["out"]), "toy", o)
    generate_scene(two_primitive_spec(o["views"], o["size"], o["seed"]), out.root)
    out.add(out.root / "manifest.json")
    out.add_tree(out.root / "images")
    out.write()
    return 0


def cmd_mask(o: dict) -> int:
    ds = load_dataset(o["manifest"])
    spec = MaskSpec(level=o["level"], shape=o["shape"], style=o["style"], unit=o["unit"], fill=o["fill"],
                    seed=o["seed"])
    masked = mask_dataset(ds, spec)
    out = Outputs(Path(o["out"]), "mask", o)
    save_dataset(masked, out.root, extra={"mask_spec": _jsonable(spec.__dict__)})
    out.add(out.root / "manifest.json")
    out.add_tree(out.root / "images")
    out.add_tree(out.root / "masks")
    frac = float(masked.masks.mean())
    log.info("masked %d views, masked pixel fraction %.4f", len(masked.views), frac)
    out.write()
    return 0


def cmd_train(o: dict) -> int:
    ds = load_dataset(o["manifest"])
    cfg = train_config_from(o)
    holdout = load_dataset(o["holdout"]) if o["holdout"] else None
    out = Outputs(Path(o["out"]), "train", o)
    ck_dir = out.root / "checkpoints"
    model = None
    if o["checkpoint"]:
        model, _ = load_checkpoint(o["checkpoint"])
    if cfg.epochs == 0:
        if model is None:
            model = init_model(cfg.encoding, cfg.seed, cfg.width, np.dtype(cfg.dtype), cfg.sampling.use_fine)
        out.add(save_checkpoint(ck_dir / "init.npz", model, {"stage": 0, "epoch": 0}))
        out.write()
        return 0
    try:
        res = train(ds, config=cfg, holdout=holdout, model=model, checkpoint_dir=ck_dir)
    except TrainingDiverged as e:
        log.error("%s", e)
        out.add(save_checkpoint(ck_dir / "last_good.npz", e.model, {"diverged": True}))
        write_log_csv(out.root / "log.csv", e.log)
        out.add(out.root / "log.csv")
        out.write()
        return 1
    out.add_tree(ck_dir)
    out.add(save_checkpoint(out.root / "final.npz", res.model, {"epochs": cfg.epochs}))
    write_log_csv(out.root / "log.csv", res.log)
    out.add(out.root / "log.csv")
    restored_dir = out.root / "restored"
    save_dataset(res.restored, restored_dir)
    out.add_tree(restored_dir)
    out.write()
    return 0


def _render_targets(o: dict):
    """(name, intrinsics, pose, near, far) for every requested view."""
    if o["orbit"] is not None:
        if o["orbit"] < 1:
            raise ValidationError("--orbit needs at least one pose")
        n = o["size"]
        f = 0.5 * n / np.tan(0.5 * np.deg2rad(o["fov"]))
        intr = CameraIntrinsics(f, f, n / 2.0, n / 2.0, n, n)
        poses = orbit_poses(o["orbit"], o["radius"], o["elevation"])
        return [(f"orbit_{i:03d}.png", intr, p, o["near"], o["far"]) for i, p in enumerate(poses)]
    if o["manifest"] is None:
        raise ValidationError("render needs --manifest or --orbit")
    ds = load_dataset(o["manifest"])
    return [(f"view_{i:03d}.png", ds.intrinsics, v.pose, ds.near, ds.far) for i, v in enumerate(ds.views)]


def cmd_render(o: dict) -> int:
    model, _ = load_checkpoint(o["checkpoint"])
    sampling = sampling_from(o)
    out = Outputs(Path(o["out"]), "render", o)
    for name, intr, pose, near, far in _render_targets(o):
        img = render_image(model, intr, pose, near, far, sampling)
        Image.fromarray(img).save(out.root / name)
        out.add(out.root / name)
        if o["ray_debug"]:
            ro, rd = camera_rays(intr, pose, np.array([intr.height // 2]), np.array([intr.width // 2]))
            _, _, state = render_rays(model, ro, rd, near, far, sampling.deterministic(), keep_state=True)
            st = state.get("fine", state["coarse"])
            path = out.root / name.replace(".png", "_rays.csv")
            write_ray_debug_csv(path, st["t"], st["result"].weights)
            out.add(path)
    out.write()
    return 0


def _read_images(path: str) -> list:
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.png"))
        if not files:
            raise ValidationError(f"no PNG files in {p}")
        return [np.asarray(Image.open(f).convert("RGB")) for f in files]
    return list(load_dataset(p).images)


def cmd_eval(o: dict) -> int:
    preds = _read_images(o["pred"])
    gts = _read_images(o["gt"])
    if len(preds) != len(gts):
        raise ValidationError(f"image counts differ: {len(preds)} predicted vs {len(gts)} ground truth")
    masks = None
    if o["masks_from"]:
        masks = load_dataset(o["masks_from"]).masks
        if masks is None or len(masks) != len(gts):
            raise ValidationError("mask manifest must carry one mask per view")
    rep = evaluate_views(preds, gts, masks, REGIONS)
    out = Outputs(Path(o["out"]), "eval", o)
    path = out.root / "eval.csv"
    write_eval_csv(path, [(o["scene"], o["setting"], rep[r]) for r in REGIONS if r in rep])
    out.add(path)
    for r in REGIONS:
        if r in rep:
            log.info("%-14s PSNR %.3f", r, rep[r].psnr)
    out.write()
    return 0


def cmd_heatmap(o: dict) -> int:
    ds = load_dataset(o["manifest"])
    H, W = ds.intrinsics.height, ds.intrinsics.width
    grid = split_patches(W, H, o["patch_unit"])
    weights, budgets = pere.budgets_for_views(ds.images, grid, o["n_p"], o["w_min"], not o["no_pere"])
    out = Outputs(Path(o["out"]), "heatmap", o)
    for i, (w, b) in enumerate(zip(weights, budgets)):
        png = out.root / f"heatmap_{i:03d}.png"
        Image.fromarray(pere.heatmap(b, grid)).save(png)
        out.add(png)
        csv_path = out.root / f"budget_{i:03d}.csv"
        pere.write_budget_csv(csv_path, w, b)
        out.add(csv_path)
    out.write()
    return 0


HANDLERS = {"toy": cmd_toy, "mask": cmd_mask, "train": cmd_train, "render": cmd_render,
            "eval": cmd_eval, "heatmap": cmd_heatmap}


def main(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    verbose = args.pop("verbose", False)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve_options(command, args)
        return HANDLERS[command](opts)
    except ValidationError as e:
        log.error("%s", e)
        return 2
    except (OSError, NumericError, FloatingPointError) as e:
        log.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
