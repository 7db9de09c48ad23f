import csv
import json
import math

import numpy as np
import pytest
from PIL import Image

from nerf_mir.cli import main, resolve_options
from nerf_mir.metrics import evaluate_views
from nerf_mir.scene_data import ValidationError, load_dataset
from nerf_mir.toy_scenes import build_scene, two_primitive_spec

TINY_TRAIN = ["--epochs", "5", "--patch-unit", "4", "--batch", "256", "--n-coarse", "8", "--n-fine", "8",
              "--L-pos", "2", "--L-dir", "1", "--width", "16"]


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    assert main(["toy", "--out", str(root / "clean"), "--views", "3", "--size", "16"]) == 0
    assert main(["mask", "--manifest", str(root / "clean" / "manifest.json"), "--out", str(root / "masked"),
                 "--level", "0.25", "--unit", "4", "--seed", "3"]) == 0
    return root


def read_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_toy_outputs(scene):
    ds = load_dataset(scene / "clean" / "manifest.json")
    assert len(ds.views) == 3 and ds.images.shape == (3, 16, 16, 3)
    doc = json.loads((scene / "clean" / "outputs.json").read_text())
    assert "manifest.json" in doc["files"] and "images/view_000.png" in doc["files"]


def test_mask_level_zero_identity(scene, tmp_path):
    assert main(["mask", "--manifest", str(scene / "clean" / "manifest.json"), "--out", str(tmp_path),
                 "--level", "0"]) == 0
    for i in range(3):
        a = np.asarray(Image.open(scene / "clean" / "images" / f"view_{i:03d}.png"))
        b = np.asarray(Image.open(tmp_path / "images" / f"view_{i:03d}.png"))
        assert a.tobytes() == b.tobytes()


def test_mask_deterministic(scene, tmp_path):
    args = ["mask", "--manifest", str(scene / "clean" / "manifest.json"), "--level", "0.25",
            "--shape", "square", "--style", "random", "--unit", "4", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for sub in ("images", "masks"):
        for p in sorted((tmp_path / "a" / sub).iterdir()):
            assert p.read_bytes() == (tmp_path / "b" / sub / p.name).read_bytes()
    assert (tmp_path / "a" / "outputs.json").read_text().replace("/a", "") == \
        (tmp_path / "b" / "outputs.json").read_text().replace("/b", "")


def test_mask_round_fraction(tmp_path):
    assert main(["toy", "--out", str(tmp_path / "c"), "--views", "2", "--size", "40"]) == 0
    assert main(["mask", "--manifest", str(tmp_path / "c" / "manifest.json"), "--out", str(tmp_path / "m"),
                 "--level", "0.5", "--shape", "round", "--unit", "10"]) == 0
    masks = load_dataset(tmp_path / "m" / "manifest.json").masks
    quantum = 10 * 10 / (40 * 40)
    assert abs(masks.mean() - 0.5 * math.pi / 4) <= quantum


def test_mask_bad_spec_exit(scene, tmp_path):
    rc = main(["mask", "--manifest", str(scene / "clean" / "manifest.json"), "--out", str(tmp_path),
               "--level", "1.5"])
    assert rc == 2
    rc = main(["mask", "--manifest", str(scene / "clean" / "manifest.json"), "--out", str(tmp_path),
               "--unit", "99"])
    assert rc == 2


def test_missing_manifest_exit(tmp_path):
    assert main(["mask", "--manifest", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 1


def test_train_zero_epochs(scene, tmp_path):
    rc = main(["train", "--manifest", str(scene / "masked" / "manifest.json"), "--out", str(tmp_path),
               "--epochs", "0"])
    assert rc == 0
    assert (tmp_path / "checkpoints" / "init.npz").exists()
    assert "checkpoints/init.npz" in json.loads((tmp_path / "outputs.json").read_text())["files"]


def test_train_full_stages_and_alpha(scene, tmp_path):
    rc = main(["train", "--manifest", str(scene / "masked" / "manifest.json"), "--out", str(tmp_path)]
              + TINY_TRAIN)
    assert rc == 0
    rows = read_csv(tmp_path / "log.csv")
    assert [int(r["stage"]) for r in rows] == [0, 1, 2, 3, 4]
    assert [float(r["alpha"]) for r in rows] == [0, 0.125, 0.25, 0.375, 0.5]
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == \
        [f"stage_{j}.npz" for j in range(1, 6)]
    restored = load_dataset(tmp_path / "restored" / "manifest.json")
    masked = load_dataset(scene / "masked" / "manifest.json")
    m = masked.masks.astype(bool)
    assert restored.images[~m].tobytes() == masked.images[~m].tobytes()


def test_train_ablation_baseline(scene, tmp_path):
    rc = main(["train", "--manifest", str(scene / "masked" / "manifest.json"), "--out", str(tmp_path),
               "--no-pere", "--no-pire"] + TINY_TRAIN)
    assert rc == 0
    rows = read_csv(tmp_path / "log.csv")
    assert {r["stage"] for r in rows} == {"0"} and {r["alpha"] for r in rows} == {"0.0"}
    opts = json.loads((tmp_path / "outputs.json").read_text())["options"]
    assert opts["no_pere"] and opts["no_pire"]


def test_train_deterministic(scene, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--manifest", str(scene / "masked" / "manifest.json"),
                     "--out", str(tmp_path / name), "--epochs", "5", "--stages", "5"] + TINY_TRAIN[2:]) == 0
    assert (tmp_path / "a" / "log.csv").read_bytes() == (tmp_path / "b" / "log.csv").read_bytes()
    for p in sorted((tmp_path / "a" / "restored" / "images").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / "restored" / "images" / p.name).read_bytes()


@pytest.fixture(scope="module")
def checkpoint(scene, tmp_path_factory):
    out = tmp_path_factory.mktemp("ck")
    assert main(["train", "--manifest", str(scene / "masked" / "manifest.json"), "--out", str(out),
                 "--epochs", "0", "--L-pos", "2", "--L-dir", "1", "--width", "16"]) == 0
    return out / "checkpoints" / "init.npz"


def test_render_manifest(scene, checkpoint, tmp_path):
    rc = main(["render", "--checkpoint", str(checkpoint), "--out", str(tmp_path),
               "--manifest", str(scene / "clean" / "manifest.json"), "--n-coarse", "8", "--n-fine", "8",
               "--ray-debug"])
    assert rc == 0
    assert sorted(p.name for p in tmp_path.glob("view_*.png")) == [f"view_{i:03d}.png" for i in range(3)]
    assert len(list(tmp_path.glob("view_*_rays.csv"))) == 3
    img = np.asarray(Image.open(tmp_path / "view_000.png"))
    assert img.shape == (16, 16, 3) and img.dtype == np.uint8


def test_render_orbit_naming(checkpoint, tmp_path):
    rc = main(["render", "--checkpoint", str(checkpoint), "--out", str(tmp_path), "--orbit", "8",
               "--size", "8", "--n-coarse", "4", "--n-fine", "4"])
    assert rc == 0
    assert sorted(p.name for p in tmp_path.glob("*.png")) == [f"orbit_{i:03d}.png" for i in range(8)]


def test_render_missing_checkpoint(tmp_path):
    assert main(["render", "--checkpoint", str(tmp_path / "nope.npz"), "--out", str(tmp_path),
                 "--orbit", "2"]) != 0


def test_eval_identical(scene, tmp_path):
    img_dir = scene / "clean" / "images"
    rc = main(["eval", "--pred", str(img_dir), "--gt", str(scene / "clean" / "manifest.json"),
               "--masks-from", str(scene / "masked" / "manifest.json"), "--out", str(tmp_path)])
    assert rc == 0
    rows = read_csv(tmp_path / "eval.csv")
    assert [r["region"] for r in rows] == ["full", "masked_only", "unmasked_only"]
    assert all(r["psnr"] == "inf" for r in rows)


def test_eval_noisy_matches_metrics(scene, tmp_path):
    clean = load_dataset(scene / "clean" / "manifest.json").images
    rng = np.random.default_rng(0)
    noisy = np.clip(clean.astype(int) + rng.integers(-20, 21, clean.shape), 0, 255).astype(np.uint8)
    (tmp_path / "noisy").mkdir()
    for i, img in enumerate(noisy):
        Image.fromarray(img).save(tmp_path / "noisy" / f"v{i}.png")
    rc = main(["eval", "--pred", str(tmp_path / "noisy"), "--gt", str(scene / "clean" / "manifest.json"),
               "--out", str(tmp_path / "e")])
    assert rc == 0
    row = read_csv(tmp_path / "e" / "eval.csv")[0]
    ref = evaluate_views(list(noisy), list(clean))["full"]
    assert float(row["psnr"]) == ref.psnr and float(row["ssim"]) == ref.ssim


def test_eval_count_mismatch(scene, tmp_path):
    (tmp_path / "two").mkdir()
    for i in range(2):
        Image.fromarray(np.zeros((16, 16, 3), np.uint8)).save(tmp_path / "two" / f"{i}.png")
    rc = main(["eval", "--pred", str(tmp_path / "two"), "--gt", str(scene / "clean" / "manifest.json"),
               "--out", str(tmp_path / "e")])
    assert rc == 2


def _manifest_for(tmp_path, image):
    from nerf_mir.scene_data import CameraIntrinsics, Dataset, Pose, View, save_dataset
    h, w = image.shape[:2]
    ds = Dataset(CameraIntrinsics(w, w, w / 2, h / 2, w, h), [View(image, Pose.identity())], 1.0, 2.0)
    return save_dataset(ds, tmp_path / "hm_in")


def test_heatmap_constant_and_half_textured(tmp_path):
    m = _manifest_for(tmp_path, np.full((20, 40, 3), 96, np.uint8))
    assert main(["heatmap", "--manifest", str(m), "--out", str(tmp_path / "flat"), "--unit", "10"]) == 0
    hm = np.asarray(Image.open(tmp_path / "flat" / "heatmap_000.png"))
    assert len(np.unique(hm.reshape(-1, 3), axis=0)) == 1

    img = np.full((20, 40, 3), 96, np.uint8)
    img[:, 20:] = np.random.default_rng(0).integers(0, 256, (20, 20, 3))
    m = _manifest_for(tmp_path / "t", img)
    assert main(["heatmap", "--manifest", str(m), "--out", str(tmp_path / "half"), "--unit", "10"]) == 0
    rows = read_csv(tmp_path / "half" / "budget_000.csv")
    n = np.array([int(r["N_k"]) for r in rows]).reshape(2, 4)
    assert n[:, 2:].mean() > n[:, :2].mean()


def test_heatmap_unit_too_large(tmp_path):
    m = _manifest_for(tmp_path, np.zeros((8, 8, 3), np.uint8))
    assert main(["heatmap", "--manifest", str(m), "--out", str(tmp_path / "o"), "--unit", "9"]) != 0


def test_config_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"level": 0.1, "unit": 5, "seed": 1, "shape": "round"}))
    base = {"config": str(cfg), "manifest": "m.json", "out": "o"}
    o = resolve_options("mask", dict(base), environ={})
    assert (o["level"], o["unit"], o["seed"], o["shape"]) == (0.1, 5, 1, "round")
    env = {"NERF_MIR_LEVEL": "0.2", "NERF_MIR_UNIT": "6"}
    o = resolve_options("mask", dict(base), environ=env)
    assert (o["level"], o["unit"], o["seed"]) == (0.2, 6, 1)
    o = resolve_options("mask", dict(base, level="0.3"), environ=env)
    assert (o["level"], o["unit"]) == (0.3, 6)
    # defaults apply when nothing else is given
    assert resolve_options("mask", {"manifest": "m", "out": "o"}, environ={})["fill"] == (96, 96, 96)


def test_config_rejects_unknown_keys(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"levle": 0.1}))
    with pytest.raises(ValidationError, match="levle"):
        resolve_options("mask", {"config": str(cfg), "manifest": "m", "out": "o"}, environ={})


def test_missing_required_option():
    assert main(["mask", "--manifest", "x.json"]) == 2
