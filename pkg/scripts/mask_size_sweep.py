"""Full-image PSNR of the full method as the mask unit varies (patch unit fixed)."""
from pathlib import Path

from toy_common import base_parser, clean_scene, run, toy_config

from nerf_mir.metrics import write_eval_csv


def main():
    p = base_parser(__doc__)
    p.add_argument("--units", type=int, nargs="+", default=[4, 8, 16])
    args = p.parse_args()
    clean = clean_scene(args)
    cfg = toy_config(args)
    rows, full = [], {}
    for u in args.units:
        rep = run(clean, cfg, args.level, u, args.mask_seed, f"mask unit {u}")
        full[u] = rep["full"].psnr
        rows += [("toy", f"unit{u}", r) for r in rep.values()]
    print(f"spread of full-image PSNR: {max(full.values()) - min(full.values()):.2f} dB")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_eval_csv(out / "mask_size_sweep.csv", rows)


if __name__ == "__main__":
    main()
