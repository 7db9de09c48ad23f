"""Masked-region PSNR as the PIRE stage count t varies on a fixed ray budget."""
from pathlib import Path

from toy_common import base_parser, clean_scene, replace, run, toy_config

from nerf_mir.metrics import write_eval_csv


def main():
    p = base_parser(__doc__)
    p.add_argument("--stages", type=int, nargs="+", default=[1, 3, 5])
    args = p.parse_args()
    clean = clean_scene(args)
    cfg = toy_config(args)
    rows = []
    for t in args.stages:
        # keep alpha below 1 for any t: the default increment tops out at 0.5 for t = 5
        da = min(cfg.delta_alpha, 0.5 / max(t - 1, 1))
        rep = run(clean, replace(cfg, stages=t, delta_alpha=da), args.level, args.mask_unit,
                  args.mask_seed, f"t={t}")
        rows += [("toy", f"t{t}", r) for r in rep.values()]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_eval_csv(out / "stage_sweep.csv", rows)


if __name__ == "__main__":
    main()
