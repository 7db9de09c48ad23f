"""Component ablation on the toy scene: NeRF, +PERE, +DW+PERE, +DW+PIRE, full."""
from pathlib import Path

from toy_common import base_parser, clean_scene, replace, run, toy_config

from nerf_mir.metrics import write_eval_csv
from nerf_mir.pire import ablation

ROWS = [
    ("NeRF", dict(pere_on=False, pire_on=False)),
    ("NeRF+PERE", dict(pere_on=True, pire_on=False)),
    ("NeRF+L_DW+PERE", dict(pere_on=True, pire_on=False, dw=True)),
    ("NeRF+L_DW+PIRE", dict(pere_on=False, pire_on=True)),
    ("NeRF-MIR", dict(pere_on=True, pire_on=True)),
]


def main():
    args = base_parser(__doc__).parse_args()
    clean = clean_scene(args)
    base = toy_config(args)
    rows = []
    for name, switches in ROWS:
        rep = run(clean, ablation(base, **switches), args.level, args.mask_unit, args.mask_seed, name)
        rows += [("toy", name, r) for r in rep.values()]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_eval_csv(out / "ablation.csv", rows)


if __name__ == "__main__":
    main()
