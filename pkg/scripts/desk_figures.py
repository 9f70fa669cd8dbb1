"""Glimpse-count curves, glimpse-position maps and the decoder layer sweep for a checkpoint.

    python3 scripts/desk_figures.py runs/ablation/model.ckpt --out runs/figures
"""
import argparse
from pathlib import Path

import numpy as np

from ame import evaluate as ev
from ame.data import synthesize
from ame.glimpse import GlimpseSpec
from ame.model import load_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--out", default="runs/figures")
    ap.add_argument("--n", type=int, default=200, help="held-out images")
    ap.add_argument("--glimpse-px", type=int, default=16)
    ap.add_argument("--glimpses", type=int, default=12)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    model = load_checkpoint(args.checkpoint)
    c = model.config
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = synthesize("shapes", args.n, c.image_h, c.image_w, 1)
    spec = GlimpseSpec(glimpse_px=args.glimpse_px, num_glimpses=args.glimpses)
    f = spec.footprint_side(c.patch_size)

    curves = []
    for sel in ev.SELECTOR_ORDER:
        reports = ev.run_episodes(model, data, spec, sel, args.seed)
        for row in ev.glimpse_sweep(model, data, spec, sel, range(args.glimpses + 1), args.seed, reports=reports):
            curves.append({"selector": sel, **row})
        occ, first = ev.average_glimpse_map(reports, f)
        ev.write_grid_pgm(out / f"glimpse_map_{sel}.pgm", occ, c.patch_size, 1.0)
        ev.write_grid_pgm(out / f"first_glimpse_{sel}.pgm", first, c.patch_size, 1.0)
        print(sel, "first-glimpse cells hit:", int(np.count_nonzero(first)))
    ev.write_tsv(out / "sweep_glimpses.tsv", curves)

    layers = ev.layer_sweep(model, data, spec, args.seed)
    ev.write_tsv(out / "sweep_layers.tsv", layers)
    for row in layers:
        print(f"decoder layer {row['layer']}: rmse {row['rmse']:.5f}")


if __name__ == "__main__":
    main()
