"""Train a desk-scale model with AME glimpses and compare selectors on held-out images.

    python3 scripts/run_ablation.py --out runs/ablation
    python3 scripts/run_ablation.py --out runs/quick --n 200 --epochs 5 --seeds 2
"""
import argparse
import json
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from ame import evaluate as ev
from ame.data import CorpusSpec, synthesize, train_val_split
from ame.glimpse import GlimpseSpec
from ame.model import MaeModel, ModelConfig, save_checkpoint
from ame.train import TrainConfig, fit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--n", type=int, default=1000, help="training corpus size")
    ap.add_argument("--held-out", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--warmup", type=int, default=5)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--glimpse-px", type=int, default=16)
    ap.add_argument("--glimpses", type=int, default=8)
    ap.add_argument("--train-selector", default="attention")
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(args.threads):
        train, val = train_val_split(synthesize("shapes", args.n, 64, 64, 0), CorpusSpec(n=args.n))
        test = synthesize("shapes", args.held_out, 64, 64, 1)
        spec = GlimpseSpec(glimpse_px=args.glimpse_px, num_glimpses=args.glimpses)
        model = MaeModel(ModelConfig(), seed=0)
        tcfg = TrainConfig(epochs=args.epochs, warmup_epochs=args.warmup, lr_max=args.lr, lr_min=1e-6,
                           patience=args.epochs)
        t0 = time.perf_counter()
        fit(model, train, val, tcfg, spec, args.train_selector, history_path=out / "history.jsonl",
            on_epoch=lambda r: print(json.dumps(r), flush=True))
        print(f"trained in {time.perf_counter() - t0:.0f}s")
        save_checkpoint(model, out / "model.ckpt")
        rows = ev.ablate_selectors(model, test, spec, list(range(args.seeds)))
    ev.write_tsv(out / "ablation.tsv", rows)
    ev.write_json(out / "ablation.json", rows)
    rnd = next(r["per_seed"] for r in rows if r["selector"] == "random")
    for r in rows:
        wins = sum(a < b for a, b in zip(r["per_seed"], rnd))
        print(f"{r['selector']:>9}  {spec.regime}  mean {r['metric']} {r['mean']:.5f}  beats random {wins}/{len(rnd)}")


if __name__ == "__main__":
    main()
