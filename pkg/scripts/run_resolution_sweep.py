"""Full model trained and evaluated at several range-image widths.

    python3 scripts/run_resolution_sweep.py --out runs/resolution [--widths 128 256 512]
"""

import argparse
import csv
import logging
import time
from pathlib import Path

from rangedg import cli
from rangedg import config as C


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/resolution")
    ap.add_argument("--widths", type=int, nargs="+", default=[128, 256, 512])
    ap.add_argument("--channels", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--train-scenes", type=int, default=16)
    ap.add_argument("--eval-scenes", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    out = Path(args.out)
    base = {"scene": {"train_scenes": args.train_scenes, "eval_scenes": args.eval_scenes},
            "model": {"channels": args.channels}, "train": {"epochs": args.epochs}}
    cli.generate_datasets(C.from_dict(base).with_seed(args.seed), out / "data")
    clouds = cli.load_train_set(out / "data")
    sets = cli.load_eval_sets(out / "data")
    rows = []
    for w in args.widths:
        cfg = C.from_dict({**base, "projection": {"width": w}}).with_seed(args.seed)
        t0 = time.perf_counter()
        ckpt, _ = cli.train_model(cfg, clouds)
        rep = cli.evaluate_checkpoint(ckpt, sets)
        row = {"width": w, **{r.condition: 100 * r.miou for r in rep.rows},
               "corrupted_avg": 100 * rep.corrupted_average(), "seconds": time.perf_counter() - t0}
        rows.append(row)
        print(f"W={w:4d}  clean {row['clean']:6.2f}  corrupted avg {row['corrupted_avg']:6.2f}  {row['seconds']:.0f}s")
    with open(out / "resolution.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, list(rows[0]))
        wr.writeheader()
        wr.writerows(rows)


if __name__ == "__main__":
    main()
