"""Baseline vs full model on clean training scenes, evaluated under fog/rain/snow.

    python3 scripts/run_generalisation.py --out runs/generalisation [--width 256 --epochs 20 --seeds 0 1 2]
"""

import argparse
import csv
import json
import logging
import time
from pathlib import Path

import numpy as np

from rangedg import cli
from rangedg import config as C


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/generalisation")
    ap.add_argument("--width", type=int, default=256)
    ap.add_argument("--channels", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--train-scenes", type=int, default=64)
    ap.add_argument("--eval-scenes", type=int, default=16)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    out = Path(args.out)
    cfg = C.from_dict({"projection": {"width": args.width},
                       "scene": {"train_scenes": args.train_scenes, "eval_scenes": args.eval_scenes},
                       "model": {"channels": args.channels}, "train": {"epochs": args.epochs}})
    cli.generate_datasets(cfg, out / "data")
    clouds = cli.load_train_set(out / "data")
    sets = cli.load_eval_sets(out / "data")
    variants = {"baseline": cli.ablation_config(cfg.model.build(), False, False, False, False),
                "full": cfg.model.build()}
    rows = []
    for seed in args.seeds:
        for name, mcfg in variants.items():
            t0 = time.perf_counter()
            ckpt, _ = cli.train_model(cfg, clouds, mcfg, seed)
            rep = cli.evaluate_checkpoint(ckpt, sets)
            row = {"variant": name, "seed": seed, **{r.condition: 100 * r.miou for r in rep.rows},
                   "corrupted_avg": 100 * rep.corrupted_average(), "seconds": time.perf_counter() - t0}
            rows.append(row)
            print(json.dumps({k: (round(v, 2) if isinstance(v, float) else v) for k, v in row.items()}))
    with open(out / "generalisation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for name in variants:
        mine = [r for r in rows if r["variant"] == name]
        print(f"{name:>8s}  clean {np.mean([r['clean'] for r in mine]):6.2f}  "
              f"corrupted avg {np.mean([r['corrupted_avg'] for r in mine]):6.2f}")


if __name__ == "__main__":
    main()
