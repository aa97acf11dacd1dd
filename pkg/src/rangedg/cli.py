"""Command-line entry point: ``rangedg <verb> ...``.

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
4 numeric abort during training.
"""

from __future__ import annotations

import argparse
import colorsys
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as C
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import DataError, Manifest, ManifestEntry, SceneSet, load_entries, read_kitti, to_batch, write_kitti
from .metrics import condition_report
from .net import Model, ModelConfig, NumericAbort, train
from .projection import ProjectionConfig, project
from .weather import CLASS_NAMES, corrupt_preset, generate_scene

log = logging.getLogger("rangedg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "RANGEDG_THREADS"

# (name, split_stems, use_ref_branch, use_gas, use_rdc)
ABLATION_VARIANTS = [
    ("baseline", False, False, False, False),
    ("G", True, False, False, False),
    ("G+GAS", True, False, True, False),
    ("G+R", True, True, False, False),
    ("G+R+RDC", True, True, False, True),
    ("full", True, True, True, True),
]
SINGLE_MODULE = ("G+GAS", "G+R+RDC")


# datasets ------------------------------------------------------------------

def _dataset_dir(root: Path, split: str) -> Path:
    """Accept either a dataset directory or a ``gen-data`` root holding ``split/``."""
    root = Path(root)
    if (root / "manifest.json").exists():
        return root
    if (root / split / "manifest.json").exists():
        return root / split
    raise DataError(f"no manifest.json in {root} or {root / split}")


def generate_datasets(cfg: C.RunConfig, out: Path) -> tuple[Manifest, Manifest]:
    out = Path(out)
    sc = cfg.scene
    meta = {"scene": C.dataclasses.asdict(sc), "projection": C.dataclasses.asdict(cfg.projection),
            "seeds": C.dataclasses.asdict(cfg.seeds)}
    manifests = []
    for split, count in (("train", sc.train_scenes), ("eval", sc.eval_scenes)):
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        man = Manifest(meta={**meta, "split": split})
        conditions = ["clean"] + (list(cfg.weather.conditions) if split == "eval" else [])
        for i in range(count):
            seed = C.derive_seed(cfg.seeds.data, "scene", split, i)
            pc = generate_scene(sc.build(seed, cfg.projection))
            for cond in conditions:
                if cond == "clean":
                    out_pc, s = pc, seed
                else:
                    s = C.derive_seed(cfg.seeds.weather, cond, split, i)
                    out_pc = corrupt_preset(pc, cond, s)
                entry = ManifestEntry(f"{cond}_{i:04d}", split, cond, s, len(out_pc))
                write_kitti(out_pc, d / entry.bin, d / entry.label)
                man.entries.append(entry)
            log.info("%s scene %d/%d", split, i + 1, count)
        man.save(d)
        manifests.append(man)
    return manifests[0], manifests[1]


def load_train_set(data: Path):
    d = _dataset_dir(data, "train")
    man = Manifest.load(d)
    bad = sorted({e.condition for e in man.entries if e.condition != "clean"})
    if bad:
        raise DataError(f"training manifest {d} contains non-clean scenes ({', '.join(bad)}); "
                        "training is restricted to clean-weather data")
    if not man.entries:
        raise DataError(f"training manifest {d} lists no scenes")
    return load_entries(d, man.entries)


def load_eval_sets(data: Path, conditions=None) -> dict:
    d = _dataset_dir(data, "eval")
    man = Manifest.load(d)
    order = []
    for e in man.entries:
        if e.condition not in order:
            order.append(e.condition)
    if "clean" in order:
        order.remove("clean")
        order.insert(0, "clean")
    if conditions is not None:
        order = [c for c in order if c in conditions]
    sets = {c: load_entries(d, man.select(condition=c)) for c in order}
    for c, clouds in sets.items():
        if any(pc.labels is None for pc in clouds):
            raise DataError(f"eval condition {c!r} has scenes without label files")
    if not sets:
        raise DataError(f"no evaluation scenes in {d}")
    return sets


# train / eval ----------------------------------------------------------------

def _proj_to_dict(p: ProjectionConfig) -> dict:
    return {"width": p.width, "height": p.height, "fov_up": p.fov_up, "fov_down": p.fov_down}


def _proj_from_dict(d: dict) -> ProjectionConfig:
    return ProjectionConfig(d["width"], d["height"], d["fov_up"], d["fov_down"])


def train_model(cfg: C.RunConfig, clouds, model_cfg: ModelConfig | None = None, seed: int | None = None):
    seed = cfg.seeds.train if seed is None else seed
    proj = cfg.projection.build()
    tcfg = cfg.train.build(seed)
    data = SceneSet(clouds, proj, seed=seed)
    dtype = np.float64 if tcfg.precision == "float64" else np.float32
    model = Model(model_cfg or cfg.model.build(), seed=seed, dtype=dtype)
    result = train(model, data, tcfg)
    meta = {"projection": _proj_to_dict(proj), "seed": seed, "epochs": tcfg.epochs,
            "steps": result.steps, "history": result.history, "initial": result.initial}
    return Checkpoint(model, data.stats, meta), result


def write_loss_log(path: Path, history: dict) -> None:
    keys = list(history)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch"] + keys)
        for i in range(len(history[keys[0]])):
            w.writerow([i + 1] + [repr(float(history[k][i])) for k in keys])


def evaluate_checkpoint(ckpt: Checkpoint, sets: dict, batch_size: int = 4):
    proj = _proj_from_dict(ckpt.train["projection"])
    return condition_report(ckpt.model, sets, proj, ckpt.input_stats, CLASS_NAMES, batch_size)


# images ------------------------------------------------------------------------

def _gray(a: np.ndarray, valid: np.ndarray, hi: float | None = None) -> Image.Image:
    a = np.where(valid, a, 0.0).astype(np.float64)
    hi = hi if hi is not None else (a[valid].max() if valid.any() else 1.0)
    scaled = np.clip(a / (hi if hi > 0 else 1.0), 0, 1)
    return Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L")


def _palette(n: int) -> list[int]:
    """``n`` well-spread colours; index 255 is black (no data)."""
    pal = []
    for i in range(256):
        if i < n:
            rgb = colorsys.hsv_to_rgb((i * 0.618034) % 1.0, 0.75, 0.95)
            pal += [int(round(c * 255)) for c in rgb]
        else:
            pal += [0, 0, 0]
    return pal


def write_projection(pc, proj: ProjectionConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    img = project(pc, proj)
    _gray(img.channels[0], img.valid).save(out / "depth.png")
    _gray(img.channels[4], img.valid, hi=1.0).save(out / "intensity.png")
    Image.fromarray(img.valid.astype(np.uint8) * 255, mode="L").save(out / "valid.png")
    np.save(out / "channels.npy", img.channels)
    np.save(out / "valid.npy", img.valid)
    d = img.diagnostics
    summary = {"points": len(pc), "valid_pixels": int(img.valid.sum()), "height": proj.height,
               "width": proj.width, "zero_range": d.zero_range, "out_of_fov": d.out_of_fov,
               "occluded": len(pc) - d.dropped - int(img.valid.sum())}
    (out / "projection.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def inspect_scan(ckpt: Checkpoint, pc, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    model = ckpt.model
    proj = _proj_from_dict(ckpt.train["projection"])
    batch, images = to_batch([pc], proj, ckpt.input_stats)
    model.last_gas_weight = model.last_retrieval = None
    model.forward(replace(batch, labels=None).astype(model.dtype))
    valid = batch.mask[0]
    written = []
    if model.last_gas_weight is not None:
        _gray(model.last_gas_weight[0], valid, hi=1.0).save(out / "gas_weight.png")
        written.append("gas_weight.png")
    with open(out / "layer_stats.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tensor", "role", "shape", "mean", "std", "min", "max", "l2"])
        for name, p in model.params.items():
            v = p.value.astype(np.float64)
            w.writerow([name, p.role, "x".join(map(str, v.shape)), repr(float(v.mean())), repr(float(v.std())),
                        repr(float(v.min())), repr(float(v.max())), repr(float(np.sqrt((v * v).sum())))])
    written.append("layer_stats.csv")
    ret = model.last_retrieval
    if ret is not None:
        att = ret.attention[0]
        idx = att.argmax(axis=0)
        t = att.shape[0]
        pimg = Image.fromarray(np.where(valid, idx, 255).astype(np.uint8), mode="P")
        pimg.putpalette(_palette(min(t, 255)))
        pimg.save(out / "memory_index.png")
        mem = model.params["rdc.memory"].value.astype(np.float64)
        counts = np.bincount(idx[valid], minlength=t)
        mean_att = att[:, valid].mean(axis=1) if valid.any() else np.zeros(t)
        with open(out / "memory_stats.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "norm", "mean", "std", "argmax_pixels", "mean_attention"])
            for i in range(t):
                w.writerow([i, repr(float(np.linalg.norm(mem[i]))), repr(float(mem[i].mean())), repr(float(mem[i].std())),
                            int(counts[i]), repr(float(mean_att[i]))])
        written += ["memory_index.png", "memory_stats.csv"]
    return {"valid_pixels": int(valid.sum()), "written": written}


# ablation ------------------------------------------------------------------------

def ablation_config(base: ModelConfig, split, ref, gas, rdc) -> ModelConfig:
    return replace(base, split_stems=split, use_ref_branch=ref, use_gas=gas, use_rdc=rdc)


def run_ablation(cfg: C.RunConfig, train_clouds, eval_sets: dict, out: Path, seeds=None) -> dict:
    seeds = list(cfg.seeds.ablation if seeds is None else seeds)
    base = cfg.model.build()
    conds = list(eval_sets)
    runs = []
    for name, *toggles in ABLATION_VARIANTS:
        mcfg = ablation_config(base, *toggles)
        for seed in seeds:
            t0 = time.perf_counter()
            ckpt, _ = train_model(cfg, train_clouds, mcfg, seed)
            rep = evaluate_checkpoint(ckpt, eval_sets)
            row = {"variant": name, "seed": seed, **{c: rep.row(c).miou for c in conds},
                   "corrupted_avg": rep.corrupted_average(), "params": ckpt.model.num_params(),
                   "seconds": time.perf_counter() - t0}
            runs.append(row)
            log.info("ablation %s seed %d: corrupted avg %.4f", name, seed, row["corrupted_avg"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation_runs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["variant", "seed"] + conds + ["corrupted_avg", "params", "seconds"])
        w.writeheader()
        w.writerows(runs)
    table = []
    for name, split, ref, gas, rdc in ABLATION_VARIANTS:
        mine = [r for r in runs if r["variant"] == name]
        row = {"variant": name, "split_stems": int(split), "ref_branch": int(ref), "gas": int(gas),
               "rdc": int(rdc)}
        for c in conds + ["corrupted_avg"]:
            row[c] = float(np.mean([r[c] for r in mine]))
        table.append(row)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, list(table[0]))
        w.writeheader()
        for row in table:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    full = next(r for r in table if r["variant"] == "full")
    checks = []
    for row in table:
        if row["variant"] == "full":
            continue
        checks.append({"variant": row["variant"], "single_module": row["variant"] in SINGLE_MODULE,
                       "variant_corrupted_avg": row["corrupted_avg"], "full_corrupted_avg": full["corrupted_avg"],
                       "full_not_worse": bool(full["corrupted_avg"] >= row["corrupted_avg"])})
    flags = {"seeds": seeds, "conditions": conds, "checks": checks,
             "monotonic_single_module": all(c["full_not_worse"] for c in checks if c["single_module"]),
             "flagged": [c["variant"] for c in checks if c["single_module"] and not c["full_not_worse"]]}
    (out / "ablation_flags.json").write_text(json.dumps(flags, indent=1, sort_keys=True) + "\n")
    return {"table": table, "runs": runs, "flags": flags}


# command handlers ------------------------------------------------------------------

def _config(args) -> C.RunConfig:
    cfg = C.load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out(args, cfg: C.RunConfig) -> Path:
    return Path(args.out or cfg.output_dir)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    tr, ev = generate_datasets(cfg, out)
    print(f"wrote {len(tr.entries)} training and {len(ev.entries)} evaluation scans to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    clouds = load_train_set(Path(args.data))
    out.mkdir(parents=True, exist_ok=True)
    try:
        ckpt, result = train_model(cfg, clouds)
    except NumericAbort as e:
        diag = {"error": "numeric_abort", "epoch": e.epoch, "batch": e.batch, "scene_ids": list(map(int, e.ids)),
                "losses": {k: repr(v) for k, v in e.losses.items()}}
        (out / "numeric_abort.json").write_text(json.dumps(diag, indent=1, sort_keys=True) + "\n")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(out / "checkpoint.bin", ckpt)
    write_loss_log(out / "loss_log.csv", result.history)
    (out / "config.yaml").write_text(C.dump_config(cfg))
    print(f"wrote {out / 'checkpoint.bin'} ({ckpt.model.num_params()} parameters, {result.steps} steps)")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    ckpt = load_checkpoint(Path(args.checkpoint))
    sets = load_eval_sets(Path(args.data))
    rep = evaluate_checkpoint(ckpt, sets, cfg.eval.batch_size)
    rep.write(out)
    for r in rep.rows:
        print(f"{r.condition:>6s}  mIoU {100 * r.miou:6.2f}")
    print(f"corrupted average mIoU {100 * rep.corrupted_average():6.2f}")
    return EXIT_OK


def cmd_project(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    pc = read_kitti(Path(args.scan), Path(args.label) if args.label else None)
    summary = write_projection(pc, cfg.projection.build(), out)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    ckpt = load_checkpoint(Path(args.checkpoint))
    pc = read_kitti(Path(args.scan))
    info = inspect_scan(ckpt, pc, out)
    print(json.dumps(info, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    train_clouds = load_train_set(Path(args.data))
    sets = load_eval_sets(Path(args.data))
    try:
        res = run_ablation(cfg, train_clouds, sets, out)
    except NumericAbort as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    for row in res["table"]:
        print(f"{row['variant']:>8s}  corrupted avg {100 * row['corrupted_avg']:6.2f}")
    if res["flags"]["flagged"]:
        print("flagged (full model below single-module variant): " + ", ".join(res["flags"]["flagged"]))
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = C.load_config(args.config_file)
    if not args.quiet:
        sys.stdout.write(C.dump_config(cfg))
    print(f"{args.config_file}: ok", file=sys.stderr)
    return EXIT_OK


def cmd_schema(args) -> int:
    text = C.schema_json()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults apply when omitted)")
    common.add_argument("--out", help="output directory (default: output_dir from the config)")
    common.add_argument("--seed", type=int, help="base seed overriding the config's seed streams")
    common.add_argument("--quiet", action="store_true", help="only log warnings")

    p = argparse.ArgumentParser(prog="rangedg", description="Weather-robust range-view LiDAR segmentation.")
    sub = p.add_subparsers(dest="verb", required=True)
    s = sub.add_parser("gen-data", parents=[common], help="generate clean training and corrupted eval scans")
    s.set_defaults(func=cmd_gen_data)
    s = sub.add_parser("train", parents=[common], help="train on a clean-only dataset")
    s.add_argument("--data", required=True, help="training dataset (or gen-data root)")
    s.set_defaults(func=cmd_train)
    s = sub.add_parser("eval", parents=[common], help="per-condition mIoU report for a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="evaluation dataset (or gen-data root)")
    s.set_defaults(func=cmd_eval)
    s = sub.add_parser("project", parents=[common], help="dump a scan's range image")
    s.add_argument("scan", help="KITTI .bin scan")
    s.add_argument("--label", help="matching .label file")
    s.set_defaults(func=cmd_project)
    s = sub.add_parser("inspect", parents=[common], help="dump GAS weights and memory usage for a scan")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("scan", help="KITTI .bin scan")
    s.set_defaults(func=cmd_inspect)
    s = sub.add_parser("ablate", parents=[common], help="train and evaluate the module ablation grid")
    s.add_argument("--data", required=True, help="gen-data root with train/ and eval/")
    s.set_defaults(func=cmd_ablate)
    s = sub.add_parser("validate", parents=[common], help="validate a configuration file")
    s.add_argument("config_file")
    s.set_defaults(func=cmd_validate)
    s = sub.add_parser("schema", parents=[common], help="print the configuration JSON schema")
    s.set_defaults(func=cmd_schema)
    return p


def _thread_limit():
    from threadpoolctl import threadpool_limits

    n = os.environ.get(THREADS_ENV)
    if not n:
        return None
    try:
        return threadpool_limits(int(n))
    except ValueError:
        raise C.ConfigError(f"{THREADS_ENV} must be an integer, got {n!r}") from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except C.ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
