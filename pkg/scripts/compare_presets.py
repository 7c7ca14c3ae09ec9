"""ADT against FT and the ablation presets over several seeds.

Pretrains (or loads) a base, fine-tunes each preset per seed, and prints the
per-class gFID table with medians. Results land in runs/compare/results.csv.
"""

import argparse
from pathlib import Path

import numpy as np

from adtlab.ablation import PRESETS, ablation_run, evaluate
from adtlab.checkpoint import load_checkpoint, save_checkpoint
from adtlab.config import TrainConfig, load_config
from adtlab.diagnostics import write_csv
from adtlab.trainer import datasets_for, pretrain


def load_base(cfg, out):
    path = out / "base.ckpt"
    if path.exists():
        return load_checkpoint(path).state
    base = pretrain(cfg, datasets_for(cfg)[0])
    save_checkpoint(path, base, cfg)
    return base


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", type=Path)
    ap.add_argument("--presets", default=",".join(PRESETS))
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--out", type=Path, default=Path("runs/compare"))
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else TrainConfig()
    args.out.mkdir(parents=True, exist_ok=True)
    base = load_base(cfg, args.out)
    _, train, test = datasets_for(cfg)
    print(f"base  gfid_cond {evaluate(base.generator, cfg, test).gfid_cond:.4f}")
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = []
    for preset in args.presets.split(","):
        vals = []
        for seed in seeds:
            _, _, rep = ablation_run(preset, cfg, seed, base, train, test)
            rows.append({"preset": preset, "seed": seed, "gfid_cond": rep.gfid_cond, "gfid": rep.gfid, "mmd": rep.mmd})
            vals.append(rep.gfid_cond)
        print(f"{preset:16s} " + " ".join(f"{v:.4f}" for v in vals) + f"  median {np.median(vals):.4f}", flush=True)
    write_csv(args.out / "results.csv", rows)


if __name__ == "__main__":
    main()
