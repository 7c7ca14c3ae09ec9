"""Diffusion-loss weight sweep against FT on the shared protocol."""

import argparse
from pathlib import Path

import numpy as np

from adtlab.ablation import ablation_run
from adtlab.config import TrainConfig, load_config
from adtlab.diagnostics import write_csv, write_curve_svg
from adtlab.trainer import datasets_for

from compare_presets import load_base


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", type=Path)
    ap.add_argument("--lambdas", default="0.1,0.3,0.5,0.7,1.0")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--out", type=Path, default=Path("runs/lambda"))
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else TrainConfig()
    args.out.mkdir(parents=True, exist_ok=True)
    base = load_base(cfg, args.out)
    _, train, test = datasets_for(cfg)
    seeds = [int(s) for s in args.seeds.split(",")]
    ft = np.median([ablation_run("ft", cfg, s, base, train, test)[2].gfid_cond for s in seeds])
    print(f"ft median gfid_cond {ft:.4f}")
    rows = []
    for lam in (float(v) for v in args.lambdas.split(",")):
        med = np.median([ablation_run("adt", cfg.replace(lam=lam), s, base, train, test)[2].gfid_cond for s in seeds])
        rows.append({"lambda": lam, "median_gfid_cond": med, "ft_median": ft})
        print(f"lambda {lam:4.2f}  median {med:.4f}  {'beats' if med < ft else 'loses to'} ft", flush=True)
    write_csv(args.out / "lambda.csv", rows)
    write_curve_svg(args.out / "lambda.svg", [r["lambda"] for r in rows],
                    {"adt": [r["median_gfid_cond"] for r in rows], "ft": [ft] * len(rows)}, title="median per-class gFID")


if __name__ == "__main__":
    main()
