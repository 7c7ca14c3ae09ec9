"""Discriminator hinge loss against a frozen generator with the diffusion loss removed."""

import argparse
from pathlib import Path

import numpy as np

from adtlab.ablation import block_means, hinge_curve
from adtlab.config import TrainConfig, load_config
from adtlab.diagnostics import write_curve_svg
from adtlab.trainer import datasets_for

from compare_presets import load_base


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", type=Path)
    ap.add_argument("--iters", type=int, default=400)
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--out", type=Path, default=Path("runs/hinge"))
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else TrainConfig()
    args.out.mkdir(parents=True, exist_ok=True)
    base = load_base(cfg, args.out)
    train = datasets_for(cfg)[1]
    curves = np.array([hinge_curve(base, cfg, train, args.iters, s) for s in range(args.runs)])
    med = np.median(curves, axis=0)
    blocks = block_means(med, 4)
    print("block means of the median curve:", np.round(blocks, 4), "decreasing:", bool(np.all(np.diff(blocks) < 0)))
    write_curve_svg(args.out / "hinge.svg", np.arange(1, args.iters + 1), {"median hinge loss": med},
                    title="discriminator hinge loss, lambda = 0, frozen generator", log_y=False)


if __name__ == "__main__":
    main()
