"""Gradient-scale curves for every sampler/schedule pair.

Writes runs/grad/<sampler>-<schedule>.{csv,svg} and prints the largest scale
each regime reaches.
"""

import argparse
from pathlib import Path

from adtlab.diagnostics import GRAD_SCALE_COLUMNS, gradient_scale_report, write_csv, write_curve_svg
from adtlab.schedules import make_schedule

PAIRS = [("ddim", "linear-beta"), ("ddim", "cosine"), ("dpm1", "linear-beta"), ("dpm1", "cosine"),
         ("flow", "flow-linear")]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--out", type=Path, default=Path("runs/grad"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    print(f"{'sampler':8s} {'schedule':12s} {'max DRTune':>12s} {'max ADT':>8s}")
    for sampler, kind in PAIRS:
        rows = gradient_scale_report(make_schedule(kind, args.steps), sampler)
        stem = args.out / f"{sampler}-{kind}"
        write_csv(stem.with_suffix(".csv"), rows, GRAD_SCALE_COLUMNS)
        write_curve_svg(stem.with_suffix(".svg"), [r["step_index"] for r in rows],
                        {"DRTune": [r["grad_scale_drtune"] for r in rows], "ADT": [r["grad_scale_adt"] for r in rows]},
                        title=f"{sampler} / {kind}, m={args.steps}")
        print(f"{sampler:8s} {kind:12s} {max(r['grad_scale_drtune'] for r in rows):12.4g} "
              f"{max(r['grad_scale_adt'] for r in rows):8.4g}")


if __name__ == "__main__":
    main()
