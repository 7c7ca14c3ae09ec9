"""Command-line entry point: ``adtlab <subcommand> [flags]``.

Every TrainConfig field is a ``--kebab-case`` flag (``--lambda`` for the
diffusion-loss weight). Outputs go under ``--out-dir``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import ablation, diagnostics
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ALIASES, TrainConfig, load_config, save_config
from .data import make_dataset, ring_mixture
from .trainer import datasets_for, finetune, fresh_finetune_state, pretrain, schedule_for

SCHEDULE_NAMES = {"linear": "linear-beta", "linear-beta": "linear-beta", "cosine": "cosine",
                  "flow": "flow-linear", "flow-linear": "flow-linear"}


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _config_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("config overrides")
    inverse = {v: k for k, v in ALIASES.items()}
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue
        flag = "--" + inverse.get(f.name, f.name).replace("_", "-")
        kind = type(f.default)
        g.add_argument(flag, dest=f"cfg_{f.name}", type=_bool if kind is bool else kind, default=None,
                       metavar=kind.__name__.upper())


def _common(p: argparse.ArgumentParser, config=True):
    p.add_argument("--out-dir", type=Path, default=None, help="run directory (created if missing)")
    p.add_argument("--seed", type=int, default=None)
    if config:
        p.add_argument("--config", type=Path, default=None, help="flat key = value config file")
        p.add_argument("--preset", choices=sorted(ablation.PRESETS), default=None)
        _config_flags(p)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="adtlab", description="Adversarial diffusion tuning on toy data.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the base generator on the unshifted mixture")
    _common(p)

    p = sub.add_parser("finetune", help="fine-tune a base checkpoint on the shifted mixture")
    _common(p)
    p.add_argument("--base", type=Path, default=None, help="base checkpoint (pretrained on the fly if absent)")

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    _common(p, config=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--n", type=int, default=2000)

    p = sub.add_parser("eval", help="print a metrics report for a checkpoint as JSON")
    _common(p, config=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--against", choices=("test", "train", "pretrain"), default="test")

    p = sub.add_parser("analyze-gradients", help="per-step gradient-scale table and plot")
    p.add_argument("--out-dir", type=Path, default=None)
    p.add_argument("--sampler", choices=("ddim", "dpm1", "flow"), default="ddim")
    p.add_argument("--schedule", choices=sorted(SCHEDULE_NAMES), default="linear")
    p.add_argument("--steps", type=int, default=50)

    p = sub.add_parser("ablate", help="fine-tune several presets over several seeds")
    _common(p)
    p.add_argument("--base", type=Path, default=None)
    p.add_argument("--presets", default="adt,ft,no-diff-loss,drtune-backprop,scalar-heads")
    p.add_argument("--seeds", default="0,1,2,3,4")
    return ap


def resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    if getattr(args, "preset", None):
        cfg = ablation.apply_preset(cfg, args.preset)
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return cfg.replace(**overrides) if overrides else cfg


def _out(args, default: str) -> Path:
    out = args.out_dir if args.out_dir is not None else Path("runs") / default
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _base_state(args, cfg: TrainConfig, out: Path):
    if args.base is not None:
        return load_checkpoint(args.base).state
    cached = out / "base.ckpt"
    if cached.exists():
        return load_checkpoint(cached).state
    pre_cfg = cfg.replace(seed=0)
    state = pretrain(pre_cfg, datasets_for(pre_cfg)[0])
    save_checkpoint(cached, state, pre_cfg)
    return state


def _emit_samples(out: Path, generator, cfg, labels, reference=None):
    xs = ablation.generate(generator, cfg, labels)
    diagnostics.write_samples_csv(out / "samples.csv", xs, labels)
    clouds = {"samples": xs} if reference is None else {"reference": reference, "samples": xs}
    diagnostics.write_scatter_svg(out / "samples.svg", clouds, title="samples")
    return xs


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    out = _out(args, f"pretrain-seed{cfg.seed}")
    save_config(cfg, out / "config.toml")
    pre, _, _ = datasets_for(cfg)
    state = pretrain(cfg, pre)
    save_checkpoint(out / "base.ckpt", state, cfg)
    test = make_dataset(cfg.dataset, cfg.n_test, {"spec": pre.spec} if cfg.dataset == "gauss-mixture" else None,
                        0, "test")
    rep = ablation.evaluate(state.generator, cfg, test)
    _write_json(out / "report.json", rep.to_dict())
    _emit_samples(out, state.generator, cfg, test.labels[:2000], test.points[:2000])
    print(json.dumps({"checkpoint": str(out / "base.ckpt"), "gfid": rep.gfid, "gfid_cond": rep.gfid_cond}))
    return 0


def cmd_finetune(args) -> int:
    cfg = resolve_config(args)
    out = _out(args, f"finetune-seed{cfg.seed}")
    save_config(cfg, out / "config.toml")
    base = _base_state(args, cfg, out)
    _, train, test = datasets_for(cfg)
    state = fresh_finetune_state(base, cfg)
    metrics_path, timing_path = out / "metrics.jsonl", out / "timing.jsonl"
    metrics_path.write_text("")
    with open(timing_path, "w") as timing:
        def split_timing(_, m):
            timing.write(json.dumps({"iter": m["iter"], "wall_ms": m.pop("wall_ms")}) + "\n")

        state = _finetune_logged(state, cfg, train, metrics_path, split_timing)
    save_checkpoint(out / "ckpt", state, cfg, metrics_cursor=state.iteration)
    rep = ablation.evaluate(state.generator, cfg, test)
    _write_json(out / "report.json", rep.to_dict())
    _emit_samples(out, state.generator, cfg, test.labels[:2000], test.points[:2000])
    print(json.dumps({"checkpoint": str(out / "ckpt"), "gfid": rep.gfid, "gfid_cond": rep.gfid_cond}))
    return 0


def _finetune_logged(state, cfg, train, metrics_path, split_timing):
    """Fine-tune while routing wall-clock timing away from the deterministic metrics stream."""
    with open(metrics_path, "a") as fh:
        def on_step(st, m):
            split_timing(st, m)
            fh.write(json.dumps(m) + "\n")

        return finetune(state, cfg, train, on_step=on_step)


def cmd_sample(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = ck.config if args.seed is None else ck.config.replace(seed=args.seed)
    out = _out(args, "samples")
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    labels = np.arange(args.n) % ck.state.generator.n_classes
    xs = ablation.generate(ck.state.generator, cfg, labels, seed=ablation.EVAL_SEED + cfg.seed)
    diagnostics.write_samples_csv(out / "samples.csv", xs, labels)
    diagnostics.write_scatter_svg(out / "samples.svg", {"samples": xs}, title="samples")
    print(json.dumps({"samples": str(out / "samples.csv"), "n": int(args.n)}))
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = ck.config
    pre, train, test = datasets_for(cfg)
    if args.against == "pretrain":
        spec = pre.spec if cfg.dataset == "gauss-mixture" else None
        ref = make_dataset(cfg.dataset, cfg.n_test, {"spec": spec} if spec is not None else None, 0, "test")
    else:
        ref = {"test": test, "train": train}[args.against]
    rep = ablation.evaluate(ck.state.generator, cfg, ref)
    text = json.dumps(rep.to_dict(), sort_keys=True)
    if args.out_dir is not None:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        (args.out_dir / "report.json").write_text(text + "\n")
    print(text)
    return 0


def cmd_analyze_gradients(args) -> int:
    from .schedules import make_schedule

    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    out = _out(args, f"grad-{args.sampler}-{args.schedule}-{args.steps}")
    sched = make_schedule(SCHEDULE_NAMES[args.schedule], args.steps)
    rows = diagnostics.gradient_scale_report(sched, args.sampler)
    diagnostics.write_csv(out / "grad_scale.csv", rows, diagnostics.GRAD_SCALE_COLUMNS)
    steps = [r["step_index"] for r in rows]
    diagnostics.write_curve_svg(
        out / "grad_scale.svg", steps,
        {"prod_a (DRTune)": [r["grad_scale_drtune"] for r in rows], "ADT": [r["grad_scale_adt"] for r in rows]},
        title=f"gradient scale, {args.sampler} on {SCHEDULE_NAMES[args.schedule]}, m={args.steps}",
    )
    print(json.dumps({"csv": str(out / "grad_scale.csv"), "svg": str(out / "grad_scale.svg")}))
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    out = _out(args, "ablate")
    try:
        presets = [p.strip() for p in args.presets.split(",") if p.strip()]
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as e:
        raise UsageError(f"bad --seeds: {e}") from None
    for p in presets:
        if p not in ablation.PRESETS:
            raise UsageError(f"unknown preset {p!r}")
    base = _base_state(args, cfg, out)
    _, train, test = datasets_for(cfg)
    summary = {}
    for p in presets:
        for s in seeds:
            run = out / f"{p}-seed{s}"
            run.mkdir(exist_ok=True)
            used, _, rep = ablation.ablation_run(p, cfg, s, base, train, test)
            save_config(used, run / "config.toml")
            _write_json(run / "report.json", rep.to_dict())
            summary.setdefault(p, {})[str(s)] = {"gfid": rep.gfid, "gfid_cond": rep.gfid_cond, "mmd": rep.mmd}
        vals = [v["gfid_cond"] for v in summary[p].values()]
        summary[p]["median_gfid_cond"] = float(np.median(vals))
    _write_json(out / "report.json", summary)
    print(json.dumps({p: summary[p]["median_gfid_cond"] for p in presets}))
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "analyze-gradients": cmd_analyze_gradients,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage text on bad flags
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - single-line reason for any failure
        reason = " ".join(str(e).split()) or type(e).__name__
        print(f"error: {type(e).__name__}: {reason}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
