"""Gradient-scale tables, closed-form generator gradients, and CSV/SVG emission."""

from __future__ import annotations

import csv
import io
import json
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, central_difference
from .inference import GradMode, build_path, predict_eps, run_inference
from .schedules import NoiseSchedule, coeff_table

GRAD_SCALE_COLUMNS = ("step_index", "t", "a", "b", "prod_a", "inv_alpha", "grad_scale_drtune", "grad_scale_adt")


@dataclass
class ConstantPredictor:
    """Prediction independent of the latent; isolates the linear path of a sampler."""

    d: int = 1
    params: dict = None
    n_classes: int = 1
    null_token: bool = False

    def __post_init__(self):
        if self.params is None:
            self.params = {"c": np.full((1, self.d), 0.25)}

    null_index = 0

    def check_cond(self, cond):
        return np.asarray(cond, dtype=int)

    def context(self, tape, nodes, cond):
        return None

    def forward(self, tape, nodes, x, t, ctx):
        n = tape.shape(x)[0]
        return tape.matmul(tape.constant(np.ones((n, 1))), nodes["c"])


def latent_adjoints(sched: NoiseSchedule, sampler: str, grad_mode, generator=None, x_init=None, cond=0):
    """dL/dx_{t_i} for L = sum(x0) along the full path, by reverse-mode autodiff.

    Returns an (m+1, N, d) array indexed by step; row m is the input latent.
    """
    generator = generator if generator is not None else ConstantPredictor()
    if x_init is None:
        x_init = np.full((1, generator.d), 0.5)
    tape = Tape()
    x = tape.parameter(np.asarray(x_init, dtype=np.float64), name="x_init")
    path = build_path(sched, sched.m, grad_mode, K=0)
    res = run_inference(generator, x, path, np.broadcast_to(cond, (len(x_init),)), sched, tape, sampler)
    loss = tape.sum(res.x0)
    adj = tape.adjoints(loss, [res.latents[i] for i in range(sched.m + 1)])
    return np.stack([adj[res.latents[i]] for i in range(sched.m + 1)])


def gradient_scale_report(sched: NoiseSchedule, sampler: str) -> list[dict]:
    """Per-step coefficients, the telescoped product, and measured gradient scales.

    The measured columns come from autodiff through a latent-independent
    predictor, so they depend only on the schedule and sampler.
    """
    a, b = coeff_table(sampler, sched)
    prod = np.cumprod(a)
    drtune = latent_adjoints(sched, sampler, GradMode.DRTUNE)
    adt = latent_adjoints(sched, sampler, GradMode.ADT)
    rows = []
    for i in range(sched.m + 1):
        al = sched.alpha[i]
        rows.append({
            "step_index": i,
            "t": float(sched.t[i]),
            "a": float(a[i]),
            "b": float(b[i]),
            "prod_a": float(prod[i]),
            "inv_alpha": float(1.0 / al) if al > 0 else math.inf,
            "grad_scale_drtune": float(drtune[i].reshape(-1)[0]),
            "grad_scale_adt": float(adt[i].reshape(-1)[0]),
        })
    return rows


def closed_form_generator_grad(generator, sched, sampler, x_init, paths, cond, adv_grad, lam, target, step=1e-6):
    """Gradient of ``L_adv(x0) + lam * mse(eps_bar, target)`` assembled step by step.

    ``adv_grad`` is dL_adv/dx0. Each step i in S plus the start step
    contributes ``b_i * adv_grad . d eps(x_i, t_i)/d theta``, the per-step
    Jacobian products being taken by central differences with the latent
    held fixed. Returns a dict keyed like ``generator.params``.
    """
    x_init = np.asarray(x_init, dtype=np.float64)
    n = x_init.shape[0]
    paths = [paths] * n if not isinstance(paths, (list, tuple)) else list(paths)
    cond = np.broadcast_to(np.asarray(cond, dtype=int), (n,))
    free = [build_path(sched, p.start, GradMode.NO_GRAD, 0, cfg_scale=p.cfg_scale) for p in paths]
    res = run_inference(generator, x_init, free, cond, sched, None, sampler)
    latents = {i: res.tape.value(node) for i, node in res.latents.items()}
    _, b_tab = coeff_table(sampler, sched)
    cfg_scale = paths[0].cfg_scale
    starts = np.array([p.start for p in paths])

    def eps_value(params, x, i):
        tape = Tape()
        nodes = {k: tape.constant(v) for k, v in params.items()}
        ctx = generator.context(tape, nodes, cond)
        ctx_null = generator.context(tape, nodes, np.full(n, generator.null_index)) if cfg_scale != 1.0 else None
        return tape.value(predict_eps(tape, generator, nodes, tape.constant(x), sched.t[i], ctx, ctx_null, cfg_scale))

    def objective(params):
        total = 0.0
        for i in range(int(starts.max()), 0, -1):
            rows = np.array([i == p.start or (i < p.start and i in p.trainable_set) for p in paths])
            if rows.any():
                eps = eps_value(params, latents[i], i)
                total += float(np.sum(b_tab[i] * adv_grad[rows] * eps[rows]))
        # idle rows still hold x_init, so the start prediction reads it directly
        eps_bar = np.zeros_like(x_init)
        for s in np.unique(starts):
            eps_bar[starts == s] = eps_value(params, x_init, int(s))[starts == s]
        return total + lam * float(np.mean((eps_bar - target) ** 2))

    out = {}
    for name, value in generator.params.items():
        def f(v, name=name):
            params = dict(generator.params)
            params[name] = v
            return objective(params)

        out[name] = central_difference(f, value, step)
    return out


# CSV / SVG emission


def write_csv(path, rows: list[dict], columns=None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in r.items()})


def read_csv(path) -> list[dict]:
    """Rows with numeric fields converted (ints stay ints)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))

    def conv(v):
        try:
            return int(v)
        except ValueError:
            return float(v)

    return [{k: conv(v) for k, v in r.items()} for r in rows]


def write_samples_csv(path, points: np.ndarray, labels: np.ndarray) -> None:
    d = points.shape[1]
    cols = [f"x{j}" for j in range(d)] + ["label"]
    rows = [{**{f"x{j}": float(p[j]) for j in range(d)}, "label": int(lab)} for p, lab in zip(points, labels)]
    write_csv(path, rows, cols)


def read_samples_csv(path) -> tuple[np.ndarray, np.ndarray]:
    rows = read_csv(path)
    d = len(rows[0]) - 1 if rows else 0
    pts = np.array([[r[f"x{j}"] for j in range(d)] for r in rows], dtype=np.float64).reshape(len(rows), d)
    return pts, np.array([r["label"] for r in rows], dtype=int)


SVG_W, SVG_H, PAD = 800, 600, 60
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def _scaler(lo, hi, out_lo, out_hi):
    span = hi - lo if hi > lo else 1.0
    return lambda v: out_lo + (v - lo) / span * (out_hi - out_lo)


def _svg_root(title):
    root = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", viewBox=f"0 0 {SVG_W} {SVG_H}",
                      width=str(SVG_W), height=str(SVG_H))
    ET.SubElement(root, "rect", x="0", y="0", width=str(SVG_W), height=str(SVG_H), fill="white")
    t = ET.SubElement(root, "text", x=str(SVG_W // 2), y="30", attrib={"text-anchor": "middle"})
    t.text = title
    return root


def _finish(root, payload, path):
    meta = ET.SubElement(root, "metadata", id="data")
    meta.text = json.dumps(payload)
    ET.SubElement(root, "rect", x=str(PAD), y=str(PAD), width=str(SVG_W - 2 * PAD), height=str(SVG_H - 2 * PAD),
                  fill="none", stroke="black")
    ET.ElementTree(root).write(path, encoding="unicode")


def write_curve_svg(path, x, series: dict, title="", log_y=True) -> None:
    """Line plot of ``series`` (label -> y values) against ``x``; log-scale y by default."""
    x = np.asarray(x, dtype=np.float64)
    ys = {k: np.asarray(v, dtype=np.float64) for k, v in series.items()}
    tr = (lambda v: np.log10(np.maximum(v, 1e-300))) if log_y else (lambda v: v)
    finite = np.concatenate([tr(v)[np.isfinite(tr(v))] for v in ys.values()]) if ys else np.zeros(1)
    sx = _scaler(x.min(), x.max(), PAD, SVG_W - PAD)
    sy = _scaler(finite.min(), finite.max(), SVG_H - PAD, PAD)
    root = _svg_root(title)
    for j, (label, v) in enumerate(ys.items()):
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, tr(v)) if np.isfinite(b))
        ET.SubElement(root, "polyline", points=pts, fill="none", stroke=PALETTE[j % len(PALETTE)],
                      attrib={"data-label": label})
    _finish(root, {"kind": "curve", "log_y": log_y, "x": x.tolist(),
                   "series": {k: [float(u) if np.isfinite(u) else None for u in v] for k, v in ys.items()}}, path)


def write_scatter_svg(path, clouds: dict, title="") -> None:
    """Scatter overlay of 2-D point clouds (label -> (N, >=2) array); first two coordinates."""
    arrs = {k: np.asarray(v, dtype=np.float64)[:, :2] for k, v in clouds.items()}
    allp = np.concatenate(list(arrs.values())) if arrs else np.zeros((1, 2))
    lo, hi = allp.min(0), allp.max(0)
    sx = _scaler(lo[0], hi[0], PAD, SVG_W - PAD)
    sy = _scaler(lo[1], hi[1], SVG_H - PAD, PAD)
    root = _svg_root(title)
    for j, (label, p) in enumerate(arrs.items()):
        g = ET.SubElement(root, "g", fill=PALETTE[j % len(PALETTE)], attrib={"data-label": label, "fill-opacity": "0.5"})
        for a, b in p:
            ET.SubElement(g, "circle", cx=f"{sx(a):.2f}", cy=f"{sy(b):.2f}", r="1.5")
    _finish(root, {"kind": "scatter", "clouds": {k: v.tolist() for k, v in arrs.items()}}, path)


def read_svg(path) -> dict:
    """Parse an emitted SVG; returns its embedded data after checking the drawn elements match it."""
    root = ET.parse(path).getroot()
    ns = {"s": "http://www.w3.org/2000/svg"}
    if root.get("viewBox") != f"0 0 {SVG_W} {SVG_H}":
        raise ValueError(f"unexpected viewBox {root.get('viewBox')!r}")
    meta = root.find("s:metadata", ns)
    if meta is None or not meta.text:
        raise ValueError("SVG carries no data block")
    data = json.loads(meta.text)
    if data["kind"] == "curve":
        lines = {el.get("data-label"): el for el in root.findall("s:polyline", ns)}
        if set(lines) != set(data["series"]):
            raise ValueError("polylines do not match the data block")
        for label, vals in data["series"].items():
            if len(lines[label].get("points").split()) != sum(v is not None for v in vals):
                raise ValueError(f"series {label!r}: point count mismatch")
    else:
        groups = {el.get("data-label"): el for el in root.findall("s:g", ns)}
        for label, pts in data["clouds"].items():
            if label not in groups or len(groups[label].findall("s:circle", ns)) != len(pts):
                raise ValueError(f"cloud {label!r}: circle count mismatch")
    return data


def rows_to_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
