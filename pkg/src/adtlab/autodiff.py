"""Dense reverse-mode autodiff on a tape, with an explicit stop-gradient op.

Nodes are integer ids into an append-only :class:`Tape`. Values are float64
numpy arrays computed eagerly at record time. Rank-2 inputs to ``dot``,
``l2_norm`` and ``cosine`` are treated as batches of row vectors.

Loss convention: ``mse`` is the sum of squared residuals divided by the
element count.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

OP_KINDS = (
    "constant",
    "parameter",
    "add",
    "scale",
    "mul",
    "matmul",
    "tanh",
    "relu",
    "sum",
    "mse",
    "dot",
    "l2_norm",
    "cosine",
    "stop_gradient",
    "affine_combine",
)

_NORM_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite entries")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    # only scalar-with-tensor broadcasting is allowed
    return np.asarray(grad.sum()).reshape(shape)


def _row_expand(coef, like: np.ndarray):
    """Per-row coefficient vector (N,) -> (N, 1) so it scales rows of ``like``."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    if like.ndim != 2 or coef.shape != (like.shape[0],):
        raise ShapeError(f"affine_combine: coefficient shape {coef.shape} vs value {like.shape}")
    return coef[:, None]


class Tape:
    """Append-only computation record.

    Forward values are computed when a node is recorded. ``backward`` sweeps the
    tape in reverse and returns gradients for parameter nodes only.
    """

    def __init__(self):
        self.ops: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.values: list[np.ndarray] = []
        self.attrs: list[dict] = []
        self.needs_grad: list[bool] = []
        self.param_names: dict[int, str] = {}

    def __len__(self):
        return len(self.ops)

    def value(self, node: int) -> np.ndarray:
        return self.values[node]

    def shape(self, node: int) -> tuple:
        return self.values[node].shape

    def _check(self, *nodes: int):
        for n in nodes:
            if not isinstance(n, (int, np.integer)) or n < 0 or n >= len(self.ops):
                raise IndexError(f"invalid node id {n!r}")

    def _push(self, op: str, parents: tuple, value: np.ndarray, **attrs) -> int:
        if op in ("constant", "stop_gradient"):
            needs = False
        elif op == "parameter":
            needs = True
        else:
            needs = any(self.needs_grad[p] for p in parents)
        self.ops.append(op)
        self.parents.append(parents)
        self.values.append(value)
        self.attrs.append(attrs)
        self.needs_grad.append(needs)
        return len(self.ops) - 1

    def record(self, op: str, parents=(), inputs=None, **attrs) -> int:
        """Generic entry point: dispatch ``op`` by name."""
        if op not in OP_KINDS:
            raise ValueError(f"unknown op kind {op!r}")
        if op in ("constant", "parameter"):
            return getattr(self, op)(inputs, **attrs)
        return getattr(self, op)(*parents, **attrs)

    # leaves

    def constant(self, value) -> int:
        return self._push("constant", (), _as_array(value))

    def parameter(self, value, name: str | None = None) -> int:
        node = self._push("parameter", (), _as_array(value))
        self.param_names[node] = name if name is not None else f"p{node}"
        return node

    # elementwise and linear ops

    def _binary_shapes(self, op, a, b):
        sa, sb = self.shape(a), self.shape(b)
        if sa != sb and sa != () and sb != ():
            raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")

    def add(self, a: int, b: int) -> int:
        self._check(a, b)
        self._binary_shapes("add", a, b)
        return self._push("add", (a, b), self.values[a] + self.values[b])

    def scale(self, a: int, c: float) -> int:
        self._check(a)
        return self._push("scale", (a,), float(c) * self.values[a], c=float(c))

    def mul(self, a: int, b: int) -> int:
        self._check(a, b)
        self._binary_shapes("mul", a, b)
        return self._push("mul", (a, b), self.values[a] * self.values[b])

    def matmul(self, a: int, b: int) -> int:
        self._check(a, b)
        sa, sb = self.shape(a), self.shape(b)
        if len(sa) != 2 or len(sb) not in (1, 2) or sa[1] != sb[0]:
            raise ShapeError(f"matmul: incompatible shapes {sa} and {sb}")
        return self._push("matmul", (a, b), self.values[a] @ self.values[b])

    def tanh(self, a: int) -> int:
        self._check(a)
        return self._push("tanh", (a,), np.tanh(self.values[a]))

    def relu(self, a: int) -> int:
        self._check(a)
        return self._push("relu", (a,), np.maximum(self.values[a], 0.0))

    # reductions

    def sum(self, a: int) -> int:
        self._check(a)
        return self._push("sum", (a,), np.asarray(self.values[a].sum()))

    def mse(self, a: int, b: int) -> int:
        self._check(a, b)
        if self.shape(a) != self.shape(b):
            raise ShapeError(f"mse: incompatible shapes {self.shape(a)} and {self.shape(b)}")
        r = self.values[a] - self.values[b]
        return self._push("mse", (a, b), np.asarray(np.mean(r * r)))

    def _rowwise_shapes(self, op, a, b=None):
        sa = self.shape(a)
        if len(sa) not in (1, 2):
            raise ShapeError(f"{op}: expected rank 1 or 2, got {sa}")
        if b is not None and self.shape(b) != sa:
            raise ShapeError(f"{op}: incompatible shapes {sa} and {self.shape(b)}")

    def dot(self, a: int, b: int) -> int:
        self._check(a, b)
        self._rowwise_shapes("dot", a, b)
        return self._push("dot", (a, b), np.sum(self.values[a] * self.values[b], axis=-1))

    def l2_norm(self, a: int) -> int:
        self._check(a)
        self._rowwise_shapes("l2_norm", a)
        return self._push("l2_norm", (a,), np.sqrt(np.sum(self.values[a] ** 2, axis=-1)))

    def cosine(self, a: int, b: int) -> int:
        """Cosine similarity; rows with a (near) zero norm score 0 and carry no gradient."""
        self._check(a, b)
        self._rowwise_shapes("cosine", a, b)
        va, vb = self.values[a], self.values[b]
        na = np.sqrt(np.sum(va * va, axis=-1))
        nb = np.sqrt(np.sum(vb * vb, axis=-1))
        degenerate = (na < _NORM_FLOOR) | (nb < _NORM_FLOOR)
        denom = np.where(degenerate, 1.0, na * nb)
        out = np.where(degenerate, 0.0, np.sum(va * vb, axis=-1) / denom)
        return self._push("cosine", (a, b), np.asarray(out), degenerate=degenerate, na=na, nb=nb)

    # gradient control

    def stop_gradient(self, a: int) -> int:
        self._check(a)
        return self._push("stop_gradient", (a,), self.values[a])

    def affine_combine(self, x: int, sg_x: int, eps: int, a, b) -> int:
        """``x + (a - 1) * sg_x + b * eps``; ``a``, ``b`` are scalars or per-row vectors."""
        self._check(x, sg_x, eps)
        vx = self.values[x]
        if self.shape(sg_x) != vx.shape or self.shape(eps) != vx.shape:
            raise ShapeError(
                f"affine_combine: shapes {vx.shape}, {self.shape(sg_x)}, {self.shape(eps)}"
            )
        ca, cb = _row_expand(a, vx), _row_expand(b, vx)
        value = vx + (ca - 1.0) * self.values[sg_x] + cb * self.values[eps]
        return self._push("affine_combine", (x, sg_x, eps), value, a=ca, b=cb)

    # reverse sweep

    def backward(self, loss: int) -> dict[int, np.ndarray]:
        """Gradients of a scalar ``loss`` for every parameter node recorded before it."""
        adj = self._sweep(loss)
        grads = {}
        for node in self.param_names:
            if node <= loss:
                grads[node] = adj[node] if adj[node] is not None else np.zeros_like(self.values[node])
        return grads

    def adjoints(self, loss: int, nodes) -> dict[int, np.ndarray]:
        """d loss / d node for arbitrary recorded nodes (zero where no path carries gradient)."""
        adj = self._sweep(loss)
        return {n: adj[n] if n <= loss and adj[n] is not None else np.zeros_like(self.values[n]) for n in nodes}

    def _sweep(self, loss: int) -> list:
        self._check(loss)
        if self.values[loss].size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {self.shape(loss)}")
        adj: list[np.ndarray | None] = [None] * (loss + 1)
        adj[loss] = np.ones_like(self.values[loss])

        def acc(node, g):
            if not self.needs_grad[node]:
                return
            adj[node] = g if adj[node] is None else adj[node] + g

        for n in range(loss, -1, -1):
            g = adj[n]
            if g is None:
                continue
            op = self.ops[n]
            ps = self.parents[n]
            v = self.values
            if op in ("constant", "parameter", "stop_gradient"):
                continue
            if op == "add":
                acc(ps[0], _unbroadcast(g, v[ps[0]].shape))
                acc(ps[1], _unbroadcast(g, v[ps[1]].shape))
            elif op == "scale":
                acc(ps[0], self.attrs[n]["c"] * g)
            elif op == "mul":
                a, b = ps
                acc(a, _unbroadcast(g * v[b], v[a].shape))
                acc(b, _unbroadcast(g * v[a], v[b].shape))
            elif op == "matmul":
                a, b = ps
                if v[b].ndim == 1:
                    acc(a, np.outer(g, v[b]))
                else:
                    acc(a, g @ v[b].T)
                acc(b, v[a].T @ g)
            elif op == "tanh":
                acc(ps[0], g * (1.0 - v[n] ** 2))
            elif op == "relu":
                acc(ps[0], g * (v[ps[0]] > 0.0))
            elif op == "sum":
                acc(ps[0], np.full(v[ps[0]].shape, float(g)))
            elif op == "mse":
                a, b = ps
                r = v[a] - v[b]
                d = (2.0 / r.size) * float(g) * r
                acc(a, d)
                acc(b, -d)
            elif op == "dot":
                a, b = ps
                ge = g[..., None] if v[a].ndim == 2 else g
                acc(a, ge * v[b])
                acc(b, ge * v[a])
            elif op == "l2_norm":
                a = ps[0]
                safe = np.where(v[n] < _NORM_FLOOR, 1.0, v[n])
                coef = np.where(v[n] < _NORM_FLOOR, 0.0, g / safe)
                acc(a, (coef[..., None] if v[a].ndim == 2 else coef) * v[a])
            elif op == "cosine":
                a, b = ps
                at = self.attrs[n]
                deg, na, nb = at["degenerate"], at["na"], at["nb"]
                na_s = np.where(deg, 1.0, na)
                nb_s = np.where(deg, 1.0, nb)
                gc = np.where(deg, 0.0, g)
                c = v[n]
                if v[a].ndim == 2:
                    gc, c, na_s, nb_s = gc[:, None], c[:, None], na_s[:, None], nb_s[:, None]
                acc(a, gc * (v[b] / (na_s * nb_s) - c * v[a] / na_s**2))
                acc(b, gc * (v[a] / (na_s * nb_s) - c * v[b] / nb_s**2))
            elif op == "affine_combine":
                x, sg_x, eps = ps
                at = self.attrs[n]
                acc(x, g)
                acc(sg_x, _unbroadcast((at["a"] - 1.0) * g, v[sg_x].shape))
                acc(eps, _unbroadcast(at["b"] * g, v[eps].shape))
            else:  # pragma: no cover
                raise ValueError(f"no backward rule for {op}")
        return adj

    def grads_by_name(self, grads: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
        return {self.param_names[k]: g for k, g in grads.items()}


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    params: np.ndarray,
    analytic: np.ndarray,
    step: float = 1e-5,
) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``."""
    if step <= 0:
        raise ValueError("step must be positive")
    params = np.array(params, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(params.shape)
    numeric = central_difference(f, params, step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def central_difference(f: Callable[[np.ndarray], float], params: np.ndarray, step: float = 1e-5):
    params = np.array(params, dtype=np.float64)
    out = np.zeros_like(params)
    flat, gflat = params.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(params)
        flat[i] = orig - step
        fm = f(params)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite objective at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * step)
    return out
