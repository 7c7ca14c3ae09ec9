"""Toy generator, frozen feature backbone, and discriminator head bank.

Parameters live in plain ``dict[str, np.ndarray]`` records. A forward pass
first binds a record onto a tape (as parameter nodes when trainable, as
constants otherwise) and then calls the network on the bound nodes.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape

HEAD_DIM = 64
TIME_SCALE = 1000.0


def bind(tape: Tape, params: dict, trainable: bool, prefix: str = "") -> dict[str, int]:
    if trainable:
        return {k: tape.parameter(v, name=prefix + k) for k, v in params.items()}
    return {k: tape.constant(v) for k, v in params.items()}


def _fan_in(rng, n_in, n_out):
    return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))


def _orthogonal(rng, n_in, n_out, gain=1.0):
    q, r = np.linalg.qr(rng.normal(size=(max(n_in, n_out), min(n_in, n_out))))
    q = q * np.sign(np.diag(r))
    w = q if n_in >= n_out else q.T
    return gain * w[:n_in, :n_out]


def time_embedding(t, dim: int = 16) -> np.ndarray:
    """Sinusoidal embedding of grid positions ``t`` in [0, 1] (scaled by 1000)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) * TIME_SCALE
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def one_hot(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, n))
    out[np.arange(labels.size), labels] = 1.0
    return out


class _Broadcasts:
    """Per-tape cache of ``ones(N, 1)`` constants used to add bias rows."""

    def __init__(self):
        self._key = None
        self._cache = {}

    def ones(self, tape: Tape, n: int) -> int:
        if self._key is not tape:
            self._key, self._cache = tape, {}
        if n not in self._cache:
            self._cache[n] = tape.constant(np.ones((n, 1)))
        return self._cache[n]


def add_bias(tape: Tape, h: int, bias: int, ones: int) -> int:
    return tape.add(h, tape.matmul(ones, bias))


@dataclass
class MLPGenerator:
    """Noise (or velocity) predictor on (x, sinusoidal time, condition embedding).

    ``null_token`` reserves the last vocabulary row for unconditional
    prediction, used by classifier-free guidance.
    """

    d: int
    n_classes: int
    params: dict
    hidden: int = 128
    temb_dim: int = 16
    cond_dim: int = 8
    null_token: bool = False
    _bc: _Broadcasts = field(default_factory=_Broadcasts, repr=False, compare=False)

    @property
    def vocab(self) -> int:
        return self.n_classes + (1 if self.null_token else 0)

    @property
    def null_index(self) -> int:
        if not self.null_token:
            raise ValueError("generator has no null token (CFG disabled)")
        return self.n_classes

    def check_cond(self, cond):
        cond = np.asarray(cond, dtype=int)
        if cond.size and (cond.min() < 0 or cond.max() >= self.vocab):
            raise ValueError(f"condition outside vocabulary 0..{self.vocab - 1}")
        return cond

    def context(self, tape: Tape, nodes: dict, cond) -> int:
        """Condition embedding plus first-layer bias; reused across steps of a path."""
        cond = self.check_cond(cond)
        oh = tape.constant(one_hot(cond, self.vocab))
        ctx = tape.matmul(tape.matmul(oh, nodes["emb"]), nodes["w_c"])
        return add_bias(tape, ctx, nodes["b1"], self._bc.ones(tape, cond.size))

    def forward(self, tape: Tape, nodes: dict, x: int, t, ctx: int) -> int:
        n = tape.shape(x)[0]
        ones = self._bc.ones(tape, n)
        temb = tape.constant(time_embedding(np.broadcast_to(t, (n,)), self.temb_dim))
        h = tape.add(tape.matmul(x, nodes["w_x"]), tape.matmul(temb, nodes["w_t"]))
        h = tape.relu(tape.add(h, ctx))
        h = tape.relu(add_bias(tape, tape.matmul(h, nodes["w2"]), nodes["b2"], ones))
        return add_bias(tape, tape.matmul(h, nodes["w3"]), nodes["b3"], ones)


def init_generator(d, n_classes, rng, hidden=128, temb_dim=16, cond_dim=8, null_token=False):
    if min(d, n_classes, hidden, temb_dim, cond_dim) < 1:
        raise ValueError("generator sizes must be >= 1")
    vocab = n_classes + (1 if null_token else 0)
    params = {
        "emb": rng.normal(0.0, 1.0, size=(vocab, cond_dim)),
        "w_c": _fan_in(rng, cond_dim, hidden),
        "w_x": _fan_in(rng, d, hidden),
        "w_t": _fan_in(rng, temb_dim, hidden),
        "b1": np.zeros((1, hidden)),
        "w2": _fan_in(rng, hidden, hidden),
        "b2": np.zeros((1, hidden)),
        "w3": np.zeros((hidden, d)),
        "b3": np.zeros((1, d)),
    }
    return MLPGenerator(d, n_classes, params, hidden, temb_dim, cond_dim, null_token)


@dataclass
class TinyPredictor:
    """``tanh(x W + t u)``: a handful of parameters, for closed-form gradient checks."""

    d: int
    params: dict
    n_classes: int = 1
    null_token: bool = False

    @property
    def vocab(self):
        return self.n_classes + (1 if self.null_token else 0)

    @property
    def null_index(self):
        return self.n_classes

    def check_cond(self, cond):
        return np.asarray(cond, dtype=int)

    def context(self, tape, nodes, cond):
        return None

    def forward(self, tape, nodes, x, t, ctx):
        n = tape.shape(x)[0]
        tcol = tape.constant(np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))[:, None])
        return tape.tanh(tape.add(tape.matmul(x, nodes["w"]), tape.matmul(tcol, nodes["u"])))


def init_tiny_predictor(d, rng, scale=0.5):
    return TinyPredictor(d, {"w": scale * rng.normal(size=(d, d)), "u": scale * rng.normal(size=(1, d))})


# discriminator side


@dataclass
class Backbone:
    """Frozen fully connected feature stack; taps are 1-based layer indices."""

    weights: list
    biases: list
    taps: tuple = (2, 3, 4)
    frozen: bool = True

    def __post_init__(self):
        L = len(self.weights)
        if list(self.taps) != sorted(set(self.taps)) or self.taps[0] < 1 or self.taps[-1] > L:
            raise ValueError(f"tap indices {self.taps} must be strictly increasing within 1..{L}")

    def checksum(self) -> str:
        h = hashlib.sha256()
        for w in self.weights + self.biases:
            h.update(np.ascontiguousarray(w).tobytes())
        return h.hexdigest()


def init_backbone(d, rng, layers=4, width=64, taps=(2, 3, 4)) -> Backbone:
    ws, bs = [], []
    n_in = d
    for _ in range(layers):
        gain = 1.0 if n_in == width else np.sqrt(width / n_in)
        ws.append(_orthogonal(rng, n_in, width, gain))
        bs.append(0.1 * rng.normal(size=(1, width)))
        n_in = width
    return Backbone(ws, bs, tuple(taps))


def backbone_features(tape: Tape, backbone: Backbone, x: int) -> list[int]:
    """One feature node per tap; weights enter as constants so they never receive gradient."""
    n = tape.shape(x)[0]
    ones = tape.constant(np.ones((n, 1)))
    feats, h = [], x
    for layer, (w, b) in enumerate(zip(backbone.weights, backbone.biases), start=1):
        h = tape.tanh(add_bias(tape, tape.matmul(h, tape.constant(w)), tape.constant(b), ones))
        if layer in backbone.taps:
            feats.append(h)
    return feats


@dataclass
class HeadBank:
    """Trainable heads, their EMA duals, and the shared predictor.

    With ``scalar=True`` each head ends in a single logit and there is no
    dual bank or predictor (StyleGAN-T style ablation).
    """

    heads: list
    dual: list
    predictor: dict
    tau: float = 0.99
    scalar: bool = False

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    def trainable(self) -> dict[str, np.ndarray]:
        out = {}
        for i, h in enumerate(self.heads):
            out.update({f"head{i}.{k}": v for k, v in h.items()})
        out.update({f"pred.{k}": v for k, v in self.predictor.items()})
        return out

    def load_trainable(self, flat: dict):
        for i, h in enumerate(self.heads):
            for k in h:
                h[k] = flat[f"head{i}.{k}"]
        for k in self.predictor:
            self.predictor[k] = flat[f"pred.{k}"]

    def copy(self) -> "HeadBank":
        return copy.deepcopy(self)


def _init_head(rng, width, out_dim):
    return {
        "w1": _fan_in(rng, width, HEAD_DIM),
        "b1": np.zeros((1, HEAD_DIM)),
        "w2": _fan_in(rng, HEAD_DIM, out_dim),
        "b2": np.zeros((1, out_dim)),
    }


def init_head_bank(rng, n_heads=3, width=64, tau=0.99, scalar=False) -> HeadBank:
    if scalar:
        heads = [_init_head(rng, width, 1) for _ in range(n_heads)]
        return HeadBank(heads, [], {}, tau, scalar=True)
    heads = [_init_head(rng, width, HEAD_DIM) for _ in range(n_heads)]
    dual = copy.deepcopy(heads)
    predictor = {
        "w1": _fan_in(rng, HEAD_DIM, HEAD_DIM),
        "b1": np.zeros((1, HEAD_DIM)),
        "w2": np.zeros((HEAD_DIM, HEAD_DIM)),
        "b2": np.zeros((1, HEAD_DIM)),
    }
    return HeadBank(heads, dual, predictor, tau)


def head_apply(tape: Tape, head_nodes: dict, feature: int, ones: int) -> int:
    h = tape.relu(add_bias(tape, tape.matmul(feature, head_nodes["w1"]), head_nodes["b1"], ones))
    return add_bias(tape, tape.matmul(h, head_nodes["w2"]), head_nodes["b2"], ones)


def head_embed(tape: Tape, bank: HeadBank, i: int, feature: int, use_dual: bool, nodes=None) -> int:
    """z = h_i(feature), or h_i'(feature) with the dual weights entered as constants.

    ``nodes`` optionally supplies already-bound head nodes (so several calls
    share one set of parameter nodes).
    """
    if not 0 <= i < bank.n_heads:
        raise IndexError(f"head index {i} outside 0..{bank.n_heads - 1}")
    ones = tape.constant(np.ones((tape.shape(feature)[0], 1)))
    if use_dual:
        hn = bind(tape, bank.dual[i], trainable=False)
    else:
        hn = nodes if nodes is not None else bind(tape, bank.heads[i], True, f"head{i}.")
    return head_apply(tape, hn, feature, ones)


def predict(tape: Tape, bank: HeadBank, z: int, nodes=None) -> int:
    """Residual predictor ``z + relu(z W1 + b1) W2 + b2``; identity at init (W2 = 0)."""
    pn = nodes if nodes is not None else bind(tape, bank.predictor, True, "pred.")
    ones = tape.constant(np.ones((tape.shape(z)[0], 1)))
    return tape.add(z, head_apply(tape, pn, z, ones))
