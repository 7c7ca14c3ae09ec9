"""Versioned binary checkpoints.

Layout (little-endian)::

    b"ADT1" | u32 version | u32 len | JSON header | u32 n_tensors
    n_tensors x ( u32 name_len | name | u32 rank | u64 dims[rank] | f64 data )
    u32 CRC32 of every preceding byte

The JSON header echoes the config, counters, rng state and metrics cursor,
plus enough structure to rebuild the networks around the tensors.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .networks import Backbone, HeadBank, MLPGenerator
from .trainer import AdamState, TrainState

MAGIC = b"ADT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    state: TrainState
    config: TrainConfig
    metrics_cursor: int = 0


def _tensors(state: TrainState) -> list[tuple[str, np.ndarray]]:
    out = [(f"gen.{k}", v) for k, v in state.generator.params.items()]
    bank = state.bank
    if bank is not None:
        for i, h in enumerate(bank.heads):
            out += [(f"head{i}.{k}", v) for k, v in h.items()]
        for i, h in enumerate(bank.dual):
            out += [(f"dual{i}.{k}", v) for k, v in h.items()]
        out += [(f"pred.{k}", v) for k, v in bank.predictor.items()]
    bb = state.backbone
    out += [(f"backbone.w{j}", w) for j, w in enumerate(bb.weights)]
    out += [(f"backbone.b{j}", b) for j, b in enumerate(bb.biases)]
    for tag, opt in (("opt_gen", state.opt_gen), ("opt_disc", state.opt_disc)):
        out += [(f"{tag}.m.{k}", v) for k, v in opt.m.items()]
        out += [(f"{tag}.v.{k}", v) for k, v in opt.v.items()]
    return out


def _header(state: TrainState, config: TrainConfig, metrics_cursor: int) -> dict:
    g, bank = state.generator, state.bank
    return {
        "config": config.to_dict(),
        "iteration": state.iteration,
        "gen_updates": state.gen_updates,
        "metrics_cursor": metrics_cursor,
        "rng": state.rng.bit_generator.state,
        "generator": {"d": g.d, "n_classes": g.n_classes, "hidden": g.hidden, "temb_dim": g.temb_dim,
                      "cond_dim": g.cond_dim, "null_token": g.null_token},
        "bank": None if bank is None else {"n_heads": bank.n_heads, "tau": bank.tau, "scalar": bank.scalar},
        "backbone": {"layers": len(state.backbone.weights), "taps": list(state.backbone.taps)},
        "opt_t": [state.opt_gen.t, state.opt_disc.t],
    }


def dumps(state: TrainState, config: TrainConfig, metrics_cursor: int = 0) -> bytes:
    head = json.dumps(_header(state, config, metrics_cursor), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(head)), head]
    tensors = _tensors(state)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, state: TrainState, config: TrainConfig, metrics_cursor: int = 0) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(state, config, metrics_cursor))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes) -> Checkpoint:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError("not an ADT1 checkpoint")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError("checksum mismatch (corrupt checkpoint)")
    r = _Reader(buf[:-4])
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (hlen,) = r.unpack("<I")
    header = json.loads(r.take(hlen))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode()
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes before checksum")
    return _rebuild(header, tensors)


def _group(tensors: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def _rebuild(header: dict, tensors: dict) -> Checkpoint:
    config = TrainConfig.from_dict(header["config"])
    g = header["generator"]
    gen = MLPGenerator(g["d"], g["n_classes"], _group(tensors, "gen."), g["hidden"], g["temb_dim"], g["cond_dim"],
                       g["null_token"])
    bank = None
    if header["bank"] is not None:
        b = header["bank"]
        heads = [_group(tensors, f"head{i}.") for i in range(b["n_heads"])]
        dual = [] if b["scalar"] else [_group(tensors, f"dual{i}.") for i in range(b["n_heads"])]
        bank = HeadBank(heads, dual, _group(tensors, "pred."), b["tau"], b["scalar"])
    layers = header["backbone"]["layers"]
    backbone = Backbone([tensors[f"backbone.w{j}"] for j in range(layers)],
                        [tensors[f"backbone.b{j}"] for j in range(layers)], tuple(header["backbone"]["taps"]))
    opts = []
    for tag, t in zip(("opt_gen", "opt_disc"), header["opt_t"]):
        opts.append(AdamState(_group(tensors, f"{tag}.m."), _group(tensors, f"{tag}.v."), t))
    rng = np.random.default_rng()
    try:
        rng.bit_generator.state = header["rng"]
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"bad rng state: {e}") from None
    state = TrainState(header["iteration"], gen, bank, backbone, opts[0], opts[1], rng, header["gen_updates"])
    return Checkpoint(state, config, header["metrics_cursor"])


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read())
