"""Siamese discriminator scoring, hinge losses, EMA dual heads, augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .networks import Backbone, HeadBank, backbone_features, bind, head_apply, head_embed, predict

DEFAULT_ROTATION = 0.1  # max rotation angle (radians) of the augmentation jitter


@dataclass
class ScoreSet:
    tape: Tape
    scores: list  # one node per head, each of shape (N,)
    branch: str  # "real" or "fake"
    degenerate: np.ndarray  # (n_heads, N) rows whose cosine was undefined

    def values(self) -> np.ndarray:
        return np.stack([self.tape.value(s) for s in self.scores])


def augment(tape: Tape, x: int, rng: np.random.Generator, strength: float, rotation: float = DEFAULT_ROTATION) -> int:
    """Differentiable jitter: per-sample rotation in the first coordinate plane plus Gaussian noise.

    ``x_aug = R_j x_j + strength * g``. Rotation angles are uniform on
    [-rotation, rotation]. The map is affine in x, so its Jacobian is R_j.
    """
    if strength < 0 or rotation < 0:
        raise ValueError("augmentation strength and rotation must be >= 0")
    n, d = tape.shape(x)
    if rotation > 0 and d >= 2:
        theta = rng.uniform(-rotation, rotation, size=n)
        cos = np.ones((n, d))
        cos[:, 0] = cos[:, 1] = np.cos(theta)
        sin = np.zeros((n, d))
        sin[:, 0] = sin[:, 1] = np.sin(theta)
        swap = np.zeros((d, d))
        swap[1, 0], swap[0, 1] = -1.0, 1.0  # (x0, x1) -> (-x1, x0)
        x = tape.add(
            tape.mul(tape.constant(cos), x),
            tape.mul(tape.constant(sin), tape.matmul(x, tape.constant(swap))),
        )
    if strength > 0:
        x = tape.add(x, tape.constant(strength * rng.standard_normal((n, d))))
    return x


def bind_bank(tape, bank: HeadBank, trainable: bool):
    heads = [bind(tape, h, trainable, f"head{i}.") for i, h in enumerate(bank.heads)]
    pred = bind(tape, bank.predictor, trainable, "pred.") if bank.predictor else None
    return heads, pred


def discriminator_score(
    tape: Tape,
    bank: HeadBank,
    backbone: Backbone,
    x_input: int,
    x_ref,
    rng: np.random.Generator,
    aug_strength: float,
    branch: str = "fake",
    trainable: bool = True,
    rotation: float = DEFAULT_ROTATION,
    bound=None,
) -> ScoreSet:
    """Per-head scores ``cos(q(h_i(F(aug x_input))), h_i'(F(aug x_ref)))``.

    ``trainable=False`` enters heads and predictor as constants (generator
    update). The reference branch always uses the EMA duals as constants.
    ``bound`` reuses nodes from a previous call so real and fake branches
    share parameters on one tape.
    """
    if branch not in ("real", "fake"):
        raise ValueError(f"branch must be 'real' or 'fake', got {branch!r}")
    heads, pred = bound if bound is not None else bind_bank(tape, bank, trainable)
    n = tape.shape(x_input)[0]
    ones = tape.constant(np.ones((n, 1)))
    feats = backbone_features(tape, backbone, augment(tape, x_input, rng, aug_strength, rotation))
    if len(feats) != bank.n_heads:
        raise ValueError(f"{len(feats)} backbone taps but {bank.n_heads} heads")

    scores, degenerate = [], []
    if bank.scalar:
        pick = tape.constant(np.ones(1))
        for i, f in enumerate(feats):
            logit = head_apply(tape, heads[i], f, ones)
            scores.append(tape.matmul(logit, pick))
            degenerate.append(np.zeros(n, dtype=bool))
        return ScoreSet(tape, scores, branch, np.array(degenerate))

    if not isinstance(x_ref, (int, np.integer)):
        x_ref = tape.constant(x_ref)
    ref_feats = backbone_features(tape, backbone, augment(tape, x_ref, rng, aug_strength, rotation))
    for i, (f, rf) in enumerate(zip(feats, ref_feats)):
        z_in = predict(tape, bank, head_apply(tape, heads[i], f, ones), nodes=pred)
        z_ref = head_embed(tape, bank, i, rf, use_dual=True)
        s = tape.cosine(z_in, z_ref)
        scores.append(s)
        degenerate.append(tape.attrs[s]["degenerate"])
    return ScoreSet(tape, scores, branch, np.array(degenerate))


def _batch_mean(tape: Tape, node: int) -> int:
    return tape.scale(tape.sum(node), 1.0 / tape.value(node).size)


def generator_adv_loss(scores: ScoreSet) -> int:
    """``-sum_i D_i`` averaged over the batch."""
    tape = scores.tape
    total = scores.scores[0]
    for s in scores.scores[1:]:
        total = tape.add(total, s)
    return tape.scale(_batch_mean(tape, total), -1.0)


def discriminator_hinge_loss(real: ScoreSet, fake: ScoreSet) -> int:
    """``sum_i relu(1 - D_i(real)) + relu(1 + D_i(fake))`` averaged over the batch."""
    if real.branch != "real" or fake.branch != "fake":
        raise ValueError("hinge loss needs a real and a fake ScoreSet")
    if real.tape is not fake.tape:
        raise ValueError("real and fake scores must live on one tape")
    tape = real.tape
    one = tape.constant(1.0)
    terms = []
    for sr, sf in zip(real.scores, fake.scores):
        terms.append(_batch_mean(tape, tape.relu(tape.add(one, tape.scale(sr, -1.0)))))
        terms.append(_batch_mean(tape, tape.relu(tape.add(one, sf))))
    loss = terms[0]
    for t in terms[1:]:
        loss = tape.add(loss, t)
    return loss


def ema_update(bank: HeadBank) -> HeadBank:
    """In place: dual <- tau * dual + (1 - tau) * head, per tensor."""
    tau = bank.tau
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"EMA rate must be in [0, 1], got {tau}")
    for head, dual in zip(bank.heads, bank.dual):
        for k in dual:
            dual[k] = tau * dual[k] + (1.0 - tau) * head[k]
    return bank
