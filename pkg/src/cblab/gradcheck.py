"""Finite-difference verification of the analytic gradients.

Central differences over every touched parameter provide an oracle that is
independent of the hand-derived backward pass: only the forward composition
(or the full example loss) is evaluated here.
"""

from __future__ import annotations

import numpy as np

from . import compose as cp
from . import train as tr
from .scenegen import AdjNoun, COLORS, RELATIONS, Rel, SHAPES

DEFAULT_H = 1e-6


def _perturbed_eval(params, slot, index, h, fn):
    theta = params.get_slot(slot)
    flat = theta.reshape(-1)
    old = flat[index]
    flat[index] = old + h
    up = fn()
    flat[index] = old - h
    down = fn()
    flat[index] = old
    return (up - down) / (2 * h)


def finite_difference_grads(params: cp.ComposerParams, phrase, upstream,
                            h: float = DEFAULT_H) -> dict:
    """Central-difference gradient of upstream . compose(params, phrase)."""
    u = np.asarray(upstream, dtype=np.float64)

    def value():
        return float(u @ cp.compose(params, phrase))

    out = {}
    for slot in cp.touched_slots(params, phrase):
        theta = params.get_slot(slot)
        grad = np.zeros(theta.size)
        for i in range(theta.size):
            grad[i] = _perturbed_eval(params, slot, i, h, value)
        out[slot] = grad.reshape(theta.shape)
    return out


def finite_difference_loss_grads(params: cp.ComposerParams, image, true_phrase,
                                 negatives, cfg: tr.TrainConfig,
                                 h: float = DEFAULT_H) -> dict:
    """Central-difference gradient of the full example loss (CE + penalty)."""

    def value():
        loss, _ = tr.loss_example(image, true_phrase, negatives, params, cfg)
        return loss

    touched = set()
    for ph in [true_phrase] + list(negatives):
        touched.update(cp.touched_slots(params, ph))
    out = {}
    for slot in sorted(touched):
        theta = params.get_slot(slot)
        grad = np.zeros(theta.size)
        for i in range(theta.size):
            grad[i] = _perturbed_eval(params, slot, i, h, value)
        out[slot] = grad.reshape(theta.shape)
    return out


def max_relative_error(analytic, numeric) -> float:
    """Largest per-component deviation, relative to the gradient's sup norm."""
    slots = set(analytic) | set(numeric)
    scale = 0.0
    for slot in slots:
        for g in (analytic.get(slot), numeric.get(slot)):
            if g is not None:
                scale = max(scale, float(np.max(np.abs(g))))
    scale = max(scale, 1e-8)
    worst = 0.0
    for slot in slots:
        a = analytic.get(slot)
        b = numeric.get(slot)
        if a is None:
            a = np.zeros_like(b)
        if b is None:
            b = np.zeros_like(a)
        worst = max(worst, float(np.max(np.abs(a - b))) / scale)
    return worst


def random_phrase(kind: str, rng):
    if kind in ("single", "two"):
        return AdjNoun(COLORS[int(rng.integers(len(COLORS)))],
                       SHAPES[int(rng.integers(len(SHAPES)))])
    shapes = list(SHAPES)
    i = int(rng.integers(len(shapes)))
    j = int(rng.integers(len(shapes) - 1))
    obj = [s for k, s in enumerate(shapes) if k != i][j]
    return Rel(shapes[i], RELATIONS[int(rng.integers(len(RELATIONS)))], obj)


def run_gradcheck(model: str, kind: str, dim: int, trials: int, seed: int = 0,
                  h: float = DEFAULT_H, check_loss: bool = False) -> dict:
    """Sample random (params, phrase, upstream) triples and compare the
    analytic backward pass against central differences."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xFD)))
    vocab = cp.vocab_for_kind(kind)
    worst = 0.0
    for trial in range(trials):
        params = cp.init_params(model, vocab, dim, int(rng.integers(2 ** 31)), kind=kind)
        phrase = random_phrase(kind, rng)
        upstream = rng.standard_normal(dim)
        analytic = {slot: g for slot, g in cp.backward(params, phrase, upstream).items()}
        numeric = finite_difference_grads(params, phrase, upstream, h=h)
        worst = max(worst, max_relative_error(analytic, numeric))

    loss_worst = None
    if check_loss:
        cfg = tr.TrainConfig(dim=dim, seeds=1, weight_decay=1e-5)
        loss_worst = 0.0
        for trial in range(max(trials // 4, 1)):
            params = cp.init_params(model, vocab, dim, int(rng.integers(2 ** 31)), kind=kind)
            true = random_phrase(kind, rng)
            negatives = []
            while len(negatives) < 2:
                ph = random_phrase(kind, rng)
                if ph != true and ph not in negatives:
                    negatives.append(ph)
            image = rng.standard_normal(dim)
            _, grads = tr.loss_example(image, true, negatives, params, cfg)
            analytic = dict(grads.items())
            numeric = finite_difference_loss_grads(params, image, true, negatives, cfg, h=h)
            loss_worst = max(loss_worst, max_relative_error(analytic, numeric))

    return {"model": model, "kind": kind, "dim": dim, "trials": trials,
            "max_rel_error": worst, "max_loss_rel_error": loss_worst}
