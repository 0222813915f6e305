"""Top-1 accuracy over 5-candidate sets, error taxonomies, calibration.

Every example is scored against its true phrase plus 4 distractors (true
listed first).  Exact score ties are real in this benchmark: commutative
composition models produce them by construction on argument-swapped
relational candidates, so tie handling is explicit:

* ``lowest_index``  -- earliest tying candidate wins (true label first).
* ``adversarial``   -- any tying distractor beats the true label.
* ``random``        -- seeded uniform choice among tying candidates.

Calibrated stacking subtracts a coefficient from seen-class candidate
scores; the coefficient is tuned on a grid to maximize the harmonic mean of
seen and unseen validation accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import compose as cp
from .embed import normalize
from .scenegen import AdjNoun, Phrase, Rel, SHAPES, opposite

TIE_POLICIES = ("lowest_index", "adversarial", "random")

# two candidate scores tie when they agree within this relative tolerance
TIE_RTOL = 1e-9

ADJNOUN_ERROR_KINDS = ("Adj", "Noun", "Both")
RELATIONAL_ERROR_KINDS = ("bRa", "aSb", "aRc", "cRb")

CALIBRATION_GRID_POINTS = 201


class ContractError(ValueError):
    """Raised when evaluation inputs violate the candidate-set contract."""


@dataclass
class Prediction:
    example_id: str
    candidates: list[str]          # labels, true phrase first
    scores: list[float]
    predicted_index: int
    tie: bool
    policy: str

    @property
    def correct(self) -> bool:
        return self.predicted_index == 0

    @property
    def predicted_label(self) -> str:
        return self.candidates[self.predicted_index]


def _tied_indices(scores: Sequence[float]) -> list[int]:
    arr = np.asarray(scores, dtype=np.float64)
    top = float(arr.max())
    tol = TIE_RTOL * max(1.0, abs(top))
    return [int(i) for i in np.flatnonzero(arr >= top - tol)]


def resolve_argmax(scores: Sequence[float], policy: str, rng=None) -> tuple[int, bool]:
    """Return (winning index, tie flag) under the given tie policy."""
    if policy not in TIE_POLICIES:
        raise ContractError(f"unknown tie policy: {policy!r}")
    tied = _tied_indices(scores)
    tie = len(tied) >= 2
    if policy == "lowest_index":
        return tied[0], tie
    if policy == "adversarial":
        distractors = [i for i in tied if i != 0]
        return (distractors[0] if distractors else tied[0]), tie
    if rng is None:
        raise ContractError("random tie policy needs an rng")
    return int(tied[int(rng.integers(len(tied)))]), tie


def score_candidate_set(scores: Sequence[float], candidates: Sequence[str],
                        example_id: str, policy: str, rng=None) -> Prediction:
    if len(scores) != 5 or len(candidates) != 5:
        raise ContractError(f"example {example_id}: expected 5 candidates, got {len(scores)}")
    idx, tie = resolve_argmax(scores, policy, rng)
    return Prediction(
        example_id=example_id,
        candidates=list(candidates),
        scores=[float(s) for s in scores],
        predicted_index=idx,
        tie=tie,
        policy=policy,
    )


def swap_tie_rate(predictions: Iterable[Prediction]) -> float:
    """Fraction of examples whose true candidate ties its designated swap
    distractor (candidate index 1: the argument swap in relational manifests,
    the attribute swap in two-object manifests)."""
    preds = list(predictions)
    if not preds:
        return 0.0
    hits = 0
    for p in preds:
        tol = TIE_RTOL * max(1.0, abs(p.scores[0]), abs(p.scores[1]))
        hits += int(abs(p.scores[0] - p.scores[1]) <= tol)
    return hits / len(preds)


def evaluate_split(params: cp.ComposerParams, examples, embeddings: dict,
                   policy: str = "lowest_index", normalize_scores: bool = True,
                   logit_scale: float = 10.0, tie_seed: int = 0):
    """Accuracy and per-example predictions for one split.

    Pure in example order: each distinct candidate phrase is composed once
    and examples are scored independently.
    """
    if not examples:
        return 0.0, []
    distinct: dict[Phrase, int] = {}
    for ex in examples:
        if len(ex.distractors) != 4:
            raise ContractError(f"example {ex.id} lacks a 5-candidate set")
        for ph in ex.candidates():
            distinct.setdefault(ph, len(distinct))
    phrases = list(distinct)
    T = np.stack([cp.compose(params, ph) for ph in phrases])
    if normalize_scores:
        norms = np.linalg.norm(T, axis=1)
        T = logit_scale * (T / norms[:, None])

    rng = np.random.default_rng(np.random.SeedSequence((tie_seed, 0x7173))) if policy == "random" else None
    predictions = []
    for ex in examples:
        x = embeddings[ex.id]
        x = normalize(x) if normalize_scores else x
        cand = ex.candidates()
        scores = [float(x @ T[distinct[ph]]) for ph in cand]
        predictions.append(score_candidate_set(
            scores, [ph.label() for ph in cand], ex.id, policy, rng))
    accuracy = float(np.mean([p.correct for p in predictions]))
    return accuracy, predictions


# ---------------------------------------------------------------------------
# error taxonomies
# ---------------------------------------------------------------------------

def classify_error_adjnoun(predicted: AdjNoun, true: AdjNoun) -> str:
    """Adj: wrong adjective only; Noun: wrong noun only; Both: wrong on both."""
    if not isinstance(predicted, AdjNoun) or not isinstance(true, AdjNoun):
        raise ContractError("adjective-noun taxonomy needs adjective-noun phrases")
    if predicted == true:
        raise ContractError("cannot classify a correct prediction as an error")
    adj_ok = predicted.adjective == true.adjective
    noun_ok = predicted.noun == true.noun
    if noun_ok and not adj_ok:
        return "Adj"
    if adj_ok and not noun_ok:
        return "Noun"
    return "Both"


def classify_error_relational(predicted: Rel, true: Rel) -> str:
    """Which structural slot of {bRa, aSb, aRc, cRb} the prediction occupies."""
    if not isinstance(predicted, Rel) or not isinstance(true, Rel):
        raise ContractError("relational taxonomy needs relational phrases")
    a, r, b = true.subject, true.relation, true.obj
    c = next(s for s in SHAPES if s not in (a, b))
    if predicted == Rel(b, r, a):
        return "bRa"
    if predicted == Rel(a, opposite(r), b):
        return "aSb"
    if predicted == Rel(a, r, c):
        return "aRc"
    if predicted == Rel(c, r, b):
        return "cRb"
    raise ContractError(f"{predicted} is not a structured distractor of {true}")


@dataclass
class ErrorTaxonomy:
    kinds: tuple[str, ...]
    counts: dict[str, int]
    n_errors: int

    def percentages(self) -> Optional[dict[str, float]]:
        if self.n_errors == 0:
            return None
        return {k: 100.0 * self.counts[k] / self.n_errors for k in self.kinds}


def taxonomy_from_predictions(predictions: Iterable[Prediction], kind: str) -> ErrorTaxonomy:
    """Tally each incorrect prediction into its structural error slot."""
    from .scenegen import parse_label

    kinds = ADJNOUN_ERROR_KINDS if kind in ("single", "two") else RELATIONAL_ERROR_KINDS
    counts = {k: 0 for k in kinds}
    n_errors = 0
    for pred in predictions:
        if pred.correct:
            continue
        n_errors += 1
        true = parse_label(pred.candidates[0])
        predicted = parse_label(pred.predicted_label)
        if kind in ("single", "two"):
            counts[classify_error_adjnoun(predicted, true)] += 1
        else:
            counts[classify_error_relational(predicted, true)] += 1
    return ErrorTaxonomy(kinds=kinds, counts=counts, n_errors=n_errors)


# ---------------------------------------------------------------------------
# calibrated stacking
# ---------------------------------------------------------------------------

@dataclass
class CalibrationResult:
    gamma: float
    seen_accuracy: float
    unseen_accuracy: float
    harmonic_mean: float
    grid: list[float] = field(default_factory=list)


def harmonic_mean(a: float, b: float) -> float:
    return 2 * a * b / (a + b) if (a + b) > 0 else 0.0


def apply_calibration(predictions: list[Prediction], gamma: float,
                      seen_classes: set[str], policy: str = "lowest_index",
                      rng=None) -> list[Prediction]:
    """Subtract gamma from every seen-class candidate score and re-resolve."""
    if not np.isfinite(gamma):
        raise ContractError(f"calibration coefficient must be finite, got {gamma}")
    out = []
    for pred in predictions:
        scores = [
            s - gamma if label in seen_classes else s
            for s, label in zip(pred.scores, pred.candidates)
        ]
        idx, tie = resolve_argmax(scores, policy, rng)
        out.append(replace(pred, scores=scores, predicted_index=idx, tie=tie, policy=policy))
    return out


def _accuracy_at(predictions, gamma, seen_classes, policy):
    if gamma == 0.0:
        # bit-exact uncalibrated path
        return float(np.mean([p.correct for p in predictions]))
    calibrated = apply_calibration(predictions, gamma, seen_classes, policy)
    return float(np.mean([p.correct for p in calibrated]))


def calibrate(seen_predictions: list[Prediction], unseen_predictions: list[Prediction],
              seen_classes: set[str], policy: str = "lowest_index") -> CalibrationResult:
    """Grid-search the calibration coefficient.

    The grid spans [-l_max, +l_max] in steps of l_max/100 (201 values), where
    l_max is the highest candidate score across both prediction sets.  The
    returned coefficient maximizes the harmonic mean of seen and unseen
    accuracy; ties prefer the smallest magnitude, then the smallest value.
    """
    if not seen_predictions or not unseen_predictions:
        raise ContractError("calibration needs non-empty seen and unseen prediction sets")
    l_max = max(
        max(p.scores) for p in list(seen_predictions) + list(unseen_predictions)
    )
    if l_max <= 0.0:
        seen_acc = _accuracy_at(seen_predictions, 0.0, seen_classes, policy)
        unseen_acc = _accuracy_at(unseen_predictions, 0.0, seen_classes, policy)
        return CalibrationResult(0.0, seen_acc, unseen_acc,
                                 harmonic_mean(seen_acc, unseen_acc), [0.0])

    grid = [l_max * (k - 100) / 100.0 for k in range(CALIBRATION_GRID_POINTS)]
    best = None
    for gamma in grid:
        seen_acc = _accuracy_at(seen_predictions, gamma, seen_classes, policy)
        unseen_acc = _accuracy_at(unseen_predictions, gamma, seen_classes, policy)
        hm = harmonic_mean(seen_acc, unseen_acc)
        key = (-hm, abs(gamma), gamma)
        if best is None or key < best[0]:
            best = (key, gamma, seen_acc, unseen_acc, hm)
    _, gamma, seen_acc, unseen_acc, hm = best
    return CalibrationResult(gamma=gamma, seen_accuracy=seen_acc,
                             unseen_accuracy=unseen_acc, harmonic_mean=hm, grid=grid)
