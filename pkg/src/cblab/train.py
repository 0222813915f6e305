"""Contrastive training of composition models against frozen image embeddings.

Each step scores an image against the embeddings of candidate phrases
(the true class plus in-split negatives), applies a softmax cross-entropy
loss with an L2 weight penalty over the parameters touched by the step, and
updates with Adam.  The epoch whose validation accuracy is highest (earliest
on ties) provides the reported checkpoint, and experiments aggregate k
independently seeded runs into mean +- standard error.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import compose as cp
from . import evaluate as ev
from .embed import EmbeddingError, normalize
from .scenegen import DatasetManifest, Phrase


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 1e-5
    batch_size: int = 32
    epochs: int = 20
    negatives: str | int = "all"   # "all" in-split negatives, or a sampled count
    seeds: int = 5
    score_normalization: bool = True
    logit_scale: float = 10.0
    dim: int = 256
    softmax: str = "standard"      # "standard" or the literal "printed" variant
    tie_policy: str = "lowest_index"
    tie_seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise cp.ConfigError("learning rate, batch size and epochs must be positive")
        if self.weight_decay < 0:
            raise cp.ConfigError("weight decay must be non-negative")
        if self.seeds < 1:
            raise cp.ConfigError("need at least one seed")
        if isinstance(self.negatives, str):
            if self.negatives != "all":
                raise cp.ConfigError(f"negatives must be 'all' or an integer, got {self.negatives!r}")
        elif self.negatives < 1:
            raise cp.ConfigError("sampled negative count must be >= 1")
        if self.softmax not in ("standard", "printed"):
            raise cp.ConfigError(f"unknown softmax variant: {self.softmax!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainHistory:
    seed: int
    records: list[EpochRecord] = field(default_factory=list)

    def val_accuracies(self) -> list[float]:
        return [r.val_acc for r in self.records]


@dataclass
class SplitStats:
    mean: float
    stderr: float
    per_seed: list[float]


@dataclass
class RunSummary:
    model: str
    accuracy: dict[str, SplitStats]
    adversarial_accuracy: dict[str, SplitStats]
    tie_rate: dict[str, SplitStats]            # top score attained by >= 2 candidates
    swap_tie_rate: dict[str, SplitStats]       # true candidate ties its swap distractor
    selected_epochs: list[int]
    seeds: list[int]


def score(image: np.ndarray, phrase_emb: np.ndarray, cfg: TrainConfig) -> float:
    """Similarity of an image and a phrase embedding.

    Normalized mode: logit_scale * cosine; raw mode: plain dot product.
    """
    x = np.asarray(image, dtype=np.float64)
    t = np.asarray(phrase_emb, dtype=np.float64)
    if x.shape != t.shape:
        raise cp.ConfigError(f"dimension mismatch: {x.shape} vs {t.shape}")
    if cfg.score_normalization:
        return float(cfg.logit_scale * (normalize(x) @ normalize(t)))
    return float(x @ t)


def _candidate_scores_and_upstreams(x, phrases, params, cfg):
    """Scores for each candidate plus d(score)/d(T) vectors for backprop."""
    scores = np.empty(len(phrases))
    upstream_parts = []
    if cfg.score_normalization:
        xh = normalize(x)
        for k, phrase in enumerate(phrases):
            t = cp.compose(params, phrase)
            norm = float(np.linalg.norm(t))
            if norm == 0.0:
                raise EmbeddingError(f"zero phrase embedding for {phrase}")
            th = t / norm
            cos = float(xh @ th)
            scores[k] = cfg.logit_scale * cos
            upstream_parts.append((cfg.logit_scale / norm) * (xh - cos * th))
    else:
        for k, phrase in enumerate(phrases):
            t = cp.compose(params, phrase)
            scores[k] = float(x @ t)
            upstream_parts.append(np.asarray(x, dtype=np.float64))
    return scores, upstream_parts


def loss_example(image, true_phrase: Phrase, negatives: list[Phrase],
                 params: cp.ComposerParams, cfg: TrainConfig):
    """Cross-entropy of the true candidate among {true} + negatives, plus the
    L2 penalty over parameters touched by this example; returns (loss, grads)."""
    if not negatives:
        raise cp.ConfigError("need at least one negative phrase")
    phrases = [true_phrase] + list(negatives)
    scores, upstreams = _candidate_scores_and_upstreams(image, phrases, params, cfg)

    if cfg.softmax == "standard":
        shifted = scores - scores.max()
        logsum = float(np.log(np.exp(shifted).sum()) + scores.max())
        ce = logsum - scores[0]
        probs = np.exp(scores - logsum)
        dscore = probs.copy()
        dscore[0] -= 1.0
    else:
        # literal printed form exp(l_pos) / exp(l_pos + sum(l_neg)):
        # the negative log collapses to sum of negative scores
        ce = float(scores[1:].sum())
        dscore = np.ones(len(phrases))
        dscore[0] = 0.0

    grads = cp.Gradients()
    for k, phrase in enumerate(phrases):
        if dscore[k] == 0.0:
            continue
        grads.merge(cp.backward(params, phrase, dscore[k] * upstreams[k]))

    touched = set()
    for phrase in phrases:
        touched.update(cp.touched_slots(params, phrase))
    penalty = 0.0
    if cfg.weight_decay:
        for slot in touched:
            theta = params.get_slot(slot)
            penalty += float(np.sum(theta * theta))
            grads.add(slot, 2.0 * cfg.weight_decay * theta)
        penalty *= cfg.weight_decay
    return ce + penalty, grads


class Adam:
    """Adam with bias correction; per-slot step counts so sparsely touched
    parameters keep standard semantics."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def step(self, params: cp.ComposerParams, grads: cp.Gradients) -> None:
        for slot, g in grads.items():
            if slot not in self.m:
                self.m[slot] = np.zeros_like(g)
                self.v[slot] = np.zeros_like(g)
                self.t[slot] = 0
            self.t[slot] += 1
            t = self.t[slot]
            self.m[slot] = self.beta1 * self.m[slot] + (1 - self.beta1) * g
            self.v[slot] = self.beta2 * self.v[slot] + (1 - self.beta2) * g * g
            m_hat = self.m[slot] / (1 - self.beta1 ** t)
            v_hat = self.v[slot] / (1 - self.beta2 ** t)
            theta = params.get_slot(slot)
            params.set_slot(slot, theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


def _batch_step(batch, embeddings, class_phrases, class_index, params, cfg, adam,
                neg_rng=None):
    """One optimizer step over a mini-batch; returns the mean example loss.

    With negatives="all" the candidate set is shared across the batch, so each
    class embedding is composed once and gradients are accumulated per class.
    """
    if cfg.negatives == "all":
        B = len(batch)
        X = np.stack([embeddings[ex.id] for ex in batch])
        T = np.stack([cp.compose(params, ph) for ph in class_phrases])
        if cfg.score_normalization:
            Xn = X / np.linalg.norm(X, axis=1, keepdims=True)
            norms = np.linalg.norm(T, axis=1)
            if np.any(norms == 0.0):
                raise EmbeddingError("zero phrase embedding")
            Tn = T / norms[:, None]
            cos = Xn @ Tn.T
            S = cfg.logit_scale * cos
        else:
            Xn = X
            S = X @ T.T

        true_idx = np.array([class_index[ex.true_phrase] for ex in batch])
        if cfg.softmax == "standard":
            shifted = S - S.max(axis=1, keepdims=True)
            logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + S.max(axis=1, keepdims=True)
            ce = logsum[:, 0] - S[np.arange(B), true_idx]
            P = np.exp(S - logsum)
            G = P.copy()
            G[np.arange(B), true_idx] -= 1.0
        else:
            ce = S.sum(axis=1) - S[np.arange(B), true_idx]
            G = np.ones_like(S)
            G[np.arange(B), true_idx] = 0.0
        G /= B

        grads = cp.Gradients()
        if cfg.score_normalization:
            A = Xn.T @ G                      # d x K
            coef = (G * cos).sum(axis=0)      # K
            for k, phrase in enumerate(class_phrases):
                up = (cfg.logit_scale / norms[k]) * (A[:, k] - coef[k] * Tn[k])
                grads.merge(cp.backward(params, phrase, up))
        else:
            A = Xn.T @ G
            for k, phrase in enumerate(class_phrases):
                grads.merge(cp.backward(params, phrase, A[:, k]))

        penalty = 0.0
        if cfg.weight_decay:
            touched = set()
            for phrase in class_phrases:
                touched.update(cp.touched_slots(params, phrase))
            for slot in touched:
                theta = params.get_slot(slot)
                penalty += float(np.sum(theta * theta))
                grads.add(slot, 2.0 * cfg.weight_decay * theta)
            penalty *= cfg.weight_decay

        adam.step(params, grads)
        return float(np.mean(ce)) + penalty

    # sampled-D negatives: per-example candidate sets
    total_loss = 0.0
    merged = cp.Gradients()
    for ex in batch:
        pool = [ph for ph in class_phrases if ph != ex.true_phrase]
        D = min(int(cfg.negatives), len(pool))
        idx = neg_rng.choice(len(pool), size=D, replace=False)
        negs = [pool[i] for i in idx]
        loss, grads = loss_example(embeddings[ex.id], ex.true_phrase, negs, params, cfg)
        total_loss += loss
        merged.merge(grads)
    merged.scale(1.0 / len(batch))
    adam.step(params, merged)
    return total_loss / len(batch)


def train_model(model: str, manifest: DatasetManifest, embeddings: dict,
                cfg: TrainConfig, seed: int):
    """Train one model for cfg.epochs and return the validation-selected
    checkpoint parameters together with the full history.

    Mini-batches are drawn from a seeded shuffle each epoch; the whole
    trajectory is a pure function of (model, manifest, embeddings, cfg, seed).
    """
    train_examples = manifest.examples.get("train", [])
    if not train_examples:
        raise cp.ConfigError("training split is empty")
    val_examples = manifest.examples.get("validation", [])

    vocab = cp.vocab_for_kind(manifest.kind)
    params = cp.init_params(model, vocab, cfg.dim, seed, kind=manifest.kind,
                            logit_scale=cfg.logit_scale)
    some = next(iter(embeddings.values()))
    if some.shape[0] != cfg.dim:
        raise cp.ConfigError(
            f"embedding dim {some.shape[0]} does not match configured dim {cfg.dim}")

    class_phrases = list(manifest.classes["train"])
    class_index = {ph: k for k, ph in enumerate(class_phrases)}
    for ex in train_examples:
        if ex.true_phrase not in class_index:
            raise cp.ConfigError(f"train example {ex.id} has out-of-split class")

    shuffle_rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5AFF1E)))
    neg_rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD15C0)))
    adam = Adam(cfg.learning_rate)

    history = TrainHistory(seed=seed)
    best_params = params.copy()
    best_val = -1.0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_examples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_examples[i] for i in order[start:start + cfg.batch_size]]
            losses.append(_batch_step(batch, embeddings, class_phrases, class_index,
                                      params, cfg, adam, neg_rng=neg_rng))
        train_acc, _ = ev.evaluate_split(params, train_examples, embeddings,
                                         policy=cfg.tie_policy,
                                         normalize_scores=cfg.score_normalization,
                                         logit_scale=cfg.logit_scale,
                                         tie_seed=cfg.tie_seed)
        if val_examples:
            val_acc, _ = ev.evaluate_split(params, val_examples, embeddings,
                                           policy=cfg.tie_policy,
                                           normalize_scores=cfg.score_normalization,
                                           logit_scale=cfg.logit_scale,
                                           tie_seed=cfg.tie_seed)
        else:
            val_acc = train_acc
        history.records.append(EpochRecord(epoch, float(np.mean(losses)), train_acc, val_acc))
        if val_acc > best_val:
            best_val = val_acc
            best_params = params.copy()
    return best_params, history


def select_checkpoint(history: TrainHistory) -> int:
    """1-indexed epoch with the highest validation accuracy, earliest on ties."""
    if not history.records:
        raise cp.ConfigError("empty training history")
    accs = history.val_accuracies()
    return int(np.argmax(accs)) + 1


def summarize_accuracies(per_seed: list[float]) -> SplitStats:
    """Mean and standard error (sample std / sqrt(k)) over seeds."""
    arr = np.asarray(per_seed, dtype=np.float64)
    mean = float(arr.mean())
    stderr = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return SplitStats(mean=mean, stderr=stderr, per_seed=[float(x) for x in arr])


def run_seeds(model: str, manifest: DatasetManifest, embeddings: dict,
              cfg: TrainConfig, checkpoint_dir=None, history_dir=None) -> RunSummary:
    """Train seeds 1..k, select each checkpoint, evaluate every split.

    Reports accuracy under the configured tie policy and, separately, under
    the adversarial policy (ties resolved against the true label) so exact
    score ties cannot flatter a model.
    """
    seeds = list(range(1, cfg.seeds + 1))
    splits = ("train", "validation", "generalization")
    acc: dict[str, list[float]] = {s: [] for s in splits}
    adv: dict[str, list[float]] = {s: [] for s in splits}
    ties: dict[str, list[float]] = {s: [] for s in splits}
    swap_ties: dict[str, list[float]] = {s: [] for s in splits}
    selected = []

    for seed in seeds:
        params, history = train_model(model, manifest, embeddings, cfg, seed)
        selected.append(select_checkpoint(history))
        if history_dir is not None:
            write_history(Path(history_dir) / f"{model}-seed{seed}.csv", history)
        if checkpoint_dir is not None:
            cp.save_checkpoint(Path(checkpoint_dir) / f"{model}-seed{seed}.npz", params)
        for split in splits:
            examples = manifest.examples.get(split, [])
            if not examples:
                acc[split].append(0.0)
                adv[split].append(0.0)
                ties[split].append(0.0)
                swap_ties[split].append(0.0)
                continue
            a, preds = ev.evaluate_split(params, examples, embeddings,
                                         policy=cfg.tie_policy,
                                         normalize_scores=cfg.score_normalization,
                                         logit_scale=cfg.logit_scale,
                                         tie_seed=cfg.tie_seed)
            b, _ = ev.evaluate_split(params, examples, embeddings,
                                     policy="adversarial",
                                     normalize_scores=cfg.score_normalization,
                                     logit_scale=cfg.logit_scale)
            acc[split].append(a)
            adv[split].append(b)
            ties[split].append(float(np.mean([p.tie for p in preds])))
            swap_ties[split].append(ev.swap_tie_rate(preds))

    return RunSummary(
        model=model,
        accuracy={s: summarize_accuracies(acc[s]) for s in splits},
        adversarial_accuracy={s: summarize_accuracies(adv[s]) for s in splits},
        tie_rate={s: summarize_accuracies(ties[s]) for s in splits},
        swap_tie_rate={s: summarize_accuracies(swap_ties[s]) for s in splits},
        selected_epochs=selected,
        seeds=seeds,
    )


def write_history(path, history: TrainHistory) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "train_acc", "val_acc"])
        for rec in history.records:
            writer.writerow([rec.epoch, repr(rec.train_loss), repr(rec.train_acc), repr(rec.val_acc)])
