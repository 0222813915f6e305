"""The five compositional distributional semantics models (CDSMs).

Each model maps a phrase to a vector in the image-embedding space by
combining learnable per-word parameters:

    add   T(a,n) = a + n                 T(s,R,o) = s + R + o
    mult  T(a,n) = a (.) n               T(s,R,o) = s (.) R (.) o
    conv  T(a,n) = a (*) n               T(s,R,o) = (s (*) R) (*) o
    tl    T(a,n) = A . n                 T(s,R,o) = s (.) (R . o)
    rf    T(a,n) = a (*) r_a + n (*) r_n T(s,R,o) = s (*) r_s + R (*) r_R + o (*) r_o

where (.) is pointwise multiplication, (*) circular convolution, and A, R
are learnable matrices in the type-logical model.  add/mult/conv treat the
three-word phrase as the associative fold of the binary operator.

`backward` returns the analytic gradient of upstream . T(phrase) for every
parameter the phrase touches; the convolution adjoint is
d(u . (a (*) b))/da = circ_corr(b, u).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scenegen import AdjNoun, COLORS, Phrase, RELATIONS, SHAPES

MODELS = ("add", "mult", "conv", "tl", "rf")

ADJNOUN_ROLES = ("adj", "noun")
RELATIONAL_ROLES = ("subject", "relation", "object")

# direct O(d^2) convolution below this dimension, FFT at or above it
FFT_THRESHOLD = 64

CHECKPOINT_FORMAT = "cbl-checkpoint/1"


class VocabularyError(KeyError):
    """Raised when a phrase mentions a word with no parameters."""


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# circular convolution algebra
# ---------------------------------------------------------------------------

def circ_conv(a: np.ndarray, b: np.ndarray, method: str = "auto") -> np.ndarray:
    """Circular convolution c_i = sum_j a_j * b_{(i-j) mod d}."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigError(f"circ_conv needs equal-length vectors, got {a.shape} and {b.shape}")
    d = a.shape[0]
    if method == "auto":
        method = "fft" if d >= FFT_THRESHOLD else "direct"
    if method == "fft":
        return np.fft.irfft(np.fft.rfft(a) * np.fft.rfft(b), n=d)
    if method == "direct":
        out = np.zeros(d)
        for i in range(d):
            out[i] = np.dot(a, b[(i - np.arange(d)) % d])
        return out
    raise ConfigError(f"unknown convolution method: {method!r}")


def involution(a: np.ndarray) -> np.ndarray:
    """Index reversal a_i -> a_{(-i) mod d}; e.g. [1,2,3] -> [1,3,2]."""
    a = np.asarray(a, dtype=np.float64)
    return np.roll(a[::-1], 1)


def circ_corr(a: np.ndarray, b: np.ndarray, method: str = "auto") -> np.ndarray:
    """Circular correlation circ_conv(involution(a), b), the approximate
    inverse of binding: circ_corr(a, circ_conv(a, b)) is similar to b."""
    return circ_conv(involution(a), b, method=method)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Vocabulary:
    adjectives: tuple[str, ...]
    nouns: tuple[str, ...]
    relations: tuple[str, ...]

    def all_words(self) -> tuple[str, ...]:
        return self.adjectives + self.nouns + self.relations


def vocab_for_kind(kind: str) -> Vocabulary:
    if kind in ("single", "two"):
        return Vocabulary(adjectives=tuple(COLORS), nouns=tuple(SHAPES), relations=())
    if kind == "relational":
        return Vocabulary(adjectives=(), nouns=tuple(SHAPES), relations=tuple(RELATIONS))
    raise ConfigError(f"unknown dataset kind: {kind!r}")


@dataclass
class ComposerParams:
    model: str
    kind: str
    dim: int
    vectors: dict[str, np.ndarray] = field(default_factory=dict)
    matrices: dict[str, np.ndarray] = field(default_factory=dict)
    roles: dict[str, np.ndarray] = field(default_factory=dict)
    logit_scale: float = 10.0  # fixed temperature, not learnable

    def slots(self):
        """Iterate (slot_key, array) over every learnable parameter."""
        for w, v in self.vectors.items():
            yield ("vec", w), v
        for w, m in self.matrices.items():
            yield ("mat", w), m
        for r, v in self.roles.items():
            yield ("role", r), v

    def get_slot(self, slot) -> np.ndarray:
        kind, name = slot
        store = {"vec": self.vectors, "mat": self.matrices, "role": self.roles}[kind]
        return store[name]

    def set_slot(self, slot, value: np.ndarray) -> None:
        kind, name = slot
        store = {"vec": self.vectors, "mat": self.matrices, "role": self.roles}[kind]
        store[name] = value

    def copy(self) -> "ComposerParams":
        return ComposerParams(
            model=self.model,
            kind=self.kind,
            dim=self.dim,
            vectors={k: v.copy() for k, v in self.vectors.items()},
            matrices={k: v.copy() for k, v in self.matrices.items()},
            roles={k: v.copy() for k, v in self.roles.items()},
            logit_scale=self.logit_scale,
        )


class Gradients:
    """Accumulator shaped like the parameters it differentiates."""

    def __init__(self):
        self.data: dict[tuple[str, str], np.ndarray] = {}

    def add(self, slot, value: np.ndarray) -> None:
        if slot in self.data:
            self.data[slot] = self.data[slot] + value
        else:
            self.data[slot] = np.array(value, dtype=np.float64)

    def items(self):
        return self.data.items()

    def get(self, slot):
        return self.data.get(slot)

    def scale(self, factor: float) -> "Gradients":
        for slot in self.data:
            self.data[slot] = self.data[slot] * factor
        return self

    def merge(self, other: "Gradients") -> "Gradients":
        for slot, value in other.items():
            self.add(slot, value)
        return self


def init_params(model: str, vocab: Vocabulary, dim: int, seed: int,
                kind: str = "", logit_scale: float = 10.0) -> ComposerParams:
    """Random parameters: vectors ~ N(0, 1/d) per component, type-logical
    matrices near identity (identity + N(0, 0.02) entries)."""
    if model not in MODELS:
        raise ConfigError(f"unknown model: {model!r}")
    if dim <= 0:
        raise ConfigError(f"dimension must be positive, got {dim}")
    if not kind:
        kind = "relational" if vocab.relations else "single"
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0DE, MODELS.index(model))))
    params = ComposerParams(model=model, kind=kind, dim=dim, logit_scale=logit_scale)
    sd = 1.0 / np.sqrt(dim)

    functional = vocab.adjectives if vocab.adjectives else vocab.relations
    if model == "tl":
        for word in vocab.nouns:
            params.vectors[word] = rng.normal(0.0, sd, size=dim)
        for word in functional:
            params.matrices[word] = np.eye(dim) + rng.normal(0.0, 0.02, size=(dim, dim))
    else:
        for word in vocab.all_words():
            params.vectors[word] = rng.normal(0.0, sd, size=dim)
        if model == "rf":
            role_names = RELATIONAL_ROLES if vocab.relations else ADJNOUN_ROLES
            for role in role_names:
                params.roles[role] = rng.normal(0.0, sd, size=dim)
    return params


def param_count(model: str, dataset_kind: str, dim: int) -> int:
    """Exact number of scalar learnable parameters for a model/dataset pair."""
    vocab = vocab_for_kind(dataset_kind)
    n_adj = len(vocab.adjectives)
    n_noun = len(vocab.nouns)
    n_rel = len(vocab.relations)
    n_words = n_adj + n_noun + n_rel
    if model in ("add", "mult", "conv"):
        return n_words * dim
    if model == "rf":
        n_roles = len(RELATIONAL_ROLES) if n_rel else len(ADJNOUN_ROLES)
        return (n_words + n_roles) * dim
    if model == "tl":
        n_mat = n_adj if n_adj else n_rel
        return n_mat * dim * dim + n_noun * dim
    raise ConfigError(f"unknown model: {model!r}")


# ---------------------------------------------------------------------------
# forward composition
# ---------------------------------------------------------------------------

def _vec(params: ComposerParams, word: str) -> np.ndarray:
    try:
        return params.vectors[word]
    except KeyError:
        raise VocabularyError(f"no vector for word {word!r}") from None


def _mat(params: ComposerParams, word: str) -> np.ndarray:
    try:
        return params.matrices[word]
    except KeyError:
        raise VocabularyError(f"no matrix for word {word!r}") from None


def _role(params: ComposerParams, name: str) -> np.ndarray:
    try:
        return params.roles[name]
    except KeyError:
        raise VocabularyError(f"no role vector {name!r}") from None


def compose(params: ComposerParams, phrase: Phrase) -> np.ndarray:
    model = params.model
    if isinstance(phrase, AdjNoun):
        a, n = phrase.adjective, phrase.noun
        if model == "add":
            return _vec(params, a) + _vec(params, n)
        if model == "mult":
            return _vec(params, a) * _vec(params, n)
        if model == "conv":
            return circ_conv(_vec(params, a), _vec(params, n))
        if model == "tl":
            return _mat(params, a) @ _vec(params, n)
        if model == "rf":
            return (circ_conv(_vec(params, a), _role(params, "adj"))
                    + circ_conv(_vec(params, n), _role(params, "noun")))
    else:
        s, r, o = phrase.subject, phrase.relation, phrase.obj
        if model == "add":
            return _vec(params, s) + _vec(params, r) + _vec(params, o)
        if model == "mult":
            return _vec(params, s) * _vec(params, r) * _vec(params, o)
        if model == "conv":
            return circ_conv(circ_conv(_vec(params, s), _vec(params, r)), _vec(params, o))
        if model == "tl":
            return _vec(params, s) * (_mat(params, r) @ _vec(params, o))
        if model == "rf":
            return (circ_conv(_vec(params, s), _role(params, "subject"))
                    + circ_conv(_vec(params, r), _role(params, "relation"))
                    + circ_conv(_vec(params, o), _role(params, "object")))
    raise ConfigError(f"unknown model: {model!r}")


# ---------------------------------------------------------------------------
# analytic backward pass
# ---------------------------------------------------------------------------

def backward(params: ComposerParams, phrase: Phrase, upstream: np.ndarray) -> Gradients:
    """Gradient of upstream . compose(params, phrase) w.r.t. touched parameters."""
    u = np.asarray(upstream, dtype=np.float64)
    if u.shape != (params.dim,):
        raise ConfigError(f"upstream must have shape ({params.dim},), got {u.shape}")
    model = params.model
    grads = Gradients()

    if isinstance(phrase, AdjNoun):
        a, n = phrase.adjective, phrase.noun
        if model == "add":
            grads.add(("vec", a), u)
            grads.add(("vec", n), u)
        elif model == "mult":
            grads.add(("vec", a), u * _vec(params, n))
            grads.add(("vec", n), u * _vec(params, a))
        elif model == "conv":
            grads.add(("vec", a), circ_corr(_vec(params, n), u))
            grads.add(("vec", n), circ_corr(_vec(params, a), u))
        elif model == "tl":
            grads.add(("mat", a), np.outer(u, _vec(params, n)))
            grads.add(("vec", n), _mat(params, a).T @ u)
        elif model == "rf":
            grads.add(("vec", a), circ_corr(_role(params, "adj"), u))
            grads.add(("role", "adj"), circ_corr(_vec(params, a), u))
            grads.add(("vec", n), circ_corr(_role(params, "noun"), u))
            grads.add(("role", "noun"), circ_corr(_vec(params, n), u))
        else:
            raise ConfigError(f"unknown model: {model!r}")
        return grads

    s, r, o = phrase.subject, phrase.relation, phrase.obj
    if model == "add":
        grads.add(("vec", s), u)
        grads.add(("vec", r), u)
        grads.add(("vec", o), u)
    elif model == "mult":
        vs, vr, vo = _vec(params, s), _vec(params, r), _vec(params, o)
        grads.add(("vec", s), u * vr * vo)
        grads.add(("vec", r), u * vs * vo)
        grads.add(("vec", o), u * vs * vr)
    elif model == "conv":
        vs, vr, vo = _vec(params, s), _vec(params, r), _vec(params, o)
        inner = circ_conv(vs, vr)
        grads.add(("vec", o), circ_corr(inner, u))
        w = circ_corr(vo, u)
        grads.add(("vec", s), circ_corr(vr, w))
        grads.add(("vec", r), circ_corr(vs, w))
    elif model == "tl":
        vs, vo = _vec(params, s), _vec(params, o)
        mr = _mat(params, r)
        grads.add(("vec", s), u * (mr @ vo))
        w = u * vs
        grads.add(("mat", r), np.outer(w, vo))
        grads.add(("vec", o), mr.T @ w)
    elif model == "rf":
        for word, role in ((s, "subject"), (r, "relation"), (o, "object")):
            grads.add(("vec", word), circ_corr(_role(params, role), u))
            grads.add(("role", role), circ_corr(_vec(params, word), u))
    else:
        raise ConfigError(f"unknown model: {model!r}")
    return grads


def touched_slots(params: ComposerParams, phrase: Phrase) -> list[tuple[str, str]]:
    """Slot keys of every parameter the phrase's composition reads."""
    model = params.model
    if isinstance(phrase, AdjNoun):
        a, n = phrase.adjective, phrase.noun
        if model == "tl":
            return [("mat", a), ("vec", n)]
        slots = [("vec", a), ("vec", n)]
        if model == "rf":
            slots += [("role", "adj"), ("role", "noun")]
        return slots
    s, r, o = phrase.subject, phrase.relation, phrase.obj
    if model == "tl":
        return [("vec", s), ("mat", r), ("vec", o)]
    slots = [("vec", s), ("vec", r), ("vec", o)]
    if model == "rf":
        slots += [("role", "subject"), ("role", "relation"), ("role", "object")]
    return slots


# ---------------------------------------------------------------------------
# checkpoints: npz container with a json metadata entry, lossless at 64-bit
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ComposerParams) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "model": params.model,
        "kind": params.kind,
        "dim": params.dim,
        "logit_scale": params.logit_scale,
        "vectors": sorted(params.vectors),
        "matrices": sorted(params.matrices),
        "roles": sorted(params.roles),
    }
    arrays = {"_meta": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
    for word, v in params.vectors.items():
        arrays[f"vec:{word}"] = v
    for word, m in params.matrices.items():
        arrays[f"mat:{word}"] = m
    for role, v in params.roles.items():
        arrays[f"role:{role}"] = v
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> ComposerParams:
    with np.load(Path(path)) as data:
        meta = json.loads(bytes(data["_meta"]).decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"unsupported checkpoint format: {meta.get('format')!r}")
        params = ComposerParams(
            model=meta["model"],
            kind=meta["kind"],
            dim=int(meta["dim"]),
            logit_scale=float(meta["logit_scale"]),
        )
        for name in data.files:
            if name == "_meta":
                continue
            prefix, key = name.split(":", 1)
            if prefix == "vec":
                params.vectors[key] = data[name]
            elif prefix == "mat":
                params.matrices[key] = data[name]
            elif prefix == "role":
                params.roles[key] = data[name]
    return params
