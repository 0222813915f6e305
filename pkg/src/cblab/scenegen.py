"""Scene and phrase data model plus procedural dataset generation.

Three dataset kinds are supported:

* ``single``     -- one colored object per scene, adjective-noun labels.
* ``two``        -- two objects with distinct shapes and colors, adjective-noun
                    labels with attribute-swap hard distractors.
* ``relational`` -- two objects separated along one spatial axis,
                    subject-relation-object labels.

Scenes are abstract specifications (shape, color, position, size), not
rendered images.  A truth oracle (`relation_holds`) decides whether a phrase
describes a scene, and every generated example is checked against it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

SHAPES = ("cube", "sphere", "cylinder")
COLORS = ("blue", "gray", "yellow", "brown", "green", "purple", "red", "cyan")
RELATIONS = ("left", "right", "front", "behind")

# left/right act on the lateral (x) axis, front/behind on the depth (z) axis
OPPOSITE = {"left": "right", "right": "left", "front": "behind", "behind": "front"}
LATERAL_RELATIONS = ("left", "right")
DEPTH_RELATIONS = ("front", "behind")

# margin in scene units for a spatial relation to count as holding
TAU = 0.5

X_RANGE = (-3.0, 3.0)
Z_RANGE = (-3.0, 3.0)
SIZE_RANGE = (0.3, 0.7)

DATASET_KINDS = ("single", "two", "relational")

# default per-split example counts (train, validation, generalization)
DEFAULT_COUNTS = {
    "single": {"train": 5598, "validation": 799, "generalization": 3195},
    "two": {"train": 20000, "validation": 20000, "generalization": 20000},
    "relational": {"train": 40000, "validation": 20000, "generalization": 20000},
}

MANIFEST_SCHEMA = "cbl-manifest/1"

# serialized relation tokens; one hyphenated token each so labels stay
# space-splittable
RELATION_TOKEN = {
    "left": "left-of",
    "right": "right-of",
    "front": "in-front-of",
    "behind": "behind",
}
TOKEN_RELATION = {tok: rel for rel, tok in RELATION_TOKEN.items()}


class GenerationError(RuntimeError):
    """Raised when rejection sampling cannot satisfy scene constraints."""


class ConfigError(ValueError):
    """Raised for invalid dataset/experiment configuration."""


def opposite(relation: str) -> str:
    """Return the paired relation on the same axis (an involution)."""
    try:
        return OPPOSITE[relation]
    except KeyError:
        raise ConfigError(f"unknown relation: {relation!r}") from None


@dataclass(frozen=True)
class AdjNoun:
    adjective: str
    noun: str

    def __post_init__(self):
        if self.adjective not in COLORS:
            raise ConfigError(f"unknown adjective: {self.adjective!r}")
        if self.noun not in SHAPES:
            raise ConfigError(f"unknown noun: {self.noun!r}")

    def words(self) -> tuple[str, ...]:
        return (self.adjective, self.noun)

    def label(self) -> str:
        return f"{self.adjective} {self.noun}"


@dataclass(frozen=True)
class Rel:
    subject: str
    relation: str
    obj: str

    def __post_init__(self):
        if self.subject not in SHAPES or self.obj not in SHAPES:
            raise ConfigError(f"unknown shape in {self!r}")
        if self.relation not in RELATIONS:
            raise ConfigError(f"unknown relation: {self.relation!r}")
        if self.subject == self.obj:
            raise ConfigError("relational phrase needs distinct subject and object")

    def words(self) -> tuple[str, ...]:
        return (self.subject, self.relation, self.obj)

    def label(self) -> str:
        return f"{self.subject} {RELATION_TOKEN[self.relation]} {self.obj}"


Phrase = Union[AdjNoun, Rel]


def parse_label(text: str) -> Phrase:
    """Inverse of ``Phrase.label()``."""
    parts = text.split()
    if len(parts) == 2:
        return AdjNoun(parts[0], parts[1])
    if len(parts) == 3:
        if parts[1] not in TOKEN_RELATION:
            raise ConfigError(f"unknown relation token: {parts[1]!r}")
        return Rel(parts[0], TOKEN_RELATION[parts[1]], parts[2])
    raise ConfigError(f"cannot parse phrase label: {text!r}")


def adjnoun_universe() -> list[AdjNoun]:
    """All 24 color-shape combinations in canonical order."""
    return [AdjNoun(c, s) for c in COLORS for s in SHAPES]


def relational_universe() -> list[Rel]:
    """All 24 ordered subject-relation-object triples in canonical order."""
    return [
        Rel(s, r, o)
        for s in SHAPES
        for o in SHAPES
        if o != s
        for r in RELATIONS
    ]


def class_splits(kind: str) -> dict[str, list[Phrase]]:
    """Fixed train/validation/generalization class lists for a dataset kind.

    The memberships are constants of the benchmark; only the train list is
    derived (everything not held out).
    """
    if kind in ("single", "two"):
        validation = [AdjNoun("brown", "cube"), AdjNoun("green", "cylinder")]
        generalization = [
            AdjNoun("green", "cube"),
            AdjNoun("purple", "cube"),
            AdjNoun("red", "cube"),
            AdjNoun("cyan", "cube"),
            AdjNoun("blue", "cylinder"),
            AdjNoun("gray", "cylinder"),
            AdjNoun("yellow", "cylinder"),
            AdjNoun("brown", "cylinder"),
        ]
        held_out = set(validation) | set(generalization)
        train = [p for p in adjnoun_universe() if p not in held_out]
    elif kind == "relational":
        validation = [Rel("cube", "front", "sphere"), Rel("sphere", "behind", "cube")]
        generalization = [Rel("cylinder", "front", "cube"), Rel("cube", "behind", "cylinder")]
        held_out = set(validation) | set(generalization)
        train = [p for p in relational_universe() if p not in held_out]
    else:
        raise ConfigError(f"unknown dataset kind: {kind!r}")
    return {"train": train, "validation": validation, "generalization": generalization}


@dataclass
class SceneObject:
    shape: str
    color: str
    x: float
    z: float
    size: float

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigError(f"unknown shape: {self.shape!r}")
        if self.color not in COLORS:
            raise ConfigError(f"unknown color: {self.color!r}")
        if not (X_RANGE[0] <= self.x <= X_RANGE[1]):
            raise ConfigError(f"x coordinate out of range: {self.x}")
        if not (Z_RANGE[0] <= self.z <= Z_RANGE[1]):
            raise ConfigError(f"z coordinate out of range: {self.z}")
        if not (SIZE_RANGE[0] <= self.size <= SIZE_RANGE[1]):
            raise ConfigError(f"size out of range: {self.size}")


@dataclass
class Scene:
    objects: list[SceneObject]

    def __post_init__(self):
        n = len(self.objects)
        if n not in (1, 2):
            raise ConfigError(f"scene must hold 1 or 2 objects, got {n}")
        if n == 2:
            a, b = self.objects
            if a.shape == b.shape:
                raise ConfigError("two-object scene needs distinct shapes")
            if a.color == b.color:
                raise ConfigError("two-object scene needs distinct colors")
            dist = float(np.hypot(a.x - b.x, a.z - b.z))
            if dist <= a.size + b.size:
                raise ConfigError("object bounding circles overlap")


def relation_holds(scene: Scene, phrase: Phrase, tau: float = TAU) -> bool:
    """Truth oracle: does the phrase correctly describe the scene?

    Adjective-noun phrases hold when some object carries both attributes.
    Relational phrases hold when objects of both shapes are present and
    their coordinates satisfy the relation with margin ``tau`` (left/front
    mean strictly smaller x/z).  Mentioning an absent shape yields False.
    """
    if isinstance(phrase, AdjNoun):
        return any(
            o.color == phrase.adjective and o.shape == phrase.noun
            for o in scene.objects
        )
    subj = next((o for o in scene.objects if o.shape == phrase.subject), None)
    obj = next((o for o in scene.objects if o.shape == phrase.obj), None)
    if subj is None or obj is None:
        return False
    if phrase.relation == "left":
        return subj.x + tau <= obj.x
    if phrase.relation == "right":
        return obj.x + tau <= subj.x
    if phrase.relation == "front":
        return subj.z + tau <= obj.z
    if phrase.relation == "behind":
        return obj.z + tau <= subj.z
    raise ConfigError(f"unknown relation: {phrase.relation!r}")


MAX_SAMPLE_ATTEMPTS = 1000


def _uniform(rng, lo, hi):
    return float(rng.uniform(lo, hi))


def _random_object(shape: str, color: str, rng) -> SceneObject:
    return SceneObject(
        shape=shape,
        color=color,
        x=_uniform(rng, *X_RANGE),
        z=_uniform(rng, *Z_RANGE),
        size=_uniform(rng, *SIZE_RANGE),
    )


def sample_scene(kind: str, phrase: Phrase, rng,
                 other: Optional[AdjNoun] = None, tau: float = TAU) -> Scene:
    """Sample a scene that makes ``phrase`` true under the truth oracle.

    For kind ``two`` the label of the second object must be supplied via
    ``other``.  Relational scenes are constrained so the objects separate
    along exactly one axis: the on-axis gap is at least ``tau`` and the
    off-axis offset stays below ``tau``, leaving a single relation pair true.
    Rejection-samples positions; aborts after MAX_SAMPLE_ATTEMPTS.
    """
    if kind == "single":
        if not isinstance(phrase, AdjNoun):
            raise ConfigError("single dataset needs adjective-noun classes")
        return Scene([_random_object(phrase.noun, phrase.adjective, rng)])

    if kind == "two":
        if not isinstance(phrase, AdjNoun) or other is None:
            raise ConfigError("two-object dataset needs two adjective-noun labels")
        if other.noun == phrase.noun or other.adjective == phrase.adjective:
            raise ConfigError("second object must differ in shape and color")
        for _ in range(MAX_SAMPLE_ATTEMPTS):
            a = _random_object(phrase.noun, phrase.adjective, rng)
            b = _random_object(other.noun, other.adjective, rng)
            if np.hypot(a.x - b.x, a.z - b.z) > a.size + b.size:
                return Scene([a, b])
        raise GenerationError("could not place two non-overlapping objects")

    if kind == "relational":
        if not isinstance(phrase, Rel):
            raise ConfigError("relational dataset needs subject-relation-object classes")
        color_idx = rng.choice(len(COLORS), size=2, replace=False)
        c_subj, c_obj = COLORS[color_idx[0]], COLORS[color_idx[1]]
        for _ in range(MAX_SAMPLE_ATTEMPTS):
            subj = _random_object(phrase.subject, c_subj, rng)
            obj = _random_object(phrase.obj, c_obj, rng)
            scene = [subj, obj]
            if np.hypot(subj.x - obj.x, subj.z - obj.z) <= subj.size + obj.size:
                continue
            if phrase.relation in LATERAL_RELATIONS:
                off_axis = abs(subj.z - obj.z)
            else:
                off_axis = abs(subj.x - obj.x)
            if off_axis >= tau:
                continue
            candidate = Scene(scene)
            if relation_holds(candidate, phrase, tau):
                return candidate
        raise GenerationError(f"could not satisfy relational constraints for {phrase}")

    raise ConfigError(f"unknown dataset kind: {kind!r}")


def make_distractors(kind: str, true_phrase: Phrase, rng,
                     other: Optional[AdjNoun] = None) -> list[Phrase]:
    """Build the 4 distractor phrases for an example.

    single      -> 4 distinct labels drawn uniformly from the 23 other
                   color-shape combinations.
    two         -> the two attribute swaps (true adjective with the other
                   noun, other adjective with the true noun) plus 2 drawn
                   from the remaining 20 combinations.
    relational  -> for true aRb, exactly {bRa, aSb, aRc, cRb} with S the
                   opposite relation and c the third shape.
    """
    if kind == "single":
        pool = [p for p in adjnoun_universe() if p != true_phrase]
        idx = rng.choice(len(pool), size=4, replace=False)
        return [pool[i] for i in idx]

    if kind == "two":
        if other is None:
            raise ConfigError("two-object distractors need the other object's label")
        hard = [
            AdjNoun(true_phrase.adjective, other.noun),
            AdjNoun(other.adjective, true_phrase.noun),
        ]
        excluded = {true_phrase, other, *hard}
        pool = [p for p in adjnoun_universe() if p not in excluded]
        idx = rng.choice(len(pool), size=2, replace=False)
        return hard + [pool[i] for i in idx]

    if kind == "relational":
        a, r, b = true_phrase.subject, true_phrase.relation, true_phrase.obj
        c = next(s for s in SHAPES if s not in (a, b))
        return [
            Rel(b, r, a),
            Rel(a, opposite(r), b),
            Rel(a, r, c),
            Rel(c, r, b),
        ]

    raise ConfigError(f"unknown dataset kind: {kind!r}")


@dataclass
class Example:
    id: str
    split: str
    scene: Scene
    true_phrase: Phrase
    distractors: list[Phrase]

    def __post_init__(self):
        if len(self.distractors) != 4:
            raise ConfigError("example needs exactly 4 distractors")
        if len(set(self.distractors)) != 4 or self.true_phrase in self.distractors:
            raise ConfigError("distractors must be distinct and differ from the label")

    def candidates(self) -> list[Phrase]:
        """True phrase first, then the 4 distractors."""
        return [self.true_phrase] + list(self.distractors)


@dataclass
class DatasetManifest:
    kind: str
    seed: int
    tau: float
    classes: dict[str, list[Phrase]]
    examples: dict[str, list[Example]] = field(default_factory=dict)

    def __post_init__(self):
        lists = list(self.classes.values())
        for i in range(len(lists)):
            for j in range(i + 1, len(lists)):
                if set(lists[i]) & set(lists[j]):
                    raise ConfigError("class lists of different splits overlap")

    def all_examples(self) -> list[Example]:
        out = []
        for split in ("train", "validation", "generalization"):
            out.extend(self.examples.get(split, []))
        return out


def _split_counts(total: int, n_classes: int) -> list[int]:
    """Distribute ``total`` examples as evenly as possible over classes."""
    base, rem = divmod(total, n_classes)
    return [base + (1 if i < rem else 0) for i in range(n_classes)]


def _example_rng(seed: int, index: int):
    # per-example stream so generation is order-independent and parallelizable
    return np.random.default_rng(np.random.SeedSequence((seed, index)))


def build_dataset(kind: str, counts: Optional[dict[str, int]] = None,
                  seed: int = 0) -> DatasetManifest:
    """Generate a full dataset manifest; pure function of (kind, counts, seed)."""
    if kind not in DATASET_KINDS:
        raise ConfigError(f"unknown dataset kind: {kind!r}")
    if counts is None:
        counts = DEFAULT_COUNTS[kind]
    splits = class_splits(kind)
    manifest = DatasetManifest(kind=kind, seed=seed, tau=TAU, classes=splits)

    index = 0
    for split in ("train", "validation", "generalization"):
        total = int(counts.get(split, 0))
        if total < 0:
            raise ConfigError(f"negative example count for split {split!r}")
        examples: list[Example] = []
        if total:
            per_class = _split_counts(total, len(splits[split]))
            for phrase, n in zip(splits[split], per_class):
                for _ in range(n):
                    rng = _example_rng(seed, index)
                    examples.append(_generate_example(kind, phrase, split, index, rng))
                    index += 1
        manifest.examples[split] = examples
    return manifest


def _generate_example(kind: str, phrase: Phrase, split: str, index: int, rng) -> Example:
    other = None
    if kind == "two":
        pool = [
            p for p in adjnoun_universe()
            if p.noun != phrase.noun and p.adjective != phrase.adjective
        ]
        other = pool[int(rng.integers(len(pool)))]
    scene = sample_scene(kind, phrase, rng, other=other)
    distractors = make_distractors(kind, phrase, rng, other=other)
    example = Example(
        id=f"{kind}-{index:06d}",
        split=split,
        scene=scene,
        true_phrase=phrase,
        distractors=distractors,
    )
    if not relation_holds(scene, phrase):
        raise GenerationError(f"generated scene does not satisfy {phrase}")
    for d in distractors:
        if relation_holds(scene, d):
            raise GenerationError(f"distractor {d} is true for scene of {phrase}")
    return example


# ---------------------------------------------------------------------------
# manifest serialization (JSONL: one header line, then one record per example)
# ---------------------------------------------------------------------------

def _scene_to_json(scene: Scene):
    return [
        {"shape": o.shape, "color": o.color, "x": o.x, "z": o.z, "size": o.size}
        for o in scene.objects
    ]


def _scene_from_json(data) -> Scene:
    return Scene([SceneObject(**obj) for obj in data])


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "schema": MANIFEST_SCHEMA,
        "kind": manifest.kind,
        "seed": manifest.seed,
        "tau": manifest.tau,
        "classes": {
            split: [p.label() for p in phrases]
            for split, phrases in manifest.classes.items()
        },
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header) + "\n")
        for ex in manifest.all_examples():
            record = {
                "id": ex.id,
                "split": ex.split,
                "kind": manifest.kind,
                "scene": _scene_to_json(ex.scene),
                "label": ex.true_phrase.label(),
                "distractors": [d.label() for d in ex.distractors],
            }
            fh.write(json.dumps(record) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != MANIFEST_SCHEMA:
            raise ConfigError(f"unsupported manifest schema: {header.get('schema')!r}")
        classes = {
            split: [parse_label(lbl) for lbl in labels]
            for split, labels in header["classes"].items()
        }
        manifest = DatasetManifest(
            kind=header["kind"],
            seed=header["seed"],
            tau=header["tau"],
            classes=classes,
            examples={"train": [], "validation": [], "generalization": []},
        )
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            example = Example(
                id=rec["id"],
                split=rec["split"],
                scene=_scene_from_json(rec["scene"]),
                true_phrase=parse_label(rec["label"]),
                distractors=[parse_label(d) for d in rec["distractors"]],
            )
            manifest.examples.setdefault(rec["split"], []).append(example)
    return manifest

