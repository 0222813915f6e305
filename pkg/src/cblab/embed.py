"""Frozen image embeddings: oracle encoders plus an interchange file format.

The encoders stand in for a pretrained image tower and are never trained:

* ``bag``        -- sums the concept vectors of every color and shape present.
                    Deliberately order- and binding-insensitive, so scenes
                    that differ only by swapping attributes between objects
                    embed identically.
* ``structured`` -- additive concept content plus binding terms: each object
                    contributes its color/shape vectors, a color(*)shape
                    circular-convolution binding, and (for two-object scenes)
                    shape(*)rank bindings for its lateral and depth rank.
* ``raster``     -- rasterizes the scene to a small RGB canvas and applies a
                    fixed seeded random projection.

Concept vectors are drawn once per (seed, dim), i.i.d. N(0, 1/d) per
component and unit-normalized, then frozen.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scenegen import COLORS, RELATIONS, SHAPES, Scene

RANK_ROLES = ("leftmost", "rightmost", "frontmost", "backmost")
CONCEPT_NAMES = tuple(COLORS) + tuple(SHAPES) + tuple(RELATIONS) + RANK_ROLES

DEFAULT_DIM = 256
DEFAULT_SIGMA = 0.05

ENCODER_KINDS = ("bag", "structured", "raster")

# color names to RGB in [0, 1] for the raster encoder
RASTER_RGB = {
    "blue": (0.16, 0.29, 0.84),
    "gray": (0.53, 0.53, 0.53),
    "yellow": (1.0, 0.93, 0.2),
    "brown": (0.55, 0.35, 0.17),
    "green": (0.11, 0.65, 0.25),
    "purple": (0.51, 0.15, 0.75),
    "red": (0.87, 0.15, 0.15),
    "cyan": (0.19, 0.8, 0.84),
}


class EmbeddingError(ValueError):
    """Raised for invalid embedding values or operations."""


class EmbeddingFormatError(ValueError):
    """Raised when an interchange file violates the format contract."""


def normalize(v: np.ndarray) -> np.ndarray:
    """Return v / ||v||_2; the zero vector has no direction and is rejected."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise EmbeddingError("cannot normalize the zero vector")
    return v / norm


def _circ_conv(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # local FFT convolution; the compose module re-exports the full-featured one
    fa = np.fft.rfft(a)
    fb = np.fft.rfft(b)
    return np.fft.irfft(fa * fb, n=a.shape[0])


@dataclass
class ConceptTable:
    """Frozen map from concept name to a fixed unit vector."""

    dim: int
    seed: int
    vectors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.vectors[name]


def make_concept_table(seed: int, dim: int = DEFAULT_DIM) -> ConceptTable:
    if dim <= 0:
        raise EmbeddingError(f"dimension must be positive, got {dim}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5EED)))
    vectors = {}
    for name in CONCEPT_NAMES:
        v = rng.normal(0.0, 1.0 / np.sqrt(dim), size=dim)
        vectors[name] = normalize(v)
    return ConceptTable(dim=dim, seed=seed, vectors=vectors)


def _add_noise(vec: np.ndarray, sigma: float, rng) -> np.ndarray:
    if sigma == 0.0:
        return vec
    if sigma < 0:
        raise EmbeddingError(f"noise scale must be non-negative, got {sigma}")
    if rng is None:
        raise EmbeddingError("noise requires an rng")
    return vec + sigma * rng.standard_normal(vec.shape[0])


def encode_bag(scene: Scene, table: ConceptTable, sigma: float = 0.0, rng=None) -> np.ndarray:
    """Order-free sum of the concept vectors present in the scene.

    Summation runs in fixed concept-table order over concept counts, so two
    scenes with the same multiset of colors and shapes produce bit-identical
    vectors at sigma=0 regardless of which object carries which attribute.
    """
    counts: dict[str, int] = {}
    for obj in scene.objects:
        counts[obj.color] = counts.get(obj.color, 0) + 1
        counts[obj.shape] = counts.get(obj.shape, 0) + 1
    acc = np.zeros(table.dim)
    for name in CONCEPT_NAMES:
        c = counts.get(name, 0)
        if c:
            acc = acc + c * table[name]
    return _add_noise(acc, sigma, rng)


def _rank_roles(scene: Scene) -> list[tuple[str, str]]:
    """Per-object (lateral_rank, depth_rank) role names for a 2-object scene."""
    a, b = scene.objects
    if a.x <= b.x:
        xr = ["leftmost", "rightmost"]
    else:
        xr = ["rightmost", "leftmost"]
    if a.z <= b.z:
        zr = ["frontmost", "backmost"]
    else:
        zr = ["backmost", "frontmost"]
    return list(zip(xr, zr))


def encode_structured(scene: Scene, table: ConceptTable, sigma: float = 0.0, rng=None) -> np.ndarray:
    """Binding-capable encoder: additive concepts plus convolution bindings.

    Every object contributes t[color] + t[shape] (recoverable by purely
    additive readers) and the binding term conv(t[color], t[shape]).  In
    two-object scenes each object additionally contributes
    conv(t[shape], t[rank]) for its lateral rank (leftmost/rightmost) and
    depth rank (frontmost/backmost), which is what makes spatial relations
    decodable at all.
    """
    acc = encode_bag(scene, table, sigma=0.0)
    for obj in scene.objects:
        acc = acc + _circ_conv(table[obj.color], table[obj.shape])
    if len(scene.objects) == 2:
        for obj, (xrank, zrank) in zip(scene.objects, _rank_roles(scene)):
            acc = acc + _circ_conv(table[obj.shape], table[xrank])
            acc = acc + _circ_conv(table[obj.shape], table[zrank])
    return _add_noise(acc, sigma, rng)


def _rasterize(scene: Scene, grid: int) -> np.ndarray:
    """Paint filled silhouettes on a grid x grid x 3 canvas, far objects first."""
    canvas = np.zeros((grid, grid, 3))
    # scene coordinates in [-3.7, 3.7] (centers +- max size) map onto the canvas
    extent = 3.0 + 0.7
    rows, cols = np.mgrid[0:grid, 0:grid].astype(float)

    def to_px(v):
        return (v + extent) / (2 * extent) * (grid - 1)

    for obj in sorted(scene.objects, key=lambda o: -o.z):
        cx, cz = to_px(obj.x), to_px(obj.z)
        radius = max(obj.size / (2 * extent) * (grid - 1), 0.5)
        dx = cols - cx
        dz = rows - cz
        if obj.shape == "sphere":
            mask = dx * dx + dz * dz <= radius * radius
        elif obj.shape == "cube":
            mask = (np.abs(dx) <= radius) & (np.abs(dz) <= radius)
        else:  # cylinder: upward triangle silhouette
            mask = (dz <= radius) & (dz >= -radius) & (np.abs(dx) <= (radius + dz) / 2)
        # small objects can miss every pixel center; always mark the nearest one
        mask[min(max(int(round(cz)), 0), grid - 1), min(max(int(round(cx)), 0), grid - 1)] = True
        canvas[mask] = RASTER_RGB[obj.color]
    return canvas


def encode_raster(scene: Scene, grid: int = 16, projection_seed: int = 0,
                  dim: int = DEFAULT_DIM) -> np.ndarray:
    """Rasterize the scene and apply a fixed seeded random projection."""
    if grid < 8:
        raise EmbeddingError(f"raster grid must be >= 8, got {grid}")
    canvas = _rasterize(scene, grid)
    flat = canvas.reshape(-1)
    rng = np.random.default_rng(np.random.SeedSequence((projection_seed, 0xCA17, grid, dim)))
    projection = rng.normal(0.0, 1.0 / np.sqrt(flat.shape[0]), size=(dim, flat.shape[0]))
    return projection @ flat


# ---------------------------------------------------------------------------
# encoder factory + manifest-wide embedding computation
# ---------------------------------------------------------------------------

@dataclass
class EncoderSpec:
    kind: str                      # bag | structured | raster | import
    dim: int = DEFAULT_DIM
    sigma: float = DEFAULT_SIGMA
    grid: int = 16
    import_path: str = ""

    def describe(self) -> str:
        if self.kind == "import":
            return f"import:{self.import_path}"
        if self.kind == "raster":
            return f"raster(grid={self.grid}, dim={self.dim})"
        return f"{self.kind}(dim={self.dim}, sigma={self.sigma})"


def compute_embeddings(manifest, spec: EncoderSpec, seed: int) -> dict[str, np.ndarray]:
    """Embed every example in the manifest once; keyed by example id.

    Deterministic given (manifest, spec, seed): the concept table derives
    from the seed and each example gets its own noise stream.
    """
    examples = manifest.all_examples()
    if spec.kind == "import":
        imported = import_embeddings(spec.import_path)
        missing = [ex.id for ex in examples if ex.id not in imported]
        if missing:
            raise EmbeddingFormatError(
                f"imported embeddings miss {len(missing)} example ids (first: {missing[0]})"
            )
        return {ex.id: imported[ex.id] for ex in examples}

    if spec.kind in ("bag", "structured"):
        table = make_concept_table(seed, spec.dim)
        encode = encode_bag if spec.kind == "bag" else encode_structured
        out = {}
        for i, ex in enumerate(examples):
            rng = np.random.default_rng(np.random.SeedSequence((seed, 0x401E, i)))
            out[ex.id] = encode(ex.scene, table, sigma=spec.sigma, rng=rng)
        return out

    if spec.kind == "raster":
        return {
            ex.id: encode_raster(ex.scene, grid=spec.grid, projection_seed=seed, dim=spec.dim)
            for ex in examples
        }

    raise EmbeddingError(f"unknown encoder kind: {spec.kind!r}")


# ---------------------------------------------------------------------------
# interchange format: "dim=<d> count=<n>" header then "<id> f1 ... fd" rows
# ---------------------------------------------------------------------------

def export_embeddings(path, embeddings: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not embeddings:
        raise EmbeddingFormatError("refusing to export an empty embedding map")
    dims = {v.shape[0] for v in embeddings.values()}
    if len(dims) != 1:
        raise EmbeddingFormatError(f"inconsistent embedding dimensions: {sorted(dims)}")
    dim = dims.pop()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"dim={dim} count={len(embeddings)}\n")
        for key, vec in embeddings.items():
            fh.write(key + " " + " ".join(repr(float(x)) for x in vec) + "\n")


def import_embeddings(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        fields = dict(part.split("=", 1) for part in header.split())
        try:
            dim = int(fields["dim"])
            count = int(fields["count"])
        except (KeyError, ValueError):
            raise EmbeddingFormatError(f"malformed header: {header!r}") from None
        out: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split()
            key, values = parts[0], parts[1:]
            if len(values) != dim:
                raise EmbeddingFormatError(
                    f"line {lineno}: expected {dim} values, got {len(values)}"
                )
            if key in out:
                raise EmbeddingFormatError(f"line {lineno}: duplicate id {key!r}")
            vec = np.array([float(v) for v in values])
            if not np.all(np.isfinite(vec)):
                raise EmbeddingFormatError(f"line {lineno}: non-finite value")
            out[key] = vec
    if len(out) != count:
        raise EmbeddingFormatError(f"header promised {count} rows, found {len(out)}")
    return out
