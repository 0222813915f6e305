import numpy as np
import pytest

from cblab import embed as em
from cblab import scenegen as sg
from cblab.compose import circ_conv


def table(dim=128, seed=0):
    return em.make_concept_table(seed, dim)


def scene_pair_swapped():
    a = sg.Scene([
        sg.SceneObject("cube", "red", -1.0, 0.2, 0.4),
        sg.SceneObject("sphere", "yellow", 1.2, -0.5, 0.5),
    ])
    b = sg.Scene([
        sg.SceneObject("cube", "yellow", -1.0, 0.2, 0.4),
        sg.SceneObject("sphere", "red", 1.2, -0.5, 0.5),
    ])
    return a, b


def cosine(u, v):
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


# ---------------------------------------------------------------------------
# normalize
# ---------------------------------------------------------------------------

def test_normalize_345():
    np.testing.assert_allclose(em.normalize(np.array([3.0, 4.0])), [0.6, 0.8])


def test_normalize_idempotent():
    v = em.normalize(np.random.default_rng(0).standard_normal(16))
    np.testing.assert_allclose(em.normalize(v), v, atol=1e-12)
    assert abs(np.linalg.norm(v) - 1.0) < 1e-9


def test_normalize_zero_vector():
    with pytest.raises(em.EmbeddingError):
        em.normalize(np.zeros(4))


# ---------------------------------------------------------------------------
# concept table
# ---------------------------------------------------------------------------

def test_concept_table_deterministic_and_unit():
    t1, t2 = table(seed=5), table(seed=5)
    for name in em.CONCEPT_NAMES:
        np.testing.assert_array_equal(t1[name], t2[name])
        assert abs(np.linalg.norm(t1[name]) - 1.0) < 1e-9
    t3 = table(seed=6)
    assert not np.array_equal(t1["red"], t3["red"])


# ---------------------------------------------------------------------------
# bag encoder
# ---------------------------------------------------------------------------

def test_bag_single_object_sum():
    t = table()
    scene = sg.Scene([sg.SceneObject("cube", "red", 0.5, 0.0, 0.5)])
    np.testing.assert_array_equal(em.encode_bag(scene, t), t["red"] + t["cube"])


def test_bag_two_object_sum():
    t = table()
    a, _ = scene_pair_swapped()
    expected = t["red"] + t["cube"] + t["yellow"] + t["sphere"]
    np.testing.assert_allclose(em.encode_bag(a, t), expected, atol=1e-12)


def test_bag_swap_bit_identical():
    t = table()
    a, b = scene_pair_swapped()
    assert np.array_equal(em.encode_bag(a, t), em.encode_bag(b, t))


def test_bag_position_invariance():
    t = table()
    a = sg.Scene([sg.SceneObject("cube", "red", -2.0, -2.0, 0.4)])
    b = sg.Scene([sg.SceneObject("cube", "red", 2.5, 1.0, 0.6)])
    assert np.array_equal(em.encode_bag(a, t), em.encode_bag(b, t))


def test_bag_noise_seeded():
    t = table()
    scene = sg.Scene([sg.SceneObject("cube", "red", 0.0, 0.0, 0.5)])
    r1 = np.random.default_rng(3)
    r2 = np.random.default_rng(3)
    v1 = em.encode_bag(scene, t, sigma=0.05, rng=r1)
    v2 = em.encode_bag(scene, t, sigma=0.05, rng=r2)
    np.testing.assert_array_equal(v1, v2)
    assert not np.array_equal(v1, em.encode_bag(scene, t))
    with pytest.raises(em.EmbeddingError):
        em.encode_bag(scene, t, sigma=0.05, rng=None)


# ---------------------------------------------------------------------------
# structured encoder
# ---------------------------------------------------------------------------

def test_structured_single_object_terms():
    # additive concept content plus the color(*)shape binding
    t = table()
    scene = sg.Scene([sg.SceneObject("cube", "red", 0.0, 0.0, 0.5)])
    expected = t["red"] + t["cube"] + circ_conv(t["red"], t["cube"])
    np.testing.assert_allclose(em.encode_structured(scene, t), expected, atol=1e-12)


def test_structured_contains_rank_binding():
    t = table()
    scene = sg.Scene([
        sg.SceneObject("cube", "red", -1.0, 0.0, 0.4),
        sg.SceneObject("sphere", "yellow", 1.0, 0.3, 0.4),
    ])
    emb = em.encode_structured(scene, t)
    known = (t["red"] + t["cube"] + t["yellow"] + t["sphere"]
             + circ_conv(t["red"], t["cube"]) + circ_conv(t["yellow"], t["sphere"])
             + circ_conv(t["sphere"], t["rightmost"])
             + circ_conv(t["cube"], t["frontmost"])
             + circ_conv(t["sphere"], t["backmost"]))
    residual = emb - known
    np.testing.assert_allclose(residual, circ_conv(t["cube"], t["leftmost"]), atol=1e-10)


def test_structured_swapped_colors_differ():
    # 100 random tables at d=256: attribute swap must change the embedding
    a, b = scene_pair_swapped()
    for seed in range(100):
        t = table(dim=256, seed=seed)
        c = cosine(em.encode_structured(a, t), em.encode_structured(b, t))
        assert c < 0.99


def test_structured_relation_reversal_differs():
    scene = sg.Scene([
        sg.SceneObject("cube", "red", -1.5, 0.1, 0.4),
        sg.SceneObject("sphere", "yellow", 1.5, -0.1, 0.4),
    ])
    mirrored = sg.Scene([
        sg.SceneObject("cube", "red", 1.5, 0.1, 0.4),
        sg.SceneObject("sphere", "yellow", -1.5, -0.1, 0.4),
    ])
    for seed in range(20):
        t = table(dim=256, seed=seed)
        c = cosine(em.encode_structured(scene, t), em.encode_structured(mirrored, t))
        assert c < 0.99


# ---------------------------------------------------------------------------
# raster encoder
# ---------------------------------------------------------------------------

def test_raster_deterministic():
    scene = sg.Scene([sg.SceneObject("sphere", "green", 0.0, 0.0, 0.6)])
    v1 = em.encode_raster(scene, grid=8, projection_seed=1, dim=32)
    v2 = em.encode_raster(scene, grid=8, projection_seed=1, dim=32)
    np.testing.assert_array_equal(v1, v2)


def test_raster_color_sensitivity():
    a = sg.Scene([sg.SceneObject("sphere", "green", 0.0, 0.0, 0.6)])
    b = sg.Scene([sg.SceneObject("sphere", "red", 0.0, 0.0, 0.6)])
    va = em.encode_raster(a, grid=8, projection_seed=1, dim=32)
    vb = em.encode_raster(b, grid=8, projection_seed=1, dim=32)
    assert not np.allclose(va, vb)


def test_raster_grid_minimum():
    scene = sg.Scene([sg.SceneObject("sphere", "green", 0.0, 0.0, 0.6)])
    with pytest.raises(em.EmbeddingError):
        em.encode_raster(scene, grid=4)


def test_raster_empty_canvas_is_zero():
    # linearity of the projection: the all-zero image maps to the zero vector
    canvas = np.zeros((8, 8, 3))
    rng = np.random.default_rng(np.random.SeedSequence((1, 0xCA17, 8, 32)))
    projection = rng.normal(0.0, 1.0 / np.sqrt(canvas.size), size=(32, canvas.size))
    np.testing.assert_array_equal(projection @ canvas.reshape(-1), np.zeros(32))


# ---------------------------------------------------------------------------
# interchange format
# ---------------------------------------------------------------------------

def test_export_import_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    data = {f"ex-{i}": rng.standard_normal(6) for i in range(4)}
    path = tmp_path / "emb.txt"
    em.export_embeddings(path, data)
    back = em.import_embeddings(path)
    assert set(back) == set(data)
    for key in data:
        np.testing.assert_allclose(back[key], data[key], atol=1e-6)


def test_import_header_and_rows(tmp_path):
    path = tmp_path / "emb.txt"
    path.write_text("dim=4 count=2\na 1 2 3 4\nb 5 6 7 8\n")
    out = em.import_embeddings(path)
    assert len(out) == 2
    np.testing.assert_array_equal(out["a"], [1, 2, 3, 4])


def test_import_dimension_mismatch(tmp_path):
    path = tmp_path / "emb.txt"
    path.write_text("dim=4 count=1\na 1 2 3\n")
    with pytest.raises(em.EmbeddingFormatError):
        em.import_embeddings(path)


def test_import_duplicate_id(tmp_path):
    path = tmp_path / "emb.txt"
    path.write_text("dim=2 count=2\na 1 2\na 3 4\n")
    with pytest.raises(em.EmbeddingFormatError):
        em.import_embeddings(path)


def test_import_non_finite(tmp_path):
    path = tmp_path / "emb.txt"
    path.write_text("dim=2 count=1\na 1 nan\n")
    with pytest.raises(em.EmbeddingFormatError):
        em.import_embeddings(path)


def test_import_count_mismatch(tmp_path):
    path = tmp_path / "emb.txt"
    path.write_text("dim=2 count=3\na 1 2\n")
    with pytest.raises(em.EmbeddingFormatError):
        em.import_embeddings(path)


# ---------------------------------------------------------------------------
# manifest-wide embedding computation
# ---------------------------------------------------------------------------

def test_compute_embeddings_deterministic():
    manifest = sg.build_dataset("single", {"train": 14, "validation": 2, "generalization": 8}, seed=0)
    spec = em.EncoderSpec(kind="structured", dim=64, sigma=0.05)
    e1 = em.compute_embeddings(manifest, spec, seed=3)
    e2 = em.compute_embeddings(manifest, spec, seed=3)
    assert set(e1) == {ex.id for ex in manifest.all_examples()}
    for k in e1:
        np.testing.assert_array_equal(e1[k], e2[k])


def test_compute_embeddings_import_requires_coverage(tmp_path):
    manifest = sg.build_dataset("single", {"train": 3, "validation": 0, "generalization": 0}, seed=0)
    partial = {manifest.examples["train"][0].id: np.ones(4)}
    path = tmp_path / "emb.txt"
    em.export_embeddings(path, partial)
    spec = em.EncoderSpec(kind="import", import_path=str(path))
    with pytest.raises(em.EmbeddingFormatError):
        em.compute_embeddings(manifest, spec, seed=0)
