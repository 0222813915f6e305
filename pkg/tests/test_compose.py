import numpy as np
import pytest

from cblab import compose as cp
from cblab import gradcheck as gc
from cblab.scenegen import AdjNoun, Rel


def rng(seed=0):
    return np.random.default_rng(seed)


def direct_conv_oracle(a, b):
    # independent double-loop definition of circular convolution
    d = len(a)
    out = np.zeros(d)
    for i in range(d):
        for j in range(d):
            out[i] += a[j] * b[(i - j) % d]
    return out


def cosine(u, v):
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


# ---------------------------------------------------------------------------
# convolution algebra
# ---------------------------------------------------------------------------

def test_circ_conv_small_example():
    # c0 = 1*3 + 2*4 = 11, c1 = 1*4 + 2*3 = 10
    a, b = np.array([1.0, 2.0]), np.array([3.0, 4.0])
    np.testing.assert_allclose(cp.circ_conv(a, b, method="direct"), [11.0, 10.0])
    np.testing.assert_allclose(cp.circ_conv(a, b, method="fft"), [11.0, 10.0], atol=1e-12)


def test_circ_conv_identity_element():
    r = rng(1)
    a = r.standard_normal(32)
    e0 = np.zeros(32)
    e0[0] = 1.0
    np.testing.assert_allclose(cp.circ_conv(a, e0), a, atol=1e-12)


def test_circ_conv_commutative_associative_bilinear():
    r = rng(2)
    a, b, c = (r.standard_normal(24) for _ in range(3))
    np.testing.assert_allclose(cp.circ_conv(a, b), cp.circ_conv(b, a), atol=1e-10)
    np.testing.assert_allclose(
        cp.circ_conv(cp.circ_conv(a, b), c),
        cp.circ_conv(a, cp.circ_conv(b, c)), atol=1e-10)
    np.testing.assert_allclose(
        cp.circ_conv(2.0 * a + b, c),
        2.0 * cp.circ_conv(a, c) + cp.circ_conv(b, c), atol=1e-10)


@pytest.mark.parametrize("d", [8, 64, 257, 1024])
def test_fft_matches_direct(d):
    r = rng(d)
    a, b = r.standard_normal(d), r.standard_normal(d)
    fft = cp.circ_conv(a, b, method="fft")
    direct = cp.circ_conv(a, b, method="direct")
    assert np.max(np.abs(fft - direct)) / max(np.max(np.abs(direct)), 1.0) < 1e-9


def test_fft_matches_double_loop_oracle():
    r = rng(5)
    a, b = r.standard_normal(16), r.standard_normal(16)
    np.testing.assert_allclose(cp.circ_conv(a, b), direct_conv_oracle(a, b), atol=1e-10)


def test_circ_conv_dimension_mismatch():
    with pytest.raises(cp.ConfigError):
        cp.circ_conv(np.ones(4), np.ones(5))


def test_involution():
    np.testing.assert_array_equal(cp.involution(np.array([1.0, 2.0, 3.0])), [1.0, 3.0, 2.0])


def test_circ_corr_identity():
    r = rng(3)
    b = r.standard_normal(16)
    e0 = np.zeros(16)
    e0[0] = 1.0
    np.testing.assert_allclose(cp.circ_corr(e0, b), b, atol=1e-12)


def test_circ_corr_is_involution_conv():
    r = rng(4)
    a, b = r.standard_normal(20), r.standard_normal(20)
    np.testing.assert_allclose(cp.circ_corr(a, b),
                               cp.circ_conv(cp.involution(a), b), atol=1e-10)


def test_approximate_unbinding():
    # decode fidelity of corr(a, conv(a, b)) against b for random unit pairs;
    # the expected cosine concentrates near 1/sqrt(2) at this dimension
    r = rng(6)
    d = 512
    cos = []
    for _ in range(100):
        a = r.standard_normal(d)
        a /= np.linalg.norm(a)
        b = r.standard_normal(d)
        b /= np.linalg.norm(b)
        dec = cp.circ_corr(a, cp.circ_conv(a, b))
        cos.append(cosine(dec, b))
    assert np.mean(cos) > 0.65  # far above the ~0.04 chance level


# ---------------------------------------------------------------------------
# composition forward
# ---------------------------------------------------------------------------

def params_with(model, kind="single", dim=8, seed=0):
    return cp.init_params(model, cp.vocab_for_kind(kind), dim, seed, kind=kind)


def test_compose_add_sum():
    p = params_with("add", dim=2)
    p.vectors["red"] = np.array([1.0, 0.0])
    p.vectors["cube"] = np.array([0.0, 1.0])
    np.testing.assert_array_equal(cp.compose(p, AdjNoun("red", "cube")), [1.0, 1.0])


def test_compose_mult_relational():
    p = params_with("mult", kind="relational", dim=2)
    p.vectors["cube"] = np.array([1.0, 2.0])
    p.vectors["left"] = np.array([3.0, 4.0])
    p.vectors["sphere"] = np.array([5.0, 6.0])
    np.testing.assert_array_equal(
        cp.compose(p, Rel("cube", "left", "sphere")), [15.0, 48.0])


def test_compose_tl_identity_matrix():
    p = params_with("tl", dim=6)
    p.matrices["red"] = np.eye(6)
    noun = p.vectors["cube"]
    np.testing.assert_allclose(cp.compose(p, AdjNoun("red", "cube")), noun)


def test_compose_rf_identity_roles():
    p = params_with("rf", dim=8)
    e0 = np.zeros(8)
    e0[0] = 1.0
    p.roles["adj"] = e0.copy()
    p.roles["noun"] = e0.copy()
    expected = p.vectors["red"] + p.vectors["cube"]
    np.testing.assert_allclose(cp.compose(p, AdjNoun("red", "cube")), expected, atol=1e-12)


def test_compose_missing_word():
    p = params_with("add", dim=4)
    del p.vectors["red"]
    with pytest.raises(cp.VocabularyError):
        cp.compose(p, AdjNoun("red", "cube"))


# ---------------------------------------------------------------------------
# commutativity and its absence
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("model", ["add", "mult", "conv"])
def test_commutative_models_swap_invariant(model):
    r = rng(7)
    for trial in range(50):
        p = params_with(model, kind="relational", dim=32, seed=trial)
        phrase = gc.random_phrase("relational", r)
        swapped = Rel(phrase.obj, phrase.relation, phrase.subject)
        t1 = cp.compose(p, phrase)
        t2 = cp.compose(p, swapped)
        scale = max(np.max(np.abs(t1)), 1.0)
        assert np.max(np.abs(t1 - t2)) / scale < 1e-9


@pytest.mark.parametrize("model", ["tl", "rf"])
def test_order_sensitive_models_differ(model):
    for seed in range(20):
        p = params_with(model, kind="relational", dim=16, seed=seed)
        t1 = cp.compose(p, Rel("cube", "left", "sphere"))
        t2 = cp.compose(p, Rel("sphere", "left", "cube"))
        assert cosine(t1, t2) < 0.999


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def test_backward_add_linear():
    p = params_with("add", dim=4)
    u = np.array([1.0, -2.0, 0.5, 3.0])
    grads = cp.backward(p, AdjNoun("red", "cube"), u)
    np.testing.assert_array_equal(grads.get(("vec", "red")), u)
    np.testing.assert_array_equal(grads.get(("vec", "cube")), u)


def test_backward_tl_scalar_outer_product():
    p = params_with("tl", dim=1)
    p.matrices["red"] = np.array([[2.0]])
    p.vectors["cube"] = np.array([3.0])
    u = np.array([5.0])
    grads = cp.backward(p, AdjNoun("red", "cube"), u)
    np.testing.assert_allclose(grads.get(("mat", "red")), [[15.0]])  # u * n
    np.testing.assert_allclose(grads.get(("vec", "cube")), [10.0])   # A^T u


@pytest.mark.parametrize("model", cp.MODELS)
@pytest.mark.parametrize("kind", ["single", "relational"])
def test_backward_matches_finite_differences(model, kind):
    result = gc.run_gradcheck(model, kind, dim=8, trials=10, seed=11)
    assert result["max_rel_error"] < 1e-5


# ---------------------------------------------------------------------------
# init and parameter counts
# ---------------------------------------------------------------------------

def test_init_deterministic():
    vocab = cp.vocab_for_kind("single")
    p1 = cp.init_params("rf", vocab, 32, seed=9)
    p2 = cp.init_params("rf", vocab, 32, seed=9)
    for (s1, a1), (s2, a2) in zip(p1.slots(), p2.slots()):
        assert s1 == s2
        np.testing.assert_array_equal(a1, a2)


def test_init_add_vocab_size():
    p = cp.init_params("add", cp.vocab_for_kind("single"), 768, seed=0)
    assert len(p.vectors) == 11  # 8 colors + 3 shapes


def test_init_tl_matrices_near_identity():
    dim = 12
    deviations = []
    for seed in range(100):
        p = cp.init_params("tl", cp.vocab_for_kind("single"), dim, seed=seed)
        deviations.append(np.mean(p.matrices["red"] - np.eye(dim)))
    assert abs(np.mean(deviations)) < 0.01


def test_init_bad_dim():
    with pytest.raises(cp.ConfigError):
        cp.init_params("add", cp.vocab_for_kind("single"), 0, seed=0)


PARAM_COUNT_TABLE = [
    ("add", "single", 8448), ("add", "relational", 5376),
    ("mult", "single", 8448), ("mult", "relational", 5376),
    ("conv", "two", 8448), ("conv", "relational", 5376),
    ("rf", "single", 9984), ("rf", "relational", 7680),
    ("tl", "single", 4_720_896), ("tl", "relational", 2_361_600),
]


@pytest.mark.parametrize("model,kind,expected", PARAM_COUNT_TABLE)
def test_param_count(model, kind, expected):
    assert cp.param_count(model, kind, 768) == expected


def test_param_count_matches_init():
    for model in cp.MODELS:
        for kind in ("single", "relational"):
            params = cp.init_params(model, cp.vocab_for_kind(kind), 16, 0, kind=kind)
            total = sum(arr.size for _, arr in params.slots())
            assert total == cp.param_count(model, kind, 16)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    for model in cp.MODELS:
        p = params_with(model, kind="relational", dim=16, seed=4)
        path = tmp_path / f"{model}.npz"
        cp.save_checkpoint(path, p)
        back = cp.load_checkpoint(path)
        assert back.model == p.model and back.dim == p.dim and back.kind == p.kind
        assert back.logit_scale == p.logit_scale
        for slot, arr in p.slots():
            np.testing.assert_array_equal(back.get_slot(slot), arr)


def test_checkpoint_format_tag(tmp_path):
    p = params_with("add", dim=8)
    path = tmp_path / "a.npz"
    cp.save_checkpoint(path, p)
    import json

    with np.load(path) as data:
        meta = json.loads(bytes(data["_meta"]).decode())
    assert meta["format"] == cp.CHECKPOINT_FORMAT
