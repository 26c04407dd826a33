import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lafavlad.errors import DimensionError, ValidationError
from lafavlad.lafa import LAFA, LafaOptions, _relative, adaptive_weights, encode_local_info
from lafavlad.neighborhood import knn
from lafavlad.numerics import DiffArray, ParamStore, check_gradients, multiply, reduce


def make_inputs(rng, n=16, k=4, c=8):
    pos = rng.uniform(-1, 1, (n, 3))
    col = rng.uniform(0, 1, (n, 3))
    feat = rng.normal(size=(n, c))
    return pos, col, feat, knn(pos, pos, k)


def make_unit(rng, c=8, d=8, **opts):
    store = ParamStore()
    return store, LAFA(store, "u", c, d, rng, LafaOptions(**opts))


def test_self_neighbors_give_zero_differences(rng):
    x = DiffArray(rng.normal(size=(5, 3)))
    nbr = np.repeat(np.arange(5)[:, None], 4, axis=1)
    assert not _relative(x, nbr).data.any()


def test_translation_leaves_position_differences_unchanged(rng):
    pos, _, _, nbr = make_inputs(rng)
    a = _relative(DiffArray(pos), nbr).data
    b = _relative(DiffArray(pos + np.array([5.0, -3.0, 2.0])), nbr).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_encoding_width_and_shape_errors(rng):
    pos, col, feat, nbr = make_inputs(rng)
    _, unit = make_unit(rng)
    out = unit(pos, col, feat, nbr, True)
    assert out.local_encoding.shape == (16, 4, 12)          # three encoders of width 8 // 2
    assert out.weights.shape == (16, 4, 12)
    assert out.features.shape == (16, 8)
    assert out.neighbor_semantic.shape == (16, 4, 12)
    with pytest.raises(DimensionError):
        encode_local_info(pos[:3], col, feat, nbr, unit.encoders, True)


def test_encoding_gradient_wrt_positions(rng):
    pos, col, feat, nbr = make_inputs(rng)
    _, unit = make_unit(rng)
    p = DiffArray(pos, requires_grad=True)
    fn = lambda: reduce(encode_local_info(p, col, feat, nbr, unit.encoders, True), None, "sum")  # noqa: E731
    assert check_gradients(fn, [p]) < 1e-4


def test_adaptive_weight_examples(rng):
    m = DiffArray(np.zeros((3, 3)))
    w = adaptive_weights(DiffArray(rng.normal(size=(4, 5, 3))), m).data
    np.testing.assert_allclose(w, 0.2)
    w1 = adaptive_weights(DiffArray(rng.normal(size=(4, 1, 3))), DiffArray(rng.normal(size=(3, 3)))).data
    np.testing.assert_array_equal(w1, 1.0)
    with pytest.raises(DimensionError):
        adaptive_weights(DiffArray(np.zeros((4, 0, 3))), m)


def test_weight_shift_invariance(rng):
    dl = rng.normal(size=(6, 5, 3))
    mat = rng.normal(size=(3, 3))
    # a per-(point, channel) constant added to S: add c to dl such that c @ M is constant over K
    w = adaptive_weights(DiffArray(dl), DiffArray(mat)).data
    shift = rng.normal(size=(6, 1, 3))
    w2 = adaptive_weights(DiffArray(dl + shift), DiffArray(mat)).data
    np.testing.assert_allclose(w, w2, atol=1e-9)


def test_neighbor_permutation_invariance(rng):
    pos, col, feat, nbr = make_inputs(rng)
    _, unit = make_unit(rng)
    perm = np.random.default_rng(3).permutation(nbr.shape[1])
    a = unit(pos, col, feat, nbr, True).features.data
    b = unit(pos, col, feat, nbr[:, perm], True).features.data
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_global_shift_invariance(rng):
    pos, col, feat, nbr = make_inputs(rng)
    _, unit = make_unit(rng)
    a = unit(pos, col, feat, nbr, True).features.data
    b = unit(pos + 3.0, col + 0.1, feat - 2.0, nbr, True).features.data
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_zero_encoding_gives_identical_rows(rng):
    n = 10
    pos = np.zeros((n, 3))
    col = np.full((n, 3), 0.5)
    feat = np.ones((n, 8))
    nbr = np.repeat(np.arange(n)[:, None], 4, axis=1)
    _, unit = make_unit(rng)
    f = unit(pos, col, feat, nbr, False).features.data
    np.testing.assert_allclose(f, np.tile(f[0], (n, 1)), atol=1e-12)


def test_parameter_gradients_at_spec_size(rng):
    pos, col, feat, nbr = make_inputs(rng, 16, 4, 8)
    store, unit = make_unit(rng)
    probe = DiffArray(rng.uniform(-1, 1, (16, 8)))
    fn = lambda: reduce(multiply(unit(pos, col, feat, nbr, True).features, probe), None, "sum")  # noqa: E731
    params = [p for n, p in store.params.items() if "constraint_proj" not in n]
    assert check_gradients(fn, params) < 1e-4


@pytest.mark.parametrize("opts,width", [
    (dict(encoders=("f",)), 4),
    (dict(encoders=("xyz", "f")), 8),
    (dict(encoders=("xyz", "rgb"), semantic_concat=True), 16),
    (dict(repeat_semantics=True), 12),
    (dict(adaptive=False, pooling="mean"), 12),
    (dict(adaptive=False, pooling="max"), 12),
    (dict(pooling="sum"), 12),
])
def test_ablation_variants_forward(rng, opts, width):
    pos, col, feat, nbr = make_inputs(rng)
    _, unit = make_unit(rng, **opts)
    out = unit(pos, col, feat, nbr, True)
    assert out.local_encoding.shape == (16, 4, width)
    assert out.features.shape == (16, 8)
    assert (out.weights is None) == (not unit.opts.adaptive)


def test_invalid_options():
    with pytest.raises(ValidationError):
        LafaOptions(pooling="median")
    with pytest.raises(ValidationError):
        LafaOptions(pooling="mean")
    with pytest.raises(ValidationError):
        LafaOptions(encoders=())


@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 10000))
def test_weights_are_probability_vectors(k, c, seed):
    r = np.random.default_rng(seed)
    w = adaptive_weights(DiffArray(r.normal(0, 5, (7, k, c))), DiffArray(r.normal(size=(c, c)))).data
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)
