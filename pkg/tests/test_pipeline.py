import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import dense_oracle, identity_params, random_params
from pigment.errors import (
    ConfigurationError,
    DegenerateBatchError,
    DomainError,
    InvalidInputError,
    InvalidParameterError,
)
from pigment.pipeline import (
    BlendParams,
    PigmentModelParams,
    apply_pipeline_image,
    blend_pigments,
    build_reprojection_table,
    expand_pigments,
    normalize_expansion_weights,
    reconstruct_color,
    reproject,
    reproject_pigment,
)

finite = st.floats(-30, 30, allow_nan=False)


# ---------------------------------------------------------------- expansion

def test_normalize_zero_column_is_uniform():
    out = normalize_expansion_weights(np.zeros((3, 4)))
    np.testing.assert_allclose(out, 1 / 3, rtol=0, atol=1e-15)


@given(st.floats(-50, 50))
def test_normalize_constant_column_is_uniform(t):
    out = normalize_expansion_weights(np.full((3, 1), t))
    np.testing.assert_allclose(out[:, 0], 1 / 3, atol=1e-12)


def test_normalize_matches_independent_sigmoid():
    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))
    col = [1.0, 0.0, -1.0]
    s = [sig(v) for v in col]
    want = [v / sum(s) for v in s]
    got = normalize_expansion_weights(np.array(col)[:, None])[:, 0]
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)


@given(arrays(np.float64, (3, 5), elements=finite))
def test_normalized_columns_are_convex(raw):
    out = normalize_expansion_weights(raw)
    assert np.all(out > 0) and np.all(out < 1)
    np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-9)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_normalize_rejects_non_finite(bad):
    raw = np.zeros((3, 2))
    raw[1, 1] = bad
    with pytest.raises(InvalidParameterError):
        normalize_expansion_weights(raw)


def test_expand_white_and_black(rng):
    what = normalize_expansion_weights(rng.normal(size=(3, 7)))
    np.testing.assert_allclose(expand_pigments(what, np.ones(3)), 1.0, atol=1e-15)
    assert np.all(expand_pigments(what, np.zeros(3)) == 0)


def test_expand_hand_computed_column():
    what = np.array([[0.5], [0.25], [0.25]])
    assert expand_pigments(what, np.array([0.8, 0.4, 0.0]))[0] == pytest.approx(0.5, abs=1e-15)


def test_expand_dimension_mismatch():
    with pytest.raises(InvalidParameterError):
        expand_pigments(np.full((4, 2), 0.25), np.zeros(3))
    with pytest.raises(InvalidParameterError):
        expand_pigments(np.full((3, 2), 1 / 3), np.zeros(4))


@given(arrays(np.float64, (3, 6), elements=finite),
       arrays(np.float64, (10, 3), elements=st.floats(0, 1)))
def test_expansion_output_in_unit_interval(raw, colors):
    p = expand_pigments(normalize_expansion_weights(raw), colors)
    assert p.min() >= -1e-12 and p.max() <= 1 + 1e-12


# ------------------------------------------------------------- reprojection

def test_table_zero_offsets_is_identity_line():
    t = build_reprojection_table(np.zeros((2, 5)))
    np.testing.assert_array_equal(t.ordinates, [[0, 0.25, 0.5, 0.75, 1]] * 2)


def test_table_examples():
    t = build_reprojection_table([[0.1, 0.1]])
    np.testing.assert_allclose(t.knots, [0, 1])
    np.testing.assert_allclose(t.ordinates, [[0.1, 1.1]])
    t = build_reprojection_table([[0.0, 0.2, 0.0]])
    np.testing.assert_allclose(t.ordinates, [[0, 0.7, 1]], atol=1e-15)


def test_table_needs_two_points():
    with pytest.raises(ConfigurationError):
        build_reprojection_table(np.zeros((3, 1)))


@given(st.floats(0, 1), st.integers(2, 40))
def test_reproject_identity_table(p, l):
    t = build_reprojection_table(np.zeros((1, l)))
    assert reproject_pigment(p, t, 0) == pytest.approx(p, abs=4 * np.finfo(float).eps)


def test_reproject_examples():
    assert reproject_pigment(0.5, build_reprojection_table([[0.1, 0.1]]), 0) == pytest.approx(0.6)
    assert reproject_pigment(0.25, build_reprojection_table([[0, 0.2, 0]]), 0) == pytest.approx(0.35)


def test_reproject_right_end_maps_to_last_ordinate(rng):
    t = build_reprojection_table(rng.normal(0, 0.1, (3, 7)))
    for n in range(3):
        assert reproject_pigment(1.0, t, n) == t.ordinates[n, -1]
    _, idx, alpha = reproject(np.ones((1, 3)), t.ordinates)
    assert np.all(idx == 5) and np.all(alpha == 0)


@given(st.integers(2, 33), st.integers(0, 2 ** 32 - 1))
def test_reproject_exact_at_knots(l, seed):
    r = np.random.default_rng(seed)
    t = build_reprojection_table(r.normal(0, 0.2, (1, l)))
    for k, x in enumerate(t.knots):
        assert reproject_pigment(float(x), t, 0) == t.ordinates[0, k]


@pytest.mark.parametrize("l", [5, 9, 17, 33])
def test_reproject_matches_dense_oracle(l):
    r = np.random.default_rng(l)
    offs = r.normal(0, 0.2, (1, l))
    p = r.uniform(0, 1, 10_000)
    got, _, _ = reproject(p[:, None], build_reprojection_table(offs).ordinates)
    want = dense_oracle(p, build_reprojection_table(offs).ordinates[0])
    assert np.max(np.abs(got[:, 0] - want)) < 1e-6


def test_reproject_domain_errors():
    t = build_reprojection_table(np.zeros((1, 4)))
    for bad in (-1e-6, 1.0 + 1e-6, 2.0):
        with pytest.raises(DomainError):
            reproject_pigment(bad, t, 0)
    assert reproject_pigment(1.0 + 1e-12, t, 0) == 1.0
    assert reproject_pigment(-1e-12, t, 0) == 0.0


# ----------------------------------------------------------------- blending

def test_blend_bypass_returns_input(rng):
    pbar = rng.normal(size=(5, 4))
    b = BlendParams.identity(4, bypass=True)
    for mode in ("train", "eval"):
        assert blend_pigments(pbar, b, mode) is pbar


def test_blend_identity_on_nonnegative_input(rng):
    pbar = rng.uniform(0, 2, (6, 4))
    out = blend_pigments(pbar, BlendParams.identity(4), "eval")
    # eval-mode normalization divides by sqrt(1 + eps)
    np.testing.assert_allclose(out, pbar, rtol=1e-5)


def test_blend_gamma_scales():
    b = BlendParams.identity(3)
    b.bn_gamma[:] = 2.0
    out = blend_pigments(np.full((1, 3), 0.5), b, "eval")
    np.testing.assert_allclose(out, 1.0, rtol=1e-5)


def test_blend_train_single_pixel_rejected():
    with pytest.raises(DegenerateBatchError):
        blend_pigments(np.zeros((1, 3)), BlendParams.identity(3), "train")


def test_blend_train_updates_running_stats(rng):
    b = BlendParams.identity(3)
    pbar = rng.normal(0.3, 0.2, (50, 3))
    blend_pigments(pbar, b, "train")
    np.testing.assert_allclose(b.bn_running_mean, 0.1 * pbar.mean(axis=0))
    np.testing.assert_allclose(b.bn_running_var, 0.9 + 0.1 * pbar.var(axis=0, ddof=1))


def test_blend_train_uses_batch_statistics(rng):
    b = BlendParams.identity(3)
    pbar = rng.normal(5.0, 3.0, (200, 3))
    out = blend_pigments(pbar, b, "train")
    z = (pbar - pbar.mean(0)) / np.sqrt(pbar.var(0) + 1e-5)
    np.testing.assert_allclose(out, np.maximum(z, 0), atol=1e-12)


def test_blend_wrong_size_and_mode():
    with pytest.raises(InvalidParameterError):
        blend_pigments(np.zeros((2, 4)), BlendParams.identity(3))
    with pytest.raises(ConfigurationError):
        blend_pigments(np.zeros((2, 3)), BlendParams.identity(3), "test")


# ----------------------------------------------------------- reconstruction

def test_reconstruct_zero_and_identity():
    np.testing.assert_array_equal(reconstruct_color(np.ones((3, 5)), np.zeros(5)), 0)
    np.testing.assert_allclose(reconstruct_color(np.eye(3), np.array([0.2, 0.4, 0.6])),
                               [0.2, 0.4, 0.6])


def test_reconstruct_pinv_roundtrip(rng):
    params = identity_params(rng, n=10)
    c = rng.uniform(0, 1, (100, 3))
    p = expand_pigments(params.expansion, c)
    np.testing.assert_allclose(reconstruct_color(params.reconstruction, p), c, atol=1e-6)


def test_reconstruct_is_unclamped():
    out = reconstruct_color(np.full((3, 2), 2.0), np.array([1.0, 1.0]))
    np.testing.assert_array_equal(out, 4.0)


def test_reconstruct_dimension_mismatch():
    with pytest.raises(InvalidParameterError):
        reconstruct_color(np.ones((3, 4)), np.ones(5))


# ------------------------------------------------------------- full image

@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-5), (np.float32, 1e-3)])
def test_identity_configuration_roundtrip(rng, dtype, tol):
    img = rng.uniform(0, 1, (23, 17, 3))
    out = apply_pipeline_image(img, identity_params(rng, n=12, l=9), dtype=dtype)
    assert np.max(np.abs(out - img)) < tol


def test_single_pixel_matches_stage_functions(rng):
    params = random_params(rng)
    c = rng.uniform(0, 1, 3)
    p = expand_pigments(params.expansion, c)
    pbar = np.array([reproject_pigment(v, params.table, n) for n, v in enumerate(p)])
    phat = blend_pigments(pbar[None], params.blend, "eval")[0]
    want = np.clip(reconstruct_color(params.reconstruction, phat), 0, 1)
    got = apply_pipeline_image(c.reshape(1, 1, 3), params, dtype=np.float64)
    np.testing.assert_allclose(got.ravel(), want, atol=1e-12)


def test_pixel_permutation_commutes(rng):
    params = random_params(rng).astype(np.float32)
    img = rng.uniform(0, 1, (9, 11, 3)).astype(np.float32)
    perm = rng.permutation(99)
    out = apply_pipeline_image(img, params).reshape(-1, 3)
    out_perm = apply_pipeline_image(img.reshape(-1, 3)[perm].reshape(9, 11, 3), params)
    np.testing.assert_array_equal(out_perm.reshape(-1, 3), out[perm])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_pigment_permutation_bit_identical(seed):
    r = np.random.default_rng(seed)
    params = random_params(r, n=9, l=5, offset_scale=0.2).astype(np.float32)
    img = r.uniform(0, 1, (6, 7, 3)).astype(np.float32)
    perm = r.permutation(9)
    a = apply_pipeline_image(img, params, threads=1)
    b = apply_pipeline_image(img, params.permuted(perm), threads=1)
    np.testing.assert_array_equal(a, b)


def test_output_independent_of_thread_count(rng):
    params = random_params(rng).astype(np.float32)
    img = rng.uniform(0, 1, (31, 29, 3)).astype(np.float32)
    ref = apply_pipeline_image(img, params, threads=1)
    for t in (2, 3, 8):
        np.testing.assert_array_equal(apply_pipeline_image(img, params, threads=t), ref)


def test_output_clamped(rng):
    params = random_params(rng)
    params.reconstruction[...] = 5.0
    out = apply_pipeline_image(rng.uniform(0, 1, (4, 4, 3)), params)
    assert out.min() >= 0 and out.max() <= 1


def test_kernel_matches_batched_reference(rng):
    params = random_params(rng, n=10, l=7, offset_scale=0.3)
    img = rng.uniform(0, 1, (12, 13, 3))
    got = apply_pipeline_image(img, params, dtype=np.float64)
    p = expand_pigments(params.expansion, img.reshape(-1, 3))
    pbar, _, _ = reproject(p, params.table.ordinates)
    want = reconstruct_color(params.reconstruction, blend_pigments(pbar, params.blend, "eval"))
    np.testing.assert_allclose(got.reshape(-1, 3), np.clip(want, 0, 1), atol=1e-12)


def test_train_mode_image_uses_batch_stats(rng):
    params = random_params(rng)
    img = rng.uniform(0, 1, (5, 5, 3))
    before = params.blend.bn_running_mean.copy()
    apply_pipeline_image(img, params, mode="train", dtype=np.float64)
    assert not np.array_equal(before, params.blend.bn_running_mean)


@pytest.mark.parametrize("img", [np.zeros((0, 3, 3)), np.zeros((3, 3)), np.full((2, 2, 3), 1.5),
                                 np.full((2, 2, 3), np.nan)])
def test_invalid_images_rejected(rng, img):
    with pytest.raises(InvalidInputError):
        apply_pipeline_image(img, random_params(rng))


def test_inconsistent_params_rejected(rng):
    p = random_params(rng)
    bad = PigmentModelParams(p.expansion_raw, p.offsets[:-1], p.reconstruction, p.blend)
    with pytest.raises(InvalidParameterError):
        apply_pipeline_image(np.zeros((2, 2, 3)), bad)
    p.blend.bn_running_var[0] = 0.0
    with pytest.raises(InvalidParameterError):
        apply_pipeline_image(np.zeros((2, 2, 3)), p)
