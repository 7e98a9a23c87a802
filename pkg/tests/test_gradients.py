import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_params
from pigment.encoder import HEADS, EncoderCache, EncoderConfig, backbone_forward, heads_forward, init_encoder
from pigment.errors import EvaluationError, InternalConsistencyError, InvalidParameterError
from pigment.gradients import (
    Probe,
    backward_encoder,
    backward_pipeline,
    expansion_norm_backward,
    finite_difference_check,
    format_gradcheck,
    gradcheck_model,
    linear_backward,
    relative_error,
)
from pigment.pipeline import BlendParams, PigmentModelParams, forward_batch, normalize_expansion_weights


def run_forward(params, colors, mode="eval"):
    return forward_batch(colors[None], params.expansion_raw[None], params.offsets[None],
                         params.reconstruction[None], params.blend, mode)


def test_zero_upstream_gives_zero_pipeline_grads(rng):
    params = random_params(rng)
    out, cache = run_forward(params, rng.uniform(0, 1, (20, 3)), "train")
    d_raw, d_off, d_U, d_blend, d_col = backward_pipeline(np.zeros_like(out), cache, params)
    for g in [d_raw, d_off, d_U, d_col, *d_blend.values()]:
        assert not np.any(g)


def test_single_pixel_dU_is_outer_product(rng):
    raw = np.log(np.array([[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]]) * 10)
    params = PigmentModelParams(raw, rng.uniform(-0.05, 0.05, (3, 5)), rng.normal(size=(3, 3)))
    c = rng.uniform(0.1, 0.9, (1, 3))
    up = rng.normal(size=(1, 1, 3))
    out, cache = run_forward(params, c)
    _, _, d_U, _, _ = backward_pipeline(up, cache, params)
    np.testing.assert_allclose(d_U[0], np.outer(up[0, 0], cache.blended[0, 0]), atol=1e-14)

    def f(vec):
        U = vec.reshape(1, 3, 3)
        o, _ = forward_batch(c[None], raw[None], params.offsets[None], U, params.blend, "eval")
        return float(np.sum(o * up))
    rep = finite_difference_check(f, params.reconstruction.ravel(), d_U.ravel())
    assert rep.max_rel_err < 1e-7 and rep.skipped == 0


def test_midpoint_splits_offset_gradient_equally():
    # p exactly at the middle of segment 1 of an L=3 table
    raw = np.zeros((3, 1))
    params = PigmentModelParams(raw, np.zeros((1, 3)), np.ones((3, 1)))
    _, cache = run_forward(params, np.full((1, 3), 0.25))
    assert cache.alpha[0, 0, 0] == 0.5
    _, d_off, _, _, _ = backward_pipeline(np.ones((1, 1, 3)), cache, params)
    assert d_off[0, 0, 0] == d_off[0, 0, 1] == 1.5
    assert d_off[0, 0, 2] == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_offset_contributions_sum_to_reprojected_gradient(seed):
    r = np.random.default_rng(seed)
    params = random_params(r, n=5, l=7, blend=False)
    out, cache = run_forward(params, r.uniform(0, 1, (1, 3)))
    up = r.normal(size=out.shape)
    _, d_off, _, _, _ = backward_pipeline(up, cache, params)
    d_pbar = up[0] @ params.reconstruction      # blend bypassed
    np.testing.assert_allclose(d_off[0].sum(axis=1), d_pbar[0], atol=1e-12)


def test_pigment_gradient_is_segment_slope(rng):
    n, l = 3, 6
    raw = rng.normal(size=(3, n))
    params = PigmentModelParams(raw, rng.normal(0, 0.1, (n, l)), np.eye(3))
    c = rng.uniform(0.1, 0.9, (1, 3))
    out, cache = run_forward(params, c)
    up = rng.normal(size=out.shape)
    _, _, _, _, d_col = backward_pipeline(up, cache, params)
    what = normalize_expansion_weights(raw)
    d_p = np.linalg.solve(what, d_col[0, 0])        # d_col = what @ d_p
    ybar = params.table.ordinates
    seg = cache.segment[0, 0]
    slope = (ybar[np.arange(n), seg + 1] - ybar[np.arange(n), seg]) * (l - 1)
    np.testing.assert_allclose(d_p, slope * up[0, 0], rtol=1e-10)


@given(st.floats(-5, 5), st.integers(0, 2 ** 32 - 1))
def test_normalization_jacobian_kills_ones_direction_at_symmetric_point(t, seed):
    raw = np.full((3, 1), t)
    what = normalize_expansion_weights(raw)
    d = np.random.default_rng(seed).normal(size=(3, 1))
    g = expansion_norm_backward(raw, what, d)
    # <J^T d, 1> = <d, J 1> and J 1 = 0 at [t, t, t]
    assert abs(g.sum()) < 1e-12


def test_normalization_backward_matches_fd(rng):
    raw = rng.normal(size=(3, 4))
    up = rng.normal(size=(3, 4))
    g = expansion_norm_backward(raw, normalize_expansion_weights(raw), up)

    def f(vec):
        return float(np.sum(normalize_expansion_weights(vec.reshape(3, 4)) * up))
    assert finite_difference_check(f, raw.ravel(), g.ravel()).max_rel_err < 1e-8


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_pipeline_backward_matches_fd(rng, mode):
    params = random_params(rng, n=6, l=5, offset_scale=0.1)
    colors = rng.uniform(0, 1, (12, 3))
    up = rng.normal(size=(1, 12, 3))
    blend_state = params.blend.copy()

    def loss(p, col):
        p.blend.bn_running_mean[...] = blend_state.bn_running_mean
        p.blend.bn_running_var[...] = blend_state.bn_running_var
        out, cache = forward_batch(col[None], p.expansion_raw[None], p.offsets[None],
                                   p.reconstruction[None], p.blend, mode)
        pattern = np.packbits(cache.blend["pre_relu"] > 0).tobytes()
        return Probe(float(np.sum(out * up)), cache.pigments, np.linspace(0, 1, 5)[1:-1], pattern)

    _, cache = forward_batch(colors[None], params.expansion_raw[None], params.offsets[None],
                             params.reconstruction[None], params.blend, mode)
    params.blend.bn_running_mean[...] = blend_state.bn_running_mean
    params.blend.bn_running_var[...] = blend_state.bn_running_var
    d_raw, d_off, d_U, d_blend, d_col = backward_pipeline(up, cache, params)
    targets = {"expansion_raw": d_raw[0], "offsets": d_off[0], "reconstruction": d_U[0]}
    for name, g in targets.items():
        arr = getattr(params, name)

        def f(vec, arr=arr):
            saved = arr.copy()
            arr[...] = vec.reshape(arr.shape)
            try:
                return loss(params, colors)
            finally:
                arr[...] = saved
        rep = finite_difference_check(f, arr.ravel(), g.ravel())
        assert rep.max_rel_err < 1e-6, name
    for name in BlendParams.TRAINABLE:
        arr = getattr(params.blend, name)

        def f(vec, arr=arr):
            saved = arr.copy()
            arr[...] = vec.reshape(arr.shape)
            try:
                return loss(params, colors)
            finally:
                arr[...] = saved
        rep = finite_difference_check(f, arr.ravel(), d_blend[name].ravel())
        assert rep.max_rel_err < 1e-4, name
    if mode == "train":
        # batch normalization removes any constant shift before it
        assert np.abs(d_blend["conv1_bias"]).max() < 1e-12
    rep = finite_difference_check(lambda v: loss(params, v.reshape(12, 3)), colors.ravel(),
                                  d_col[0].ravel())
    assert rep.max_rel_err < 1e-5


def test_mismatched_cache_rejected(rng):
    params = random_params(rng)
    out, cache = run_forward(params, rng.uniform(0, 1, (10, 3)), "train")
    with pytest.raises(InternalConsistencyError):
        backward_pipeline(np.zeros((1, 9, 3)), cache, params)
    other = random_params(rng, n=5)
    with pytest.raises(InternalConsistencyError):
        backward_pipeline(np.zeros_like(out), cache, other)


# ------------------------------------------------------------------ encoder

def test_linear_backward_is_outer_product(rng):
    x = rng.normal(size=(1, 4))
    w = rng.normal(size=(3, 4))
    up = rng.normal(size=(1, 3))
    dw, db, dx = linear_backward(up, x, w)
    np.testing.assert_allclose(dw, np.outer(up[0], x[0]))
    np.testing.assert_allclose(db, up[0])
    np.testing.assert_allclose(dx, up @ w)


def _encoder_setup(seed=0, side=16):
    cfg = EncoderConfig.tiny()
    w = init_encoder(cfg, seed, np.float64)
    r = np.random.default_rng(seed)
    for name in w.trainable_names():
        if name.endswith("bias") and not name.startswith("blend"):
            w.tensors[name][...] = r.normal(0, 0.05, w.tensors[name].shape)
    w.tensors["head.offsets.fc2.weight"][...] = r.normal(0, 0.05, w.tensors["head.offsets.fc2.weight"].shape)
    img = r.uniform(0, 1, (1, side, side, 3))
    up = {h: r.normal(size=(1,) + cfg.head_shapes()[h]) for h in HEADS}
    return cfg, w, img, up


def test_zero_upstream_gives_zero_encoder_grads():
    cfg, w, img, up = _encoder_setup()
    cache = EncoderCache()
    heads_forward(backbone_forward(img, w, cache), w, cache)
    g = backward_encoder({h: np.zeros_like(v) for h, v in up.items()}, cache, w)
    assert g.max_abs() == 0 and g.all_finite()
    assert set(g) == {n for n in w.trainable_names() if not n.startswith("blend")}


def test_encoder_backward_matches_fd_on_16px_input():
    cfg, w, img, up = _encoder_setup()
    cache = EncoderCache()
    heads_forward(backbone_forward(img, w, cache), w, cache)
    grads = backward_encoder(up, cache, w)
    sampler = np.random.default_rng(5)

    def value():
        c = EncoderCache()
        out = heads_forward(backbone_forward(img, w, c), w, c)
        masks = [z > 0 for z in c.pre] + [c.head_pre[h] > 0 for h in HEADS]
        pattern = b"".join(np.packbits(m).tobytes() for m in masks)
        return Probe(float(sum(np.sum(out[h] * up[h]) for h in HEADS)), pattern=pattern)

    worst = 0.0
    for name, g in grads.items():
        arr = w.tensors[name]
        base = arr.copy()

        def f(vec, arr=arr):
            arr[...] = vec.reshape(arr.shape)
            return value()
        idx = None if arr.size <= 24 else sampler.choice(arr.size, 24, replace=False)
        try:
            rep = finite_difference_check(f, base.ravel(), g.ravel(), indices=idx)
        finally:
            arr[...] = base
        worst = max(worst, rep.max_rel_err)
    assert worst < 1e-4


def test_encoder_backward_rejects_incomplete_upstream():
    cfg, w, img, up = _encoder_setup()
    cache = EncoderCache()
    heads_forward(backbone_forward(img, w, cache), w, cache)
    with pytest.raises(InternalConsistencyError):
        backward_encoder({"expansion": up["expansion"]}, cache, w)
    with pytest.raises(InternalConsistencyError):
        backward_encoder(up, EncoderCache(), w)


# ------------------------------------------------------- finite differences

@given(st.integers(1, 16), st.integers(0, 2 ** 32 - 1))
def test_fd_quadratic_exact(n, seed):
    r = np.random.default_rng(seed)
    # moderate magnitudes keep cancellation in f(+h) - f(-h) below the bound
    theta = r.uniform(0.5, 2.0, n) * r.choice([-1, 1], n)
    rep = finite_difference_check(lambda v: 0.5 * float(v @ v), theta, theta)
    assert rep.max_rel_err < 1e-9 and rep.checked == n


def test_fd_flags_corrupted_entry(rng):
    theta = rng.normal(size=20)
    bad = theta.copy()
    bad[7] *= 2
    rep = finite_difference_check(lambda v: 0.5 * float(v @ v), theta, bad)
    assert rep.argmax == 7 and rep.max_rel_err > 0.4


def test_fd_rejects_non_finite_and_bad_step():
    with pytest.raises(EvaluationError):
        finite_difference_check(lambda v: float("nan"), np.zeros(2), np.zeros(2))
    with pytest.raises(InvalidParameterError):
        finite_difference_check(lambda v: 0.0, np.zeros(2), np.zeros(2), step=0)


def test_fd_skips_knot_crossings():
    knots = np.array([0.5])

    def f(v):
        p = np.clip(v, 0, 1)
        return Probe(float(np.sum(np.abs(p - 0.5))), pigments=p, knots=knots)
    theta = np.array([0.5 + 1e-6, 0.2])
    rep = finite_difference_check(f, theta, np.array([1.0, -1.0]), step=1e-5)
    assert rep.skipped == 1 and rep.checked == 1 and rep.max_rel_err < 1e-9


def test_relative_error_floor():
    assert relative_error(0.0, 1e-9) == pytest.approx(1e-3)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


def test_gradcheck_tiny_model():
    rows = gradcheck_model(EncoderConfig.tiny(), samples_per_tensor=8)
    assert {r.name for r in rows} == set(init_encoder(EncoderConfig.tiny()).trainable_names())
    assert max(r.max_rel_err for r in rows) < 1e-4
    table = format_gradcheck(rows)
    assert table.splitlines()[-1].startswith("overall")
