import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capcritic import diffcore as dc
from capcritic.errors import ConfigError, ShapeError
from capcritic.fusion import CountSketchPlan, FusionConfig, count_sketch, cbp_pool, fuse, init_fusion


def sketch_oracle(x, plan):
    """Count sketch by explicit loops."""
    out = np.zeros(plan.output_dim)
    for j, v in enumerate(x):
        out[plan.hashes[j]] += plan.signs[j] * v
    return out


def test_plan_values_in_range_and_deterministic():
    p = CountSketchPlan.create(50, 16, seed=9)
    assert p.hashes.min() >= 0 and p.hashes.max() < 16
    assert set(np.unique(p.signs)) <= {-1.0, 1.0}
    q = CountSketchPlan.create(50, 16, seed=9)
    np.testing.assert_array_equal(p.hashes, q.hashes)
    np.testing.assert_array_equal(p.signs, q.signs)


def test_different_seeds_give_different_plans():
    a, b = CountSketchPlan.create(64, 32, 1), CountSketchPlan.create(64, 32, 2)
    assert not (np.array_equal(a.hashes, b.hashes) and np.array_equal(a.signs, b.signs))


def test_count_sketch_matches_loop_and_matrix():
    rng = np.random.default_rng(0)
    plan = CountSketchPlan.create(7, 4, seed=3)
    x = rng.normal(size=(3, 7))
    out = count_sketch(x, plan).data
    for row, got in zip(x, out):
        np.testing.assert_allclose(got, sketch_oracle(row, plan), atol=1e-14)
    np.testing.assert_allclose(out, x @ plan.matrix(), atol=1e-14)


def test_count_sketch_is_linear():
    rng = np.random.default_rng(1)
    plan = CountSketchPlan.create(10, 8, seed=0)
    x, y = rng.normal(size=(2, 10))
    lhs = count_sketch(2 * x - y, plan).data
    np.testing.assert_allclose(lhs, 2 * count_sketch(x, plan).data - count_sketch(y, plan).data, atol=1e-12)


def test_sketch_preserves_squared_norm_in_expectation():
    rng = np.random.default_rng(2)
    x = rng.normal(size=20)
    norms = [np.sum(count_sketch(x, CountSketchPlan.create(20, 64, s)).data ** 2) for s in range(2000)]
    assert np.mean(norms) == pytest.approx(np.sum(x ** 2), rel=0.05)


def outer_sketch_oracle(x, y, px, py, d):
    """Sketch of the flattened outer product with the induced pair hash and sign."""
    out = np.zeros(d)
    for j in range(len(x)):
        for k in range(len(y)):
            out[(px.hashes[j] + py.hashes[k]) % d] += px.signs[j] * py.signs[k] * x[j] * y[k]
    return out


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 5), st.integers(0, 10 ** 6))
def test_convolved_sketches_equal_sketch_of_outer_product(m, n, log_d, seed):
    d = 2 ** log_d
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=m), rng.normal(size=n)
    px, py = CountSketchPlan.create(m, d, seed), CountSketchPlan.create(n, d, seed + 1)
    got = cbp_pool(x[None], y[None], px, py).data[0]
    np.testing.assert_allclose(got, outer_sketch_oracle(x, y, px, py, d), atol=1e-10)


def test_fusion_output_dims():
    rng = np.random.default_rng(0)
    ctx, cand = dc.Tensor(rng.normal(size=(2, 6))), dc.Tensor(rng.normal(size=(2, 4)))
    for strategy, expected in (("concat_linear", 10), ("concat_mlp", 5), ("cbp_linear", 16)):
        cfg = FusionConfig(strategy, mlp_hidden=5, cbp_dim=16)
        params = init_fusion(cfg, 6, 4, seed=1, rng=rng)
        assert fuse(ctx, cand, cfg, params).shape == (2, expected) == (2, cfg.output_dim(6, 4))


def test_concat_linear_is_plain_concatenation():
    a, b = np.ones((1, 2)), np.zeros((1, 3))
    cfg = FusionConfig("concat_linear")
    out = fuse(dc.Tensor(a), dc.Tensor(b), cfg, init_fusion(cfg, 2, 3, 0, np.random.default_rng(0)))
    np.testing.assert_array_equal(out.data, [[1, 1, 0, 0, 0]])


def test_cbp_normalized_rows_have_unit_norm():
    rng = np.random.default_rng(4)
    cfg = FusionConfig("cbp_linear", cbp_dim=32)
    params = init_fusion(cfg, 6, 5, seed=3, rng=rng)
    out = fuse(dc.Tensor(rng.normal(size=(3, 6))), dc.Tensor(rng.normal(size=(3, 5))), cfg, params).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)


def test_cbp_plans_use_independent_seeds():
    cfg = FusionConfig("cbp_linear", cbp_dim=64)
    params = init_fusion(cfg, 40, 40, seed=5, rng=np.random.default_rng(0))
    assert params.context_plan.seed != params.candidate_plan.seed


def test_config_validation():
    with pytest.raises(ConfigError):
        FusionConfig("cbp_linear", cbp_dim=100)
    with pytest.raises(ConfigError):
        FusionConfig("bilinear")
    cfg = FusionConfig("cbp_linear", cbp_dim=8)
    with pytest.raises(ConfigError):
        init_fusion(cfg, 0, 4, 0, np.random.default_rng(0))


def test_fuse_rejects_batch_mismatch():
    cfg = FusionConfig("concat_linear")
    with pytest.raises(ShapeError):
        fuse(dc.Tensor(np.ones((2, 1))), dc.Tensor(np.ones((3, 1))), cfg, init_fusion(cfg, 1, 1, 0, None))
