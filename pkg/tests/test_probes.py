import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from miaudit.attacks import assemble
from miaudit.probes import (OK, OPTIMIZATION_FAILED, THIRD_CLASS_ERROR, DistanceProbeConfig,
                            FeatureCache, ProbeSpec, SevenStats, confidence_features,
                            distance_batch, distance_to_boundary, extract, gradient_norm_features,
                            gradient_norm_matrix, intermediate_features, seven_stats)

from conftest import binary_linear, constant_model, linear_model


def moment_oracle(v):
    """Seven statistics computed with plain Python loops and math.fsum."""
    v = [float(t) for t in v]
    n = len(v)
    mean = math.fsum(v) / n
    m2 = math.fsum((t - mean) ** 2 for t in v) / n
    m3 = math.fsum((t - mean) ** 3 for t in v) / n
    m4 = math.fsum((t - mean) ** 4 for t in v) / n
    skew = 0.0 if m2 == 0 else m3 / m2 ** 1.5
    kurt = 0.0 if m2 == 0 else m4 / m2 ** 2 - 3.0
    return (math.fsum(abs(t) for t in v), math.sqrt(math.fsum(t * t for t in v)),
            min(abs(t) for t in v), max(abs(t) for t in v), mean, skew, kurt)


# -- seven_stats ---------------------------------------------------------------


def test_seven_stats_zero_vector():
    assert seven_stats([0, 0, 0]) == SevenStats(0, 0, 0, 0, 0, 0, 0)


def test_seven_stats_two_point():
    s = seven_stats([1, -1])
    assert (s.l1, s.abs_min, s.l_inf, s.mean, s.skewness, s.kurtosis) == (2, 1, 1, 0, 0, -2)
    assert s.l2 == pytest.approx(math.sqrt(2))


def test_seven_stats_empty():
    with pytest.raises(ValueError):
        seven_stats([])


def test_seven_stats_matches_moment_oracle(rng):
    for dist in (rng.normal(size=1000), rng.exponential(size=1000), rng.standard_t(3, size=1000)):
        np.testing.assert_allclose(seven_stats(dist).as_array(), moment_oracle(dist), rtol=1e-9, atol=0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e3, 1e3)),
       st.floats(-50, 50).filter(lambda c: abs(c) > 1e-3))
def test_seven_stats_scale_law(v, c):
    a, b = seven_stats(v), seven_stats(c * v)
    for name in ("l1", "l2", "abs_min", "l_inf"):
        assert getattr(b, name) == pytest.approx(abs(c) * getattr(a, name), rel=1e-9, abs=1e-9)
    assert b.mean == pytest.approx(c * a.mean, rel=1e-9, abs=1e-9)
    if np.ptp(v) > 1e-6 * max(1.0, np.abs(v).max()):
        assert b.skewness == pytest.approx(np.sign(c) * a.skewness, rel=1e-6, abs=1e-6)
        assert b.kurtosis == pytest.approx(a.kurtosis, rel=1e-6, abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e3, 1e3)))
def test_seven_stats_invariants(v):
    s = seven_stats(v)
    assert s.abs_min <= s.l_inf
    assert s.l2 <= s.l1 * (1 + 1e-12)
    assert np.all(np.isfinite(s.as_array()))


# -- confidence / intermediate -------------------------------------------------


def test_confidence_uniform_model():
    model = linear_model(np.zeros((5, 3)), np.zeros(5))
    np.testing.assert_allclose(confidence_features(model, np.ones(3) * 0.3), np.full(5, 0.2))


def test_confidence_sums_to_one(rng):
    model = linear_model(rng.normal(size=(4, 6)), rng.normal(size=4))
    conf = confidence_features(model, rng.random((30, 6)))
    np.testing.assert_allclose(conf.sum(axis=1), 1, atol=1e-5)


def test_confidence_saturates_on_overfit_members(overfit_blobs):
    model, members, _ = overfit_blobs
    conf = confidence_features(model, members.inputs)
    correct = conf.argmax(axis=1) == members.labels
    assert np.mean(conf[correct].max(axis=1) >= 0.9) >= 0.8


def test_intermediate_linear_logits(rng):
    # Target weights are stored in float32.
    w = rng.normal(size=(3, 4)).astype(np.float32).astype(np.float64)
    b = rng.normal(size=3).astype(np.float32).astype(np.float64)
    model = linear_model(w, b)
    x = rng.random(4)
    np.testing.assert_allclose(intermediate_features(model, x, -1), w @ x + b, atol=1e-12)
    np.testing.assert_allclose(intermediate_features(model, x, -2), x)


def test_intermediate_stable_and_nonnegative(overfit_blobs):
    model, members, _ = overfit_blobs
    x = members.inputs[:100]
    a = intermediate_features(model, x, -2)
    assert a.tobytes() == intermediate_features(model, x, -2).tobytes()
    assert np.all(a >= 0) and np.all(intermediate_features(model, x, -3) >= 0)
    with pytest.raises(ValueError):
        intermediate_features(model, x, -5)


# -- gradient norms ------------------------------------------------------------


def test_gradient_norms_vanish_at_zero_loss():
    w = np.zeros((3, 2))
    model = linear_model(w, [0.0, 1e4, 0.0])
    s = gradient_norm_features(model, np.array([0.2, 0.7]), 1, "params")
    assert s == SevenStats(0, 0, 0, 0, 0, 0, 0)
    assert gradient_norm_features(model, np.array([0.2, 0.7]), 1, "input") == SevenStats(0, 0, 0, 0, 0, 0, 0)


def test_gradient_norms_closed_form_linear(rng):
    w = rng.normal(size=(4, 6)).astype(np.float32).astype(np.float64)
    b = rng.normal(size=4).astype(np.float32).astype(np.float64)
    model = linear_model(w, b)
    x, y = rng.random(6), 3
    z = w @ x + b
    p = np.exp(z - z.max())
    p /= p.sum()
    delta = p - np.eye(4)[y]
    for wrt, grad in (("params", np.concatenate([np.outer(delta, x).ravel(), delta])),
                      ("input", w.T @ delta)):
        got = gradient_norm_features(model, x, y, wrt).as_array()
        np.testing.assert_allclose(got, moment_oracle(grad), rtol=1e-6, atol=1e-12)


def test_param_gradient_smaller_for_members(overfit_blobs):
    model, members, nonmembers = overfit_blobs
    gm = gradient_norm_matrix(model, members.inputs, members.labels, "params")[:, 1]
    gn = gradient_norm_matrix(model, nonmembers.inputs, nonmembers.labels, "params")[:, 1]
    assert gm.mean() < gn.mean()


# -- distance to boundary ------------------------------------------------------


def test_distance_linear_closed_form(rng):
    d = 20
    w = rng.normal(size=d)
    b = -0.5 * w.sum()
    model = binary_linear(w, b)
    x = rng.uniform(0.2, 0.8, size=(30, d))
    y = model.predict(x)
    cfg = DistanceProbeConfig()
    truth = np.abs(x @ w + b) / np.linalg.norm(w)
    for res, t in zip(distance_batch(model, x, y, cfg), truth):
        assert res.status == OK
        assert abs(res.distance - t) <= max(2 * cfg.step_size, 0.01 * t)
        assert 0 <= res.distance <= cfg.max_steps * cfg.step_size + cfg.step_size


def test_distance_single_matches_batch(rng):
    w = rng.normal(size=5)
    model = binary_linear(w, 0.1)
    x = rng.random((4, 5))
    y = model.predict(x)
    batch = distance_batch(model, x, y)
    for i in range(4):
        assert distance_to_boundary(model, x[i], y[i]) == batch[i]


def test_distance_immediate_flip_bounded_by_step():
    w = np.array([1.0, 0.0])
    model = binary_linear(w, -0.5)
    eps = 1e-3
    res = distance_to_boundary(model, np.array([0.5 - eps / 4, 0.3]), 0, DistanceProbeConfig(step_size=eps))
    assert res.status == OK and res.steps_used == 1 and res.distance <= eps


def test_distance_constant_model_fails():
    res = distance_to_boundary(constant_model([0.0, 1.0, 0.0]), np.full(4, 0.5), 1)
    assert res.status == OPTIMIZATION_FAILED and res.distance is None
    assert "zero input gradient" in res.message


def test_distance_no_flip_within_budget():
    model = binary_linear(np.array([1.0, 0.0]), -0.5)
    res = distance_to_boundary(model, np.array([0.9, 0.5]), 1, DistanceProbeConfig(max_steps=5, step_size=0.01))
    assert res.status == OPTIMIZATION_FAILED and res.steps_used == 6


def test_distance_third_class_error():
    # Walking from class 0 along +x1 crosses a thin class-2 wedge before class 1;
    # one big step jumps over it, so the first bisection midpoint lands in class 2.
    w = np.array([[0.0, 0.0], [4.0, 0.0], [3.0, 0.0]])
    b = np.array([0.0, -2.0, -1.45])
    model = linear_model(w, b)
    res = distance_to_boundary(model, np.array([0.0, 0.0]), 0,
                               DistanceProbeConfig(max_steps=3, step_size=1.0))
    assert res.status == THIRD_CLASS_ERROR


def test_distance_config_validation():
    with pytest.raises(ValueError):
        DistanceProbeConfig(max_steps=0)
    with pytest.raises(ValueError):
        DistanceProbeConfig(confidence_threshold=1.0)
    with pytest.raises(ValueError):
        DistanceProbeConfig(step_size=0)


# -- extraction and cache ------------------------------------------------------


@pytest.mark.parametrize("kind,width", [("confidence", 3), ("grad_w", 7), ("grad_x", 7),
                                        ("intermediate", 64), ("distance", 1)])
def test_extract_columns(overfit_blobs, kind, width):
    model, members, _ = overfit_blobs
    probe = ProbeSpec(kind, layers_back=-2)
    feats, cols, status = extract(model, members.inputs[:10], members.labels[:10], probe)
    assert feats.shape == (10, width) and len(cols) == width and len(status) == 10


def test_feature_cache_reuses_identical_matrices(overfit_blobs, tmp_path):
    model, members, nonmembers = overfit_blobs
    cache = FeatureCache(tmp_path)
    probe = ProbeSpec("grad_x")
    a, _ = assemble(model, members, nonmembers, probe, cache, "abc")
    assert len(list(tmp_path.glob("*.npz"))) == 2
    b, _ = assemble(model, members, nonmembers, probe, cache, "abc")
    assert a.features.tobytes() == b.features.tobytes()
    assert ProbeSpec("distance").config_hash() != ProbeSpec(
        "distance", distance=DistanceProbeConfig(step_size=0.02)).config_hash()
