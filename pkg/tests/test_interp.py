import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from knnvc.feature_store import FeatureSequence
from knnvc.interp import SpeakerDistribution, interpolate, renormalize_topm


def _seqs(rng, n, t=8, d=4):
    return [FeatureSequence(rng.standard_normal((t, d)), source_id=f"s{i}") for i in range(n)]


def _dist(weights):
    return SpeakerDistribution.from_weights([f"spk{i}" for i in range(len(weights))], weights)


def test_one_hot_is_exact(rng):
    seqs = _seqs(rng, 4)
    out = interpolate(seqs, SpeakerDistribution.one_hot([f"spk{i}" for i in range(4)], "spk2"))
    assert out.frames.tobytes() == seqs[2].frames.tobytes()


def test_midpoint(rng):
    a, b = _seqs(rng, 2)
    out = interpolate([a, b], _dist([0.5, 0.5]))
    np.testing.assert_allclose(out.frames, (a.frames.astype(float) + b.frames) / 2, rtol=1e-6)


def test_three_way_against_scalar_loop(rng):
    seqs = _seqs(rng, 3)
    w = [0.2, 0.3, 0.5]
    out = interpolate(seqs, _dist(w))
    t, d = seqs[0].frames.shape
    for i in range(t):
        for j in range(d):
            expect = 0.0
            for s, wi in zip(seqs, w):
                expect += wi * float(s.frames[i, j])
            assert abs(float(out.frames[i, j]) - expect) <= 1e-6 * max(1.0, abs(expect))


def test_mapping_input_and_period(rng):
    seqs = [FeatureSequence(rng.standard_normal((3, 2)), 10.0) for _ in range(2)]
    d = _dist([0.25, 0.75])
    out = interpolate({"spk1": seqs[1], "spk0": seqs[0]}, d)
    assert out == interpolate(seqs, d)
    assert out.frame_period_ms == 10.0


def test_errors(rng):
    a, b = _seqs(rng, 2)
    c = FeatureSequence(np.ones((5, 4)))
    with pytest.raises(ValueError, match="shape"):
        interpolate([a, c], _dist([0.5, 0.5]))
    with pytest.raises(ValueError, match="sequences for"):
        interpolate([a], _dist([0.5, 0.5]))
    with pytest.raises(ValueError, match="no converted sequence"):
        interpolate({"spk0": a, "other": b}, _dist([0.5, 0.5]))


def test_distribution_invariants():
    with pytest.raises(ValueError, match="sum"):
        _dist([0.5, 0.4])
    with pytest.raises(ValueError, match="non-negative"):
        _dist([1.5, -0.5])
    with pytest.raises(ValueError, match="unique"):
        SpeakerDistribution((("a", 0.5), ("a", 0.5)))
    assert _dist([0.1, 0.9]).argmax() == "spk1"


def test_topm_example():
    out = renormalize_topm(_dist([0.7, 0.2, 0.1]), 2)
    assert out.speaker_ids == ["spk0", "spk1"]
    np.testing.assert_allclose(out.weights, [0.7 / 0.9, 0.2 / 0.9])
    np.testing.assert_allclose(out.weights, [0.7778, 0.2222], atol=5e-5)


def test_topm_trivial_cases():
    d = _dist([0.2, 0.3, 0.5])
    assert renormalize_topm(d, 3) == d and renormalize_topm(d, 10) == d
    one = SpeakerDistribution.one_hot(["a", "b", "c"], "b")
    assert renormalize_topm(one, 1).as_dict() == {"b": 1.0}
    with pytest.raises(ValueError):
        renormalize_topm(d, 0)


def test_topm_ties_by_id():
    d = SpeakerDistribution((("c", 0.4), ("b", 0.2), ("a", 0.2), ("d", 0.2)))
    assert renormalize_topm(d, 2).speaker_ids == ["c", "a"]


weights = st.lists(st.floats(0, 1), min_size=1, max_size=6).filter(lambda w: sum(w) > 1e-3)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), weights)
def test_convexity(seed, w):
    rng = np.random.default_rng(seed)
    seqs = _seqs(rng, len(w), t=5, d=3)
    w = np.array(w) / sum(w)
    out = interpolate(seqs, _dist(w)).frames
    stack = np.stack([s.frames for s in seqs])
    slack = 1e-6 * (1 + np.abs(stack).max())
    assert (out >= stack.min(axis=0) - slack).all() and (out <= stack.max(axis=0) + slack).all()


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.floats(0, 1))
def test_linearity(seed, n, alpha):
    rng = np.random.default_rng(seed)
    seqs = _seqs(rng, n, t=4, d=3)
    w1, w2 = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
    mixed = interpolate(seqs, _dist(alpha * w1 + (1 - alpha) * w2)).frames
    lin = alpha * interpolate(seqs, _dist(w1)).frames + (1 - alpha) * interpolate(seqs, _dist(w2)).frames
    np.testing.assert_allclose(mixed, lin, atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_pair_permutation_invariance(seed, n):
    rng = np.random.default_rng(seed)
    seqs = _seqs(rng, n, t=4, d=3)
    w = rng.dirichlet(np.ones(n))
    perm = rng.permutation(n)
    ids = [f"spk{i}" for i in range(n)]
    a = interpolate(seqs, SpeakerDistribution.from_weights(ids, w)).frames
    b = interpolate([seqs[i] for i in perm], SpeakerDistribution.from_weights([ids[i] for i in perm], w[perm])).frames
    np.testing.assert_allclose(a, b, atol=1e-6)
