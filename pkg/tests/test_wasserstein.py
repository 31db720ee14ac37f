import itertools

import numpy as np
import pytest

from meanfield_control import (
    ConfigError,
    duplicate_points,
    w2,
    w2_1d,
    w2_assignment,
    w2_with_duplication,
)


def _brute_force_w2(a, b):
    n = a.shape[0]
    best = np.inf
    for perm in itertools.permutations(range(n)):
        cost = np.mean(np.sum((a - b[list(perm)]) ** 2, axis=1))
        best = min(best, cost)
    return float(np.sqrt(best))


def test_identical_clouds_have_zero_distance():
    a = np.random.default_rng(0).normal(size=(20, 3))
    assert w2_assignment(a, a)[0] == 0.0


def test_two_point_example():
    # brute force over both pairings: pairing by rank costs 1, crossing costs 5
    a = np.array([0.0, 2.0])
    b = np.array([1.0, 3.0])
    assert w2_1d(a, b) == pytest.approx(1.0)
    assert _brute_force_w2(a[:, None], b[:, None]) == pytest.approx(1.0)


def test_single_point_distance():
    assert w2_1d(np.array([0.0]), np.array([-3.7])) == pytest.approx(3.7)


def test_assignment_matches_sorting_in_1d():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = rng.normal(size=(40, 1))
        b = rng.normal(size=(40, 1)) + rng.normal()
        assert abs(w2_assignment(a, b)[0] - w2_1d(a, b)) < 1e-12


def test_assignment_matches_brute_force_small():
    rng = np.random.default_rng(2)
    for n in (2, 3, 4, 5, 6):
        a = rng.normal(size=(n, 2))
        b = rng.normal(size=(n, 2))
        dist, coupling = w2_assignment(a, b)
        assert dist == pytest.approx(_brute_force_w2(a, b), abs=1e-12)
        assert coupling.recompute_cost(a, b) == pytest.approx(coupling.cost, abs=1e-15)
        assert sorted(coupling.permutation) == list(range(n))


def test_triangle_inequality():
    rng = np.random.default_rng(3)
    for _ in range(200):
        a, b, c = (rng.normal(size=(8, 2)) for _ in range(3))
        assert w2(a, c) <= w2(a, b) + w2(b, c) + 1e-12


def test_metric_axioms_on_random_clouds():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(15, 2))
    b = rng.normal(size=(15, 2))
    assert w2(a, b) == pytest.approx(w2(b, a), abs=1e-13)
    assert w2(a, b) > 0.0
    assert w2(a, a) == 0.0


def test_translation_invariance():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(25, 3))
    b = rng.normal(size=(25, 3))
    v = rng.normal(size=3)
    assert abs(w2(a + v, b + v) - w2(a, b)) < 1e-12


def test_permutation_invariance_of_inputs():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(30, 2))
    b = rng.normal(size=(30, 2))
    p = rng.permutation(30)
    assert w2(a[p], b) == pytest.approx(w2(a, b), abs=1e-13)
    assert w2(a, b[p]) == pytest.approx(w2(a, b), abs=1e-13)


def test_size_cap_enforced():
    a = np.zeros((10, 2))
    with pytest.raises(ConfigError, match="cap"):
        w2_assignment(a, a, size_cap=5)


def test_size_mismatch_rejected():
    with pytest.raises(ConfigError):
        w2_assignment(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(ConfigError):
        w2_1d(np.zeros(3), np.zeros(4))


def test_duplication_rule():
    a = np.array([[0.0], [1.0]])
    tiled = duplicate_points(a, 6)
    assert tiled.shape == (6, 1)
    assert np.sort(tiled[:, 0]).tolist() == [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
    with pytest.raises(ConfigError, match="multiple"):
        duplicate_points(a, 5)


def test_w2_with_duplication_consistent():
    # duplicating atoms leaves the empirical measure unchanged
    rng = np.random.default_rng(7)
    a = rng.normal(size=(8, 2))
    b = rng.normal(size=(24, 2))
    direct = w2_with_duplication(a, b)
    assert direct == pytest.approx(w2(duplicate_points(a, 24), b), abs=1e-13)
    assert w2_with_duplication(a, a) == 0.0
