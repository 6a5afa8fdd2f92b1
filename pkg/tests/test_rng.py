from __future__ import annotations

import math

import numpy as np
import pytest

from selora.rng import SeededRng, kaiming_bound, kaiming_uniform


class TestSeededRng:
    def test_same_seed_same_stream(self):
        assert np.array_equal(SeededRng(3).normal((4, 4)), SeededRng(3).normal((4, 4)))

    def test_different_seeds_differ(self):
        assert not np.array_equal(SeededRng(3).normal((4, 4)), SeededRng(4).normal((4, 4)))

    def test_children_are_independent_of_parent_consumption(self):
        a = SeededRng(5)
        a.normal((100, 1))
        assert np.array_equal(a.child("x").normal((3, 3)), SeededRng(5).child("x").normal((3, 3)))

    def test_children_with_different_names_differ(self):
        r = SeededRng(5)
        assert not np.array_equal(r.child("x").normal((3, 3)), r.child("y").normal((3, 3)))

    def test_choice_without_replacement(self):
        idx = SeededRng(1).choice(10, 10)
        assert sorted(idx.tolist()) == list(range(10))

    def test_negative_seed_rejected(self):
        with pytest.raises(ValueError):
            SeededRng(-1)


class TestKaiming:
    def test_bound_formula(self):
        assert kaiming_bound(6) == pytest.approx(1.0)
        assert kaiming_bound(24) == pytest.approx(0.5)

    def test_samples_within_bound_and_variance(self):
        w = kaiming_uniform(50, 2000, SeededRng(0))
        b = math.sqrt(6 / 50)
        assert np.all(np.abs(w) <= b)
        # U(-b, b) has variance b^2 / 3 = 2 / fan_in
        assert w.var() == pytest.approx(2 / 50, rel=0.02)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            kaiming_uniform(0, 1, SeededRng(0))


def test_monte_carlo_bound_and_mean():
    rng = SeededRng(0)
    w = np.stack([kaiming_uniform(24, 4, rng) for _ in range(10_000)])
    assert abs(w.mean()) <= 0.02
    assert np.abs(w).max() <= 0.5


def test_unit_bound_for_six_rows():
    w = kaiming_uniform(6, 1, SeededRng(0))
    assert np.all(np.abs(w) < 1.0)
    assert np.array_equal(w, kaiming_uniform(6, 1, SeededRng(0)))
