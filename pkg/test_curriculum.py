#!/usr/bin/env python3
"""Curriculum tests: removal formula, smoothing distribution and reset policy"""
import math

import numpy as np
import pytest

from curriculum import (CurriculumState, advance, removal_count, removal_probability, sample_offset,
                        scaled_steps_per_drop, steps_to_full_removal)
from errors import ConfigError


def _brute_force(t, T, o, k_i):
    # count whole drops by repeated subtraction instead of floor division
    level, position = 0, t / T + o
    while level + 1 <= position + 1e-12:
        level += 1
    return min(level, k_i)


def test_removal_matches_brute_force_grid():
    rng = np.random.default_rng(0)
    for T in (1, 3, 7, 500):
        ts = list(range(0, 4 * T + 2)) if T < 10 else [0, 1, T - 1, T, T + 1, 2 * T, 5 * T - 1, 5 * T]
        ts += [int(x) for x in rng.integers(0, 20 * T, size=20)]
        for t in ts:
            for o in (0.0, 0.125, 0.5, 0.999):
                for k_i in (0, 1, 5, 19):
                    state = CurriculumState(t=t, T=T, o=o)
                    assert removal_count(state, k_i) == _brute_force(t, T, o, k_i)


def test_removal_is_monotone_and_capped():
    for k_i in (0, 3, 10):
        previous = 0
        for t in range(0, 200):
            s = removal_count(CurriculumState(t=t, T=10, o=0.0), k_i)
            assert previous <= s <= k_i
            previous = s
        assert previous == min(k_i, 19)


def test_known_value():
    state = CurriculumState(t=4000, T=2000, o=0.0)
    assert removal_count(state, 19) == 2
    assert removal_count(state, 1) == 1


def test_boundary_is_exact():
    # t / T + o lands exactly on 3 without float drift
    assert removal_count(CurriculumState(t=5, T=2, o=0.5), 10) == 3
    assert removal_count(CurriculumState(t=299, T=100, o=0.01), 10) == 3


def test_offset_distribution():
    rng = np.random.default_rng(42)
    draws = np.array([sample_offset(4.0, rng) for _ in range(100000)])
    assert (draws >= 0).all()
    mean, stderr = draws.mean(), draws.std() / math.sqrt(len(draws))
    assert abs(mean - 0.25) < 3 * stderr


def test_removal_probability_is_a_distribution():
    for t, T, lam in ((0, 10, 4.0), (13, 5, 1.5), (100, 7, 0.5)):
        total = sum(removal_probability(t, T, lam, k) for k in range(0, 200))
        assert total == pytest.approx(1.0, abs=1e-9)
        assert removal_probability(t, T, lam, t // T - 1) == 0.0


def test_empirical_removal_frequencies():
    rng = np.random.default_rng(9)
    counts = {}
    n = 20000
    for _ in range(n):
        s = removal_count(CurriculumState(t=15, T=10, o=sample_offset(4.0, rng)), 50)
        counts[s] = counts.get(s, 0) + 1
    for k in (1, 2):
        p = removal_probability(15, 10, 4.0, k)
        assert abs(counts.get(k, 0) / n - p) < 4 * math.sqrt(p * (1 - p) / n)


def test_advance_sets_reset_flag_on_level_change():
    rng = np.random.default_rng(1)
    state = CurriculumState(t=0, T=3)
    flags = []
    for _ in range(9):
        state, flag = advance(state, rng)
        flags.append(flag)
    assert state.t == 9
    assert [i + 1 for i, f in enumerate(flags) if f] == [3, 6, 9]


def test_state_round_trip():
    state = CurriculumState(t=7, T=3, lam=2.0, o=0.3)
    assert CurriculumState.from_dict(state.to_dict()) == state


def test_invalid_parameters():
    with pytest.raises(ConfigError):
        CurriculumState(lam=0.0)
    with pytest.raises(ConfigError):
        CurriculumState(lam=-1.0)
    with pytest.raises(ConfigError):
        CurriculumState(T=0)
    with pytest.raises(ConfigError):
        sample_offset(0.0, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        removal_count(CurriculumState(), -1)


def test_desk_scaling():
    assert scaled_steps_per_drop(2000, 8) == 200
    assert scaled_steps_per_drop(5, 8) == 1
    assert steps_to_full_removal(200, 8) == 1600


if __name__ == '__main__':
    import sys
    sys.exit(pytest.main([__file__, '-v']))
