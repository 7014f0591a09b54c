from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from cmdp_lab.errors import InvalidKernel
from cmdp_lab.model import Dims, ModelKind, generate_instance
from cmdp_lab.planner import (
    avg_subopt_gap,
    evaluate_policy,
    occupancy,
    optimal_plan,
    optimal_values,
    truncated_plan,
)


def _random_slice(rng, H, S, A):
    return rng.dirichlet(np.ones(S), size=(H, S, A)), rng.uniform(0, 1, (H, S, A))


def _enumerate_best(P, r, H, cap):
    S, A = r.shape[1], r.shape[2]
    best = -np.inf
    for flat in itertools.product(range(A), repeat=H * S):
        pol = np.array(flat).reshape(H, S)
        best = max(best, evaluate_policy(P, r, pol, H, cap).V[0, 0])
    return best


def test_zero_reward():
    P, _ = _random_slice(np.random.default_rng(0), 3, 3, 2)
    pol, vt = truncated_plan(P, np.zeros((3, 3, 2)), 3, 9)
    assert np.all(vt.V == 0) and np.all(pol == 0)


def test_cap_binds():
    P, _ = _random_slice(np.random.default_rng(0), 3, 2, 2)
    _, vt = truncated_plan(P, np.full((3, 2, 2), 9.0), 3, 9)
    assert_allclose(vt.Q, 9.0)


def test_optimal_constant_rewards():
    P, _ = _random_slice(np.random.default_rng(1), 4, 3, 2)
    _, V = optimal_plan(P, np.ones((4, 3, 2)), 4)
    assert_allclose(V[:4], np.repeat([[4], [3], [2], [1]], 3, axis=1))
    _, V0 = optimal_plan(P, np.zeros((4, 3, 2)), 4)
    assert np.all(V0 == 0)


def test_invalid_kernel():
    P = np.full((1, 2, 1, 2), 0.6)
    with pytest.raises(InvalidKernel):
        truncated_plan(P, np.zeros((1, 2, 1)), 1, None)


@pytest.mark.parametrize("seed", range(10))
def test_truncated_and_optimal_match_enumeration(seed):
    rng = np.random.default_rng(seed)
    H, S, A = 3, 3, 2
    P, r = _random_slice(rng, H, S, A)
    r_big = r * 4  # rewards above one so the 3H cap can bind
    for rew, cap in [(r, None), (r_big, 3 * H), (r_big, 2.0)]:
        pol, vt = truncated_plan(P, rew, H, cap)
        assert_allclose(vt.V[0, 0], _enumerate_best(P, rew, H, cap), atol=1e-10)
        assert_allclose(evaluate_policy(P, rew, pol, H, cap).V, vt.V, atol=1e-12)


def test_evaluate_consistency_and_cap_irrelevance():
    rng = np.random.default_rng(3)
    P, r = _random_slice(rng, 4, 4, 3)
    pol, V = optimal_plan(P, r, 4)
    assert_allclose(evaluate_policy(P, r, pol, 4).V, V, atol=1e-14)
    other = rng.integers(3, size=(4, 4))
    assert_allclose(evaluate_policy(P, r, other, 4, cap=4).V, evaluate_policy(P, r, other, 4).V, atol=1e-12)


def test_single_state_sum():
    P = np.ones((4, 1, 1, 1))
    r = np.full((4, 1, 1), 0.3)
    assert_allclose(evaluate_policy(P, r, np.zeros((4, 1), int), 4).V[0, 0], 1.2)


def test_occupancy_basics():
    rng = np.random.default_rng(0)
    P, _ = _random_slice(rng, 3, 4, 2)
    pol = rng.integers(2, size=(3, 4))
    occ = occupancy(P, pol, 3, initial_state=2)
    assert_allclose(occ.rho[0], np.eye(4)[2])
    assert_allclose(occ.rho.sum(axis=1), 1.0, atol=1e-10)
    uniform = np.full((3, 4, 2, 4), 0.25)
    assert_allclose(occupancy(uniform, pol, 3).rho[1:], 0.25)
    mixed = occupancy(P, pol, 3, uniform_at=1)
    assert_allclose(mixed.rho_sa[1], np.repeat(mixed.rho[1][:, None] / 2, 2, axis=1))


def test_occupancy_monte_carlo(small_model1):
    inst, _ = small_model1
    rng = np.random.default_rng(8)
    pol = rng.integers(2, size=(4, 4))
    w = 1
    occ = occupancy(inst.P[w], pol, 4, inst.initial_state)
    counts = np.zeros((4, 4))
    n = 100_000
    for _ in range(n):
        s = inst.initial_state
        for h in range(4):
            counts[h, s] += 1
            s = inst.next_state(w, h, s, int(pol[h, s]), rng)
    assert_allclose(counts / n, occ.rho, atol=0.005)


def test_gap_properties(small_model1):
    inst, _ = small_model1
    W, H, S = 3, 4, 4
    opt = np.stack([optimal_plan(inst.P[w], inst.r[w], H)[0] for w in range(W)])
    assert abs(avg_subopt_gap(inst, opt)) <= 1e-12
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert avg_subopt_gap(inst, rng.integers(2, size=(W, H, S))) >= -1e-10


def test_gap_single_context():
    inst, _ = generate_instance(2, Dims(3, 2, 1, 3, 2), ModelKind.MODEL_I, 1, 0.0)
    pol = np.zeros((1, 3, 3), dtype=int)
    direct = optimal_values(inst)[0] - evaluate_policy(inst.P[0], inst.r[0], pol[0], 3).V[0, 0]
    assert_allclose(avg_subopt_gap(inst, pol), direct, atol=1e-15)


def test_uniform_random_policy_gap_pinned():
    # Exact DP on the Model I reference instance; value frozen after first computation.
    inst, _ = generate_instance(7, Dims(5, 2, 3, 4, 3), ModelKind.MODEL_I, 4, 0.0)
    W, H, S, A = 3, 4, 5, 2
    # uniform-random-action value via averaged kernels and rewards
    v = np.zeros(W)
    for w in range(W):
        V = np.zeros(S)
        for h in range(H - 1, -1, -1):
            V = (inst.r[w, h] + inst.P[w, h] @ V).mean(axis=1)
        v[w] = V[0]
    gap = float(inst.q @ (optimal_values(inst) - v))
    assert gap > 0
    assert_allclose(gap, UNIFORM_GAP_REF, rtol=1e-12)


UNIFORM_GAP_REF = 0.5330442530318239  # pure-python Bellman recursion


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31), cap=st.sampled_from([None, 1.0, 3.0]))
def test_greedy_beats_random_policies(seed, cap):
    rng = np.random.default_rng(seed)
    P, r = _random_slice(rng, 3, 3, 2)
    r = r * 2
    _, vt = truncated_plan(P, r, 3, cap)
    for _ in range(10):
        other = evaluate_policy(P, r, rng.integers(2, size=(3, 3)), 3, cap).V
        assert np.all(other <= vt.V + 1e-12)
