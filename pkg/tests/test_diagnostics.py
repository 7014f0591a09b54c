from __future__ import annotations

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cmdp_lab.agents import AgentConfig, run_algorithm1, run_algorithm2
from cmdp_lab.bonuses import BonusParams
from cmdp_lab.diagnostics import (
    check_concentration_event,
    check_elliptical_potential,
    check_lsr_guarantee,
    check_mle_guarantee,
    check_pointwise_coverage_model1,
    check_simulation_lemma,
    check_truncation_lemmas,
    elliptical_potential,
    random_kernel,
    truncation_violations,
)
from cmdp_lab.model import ModelClass, ModelKind, compute_pmin_pmax
from cmdp_lab.planner import evaluate_policy


def test_simulation_lemma_identical():
    rng = np.random.default_rng(0)
    P = random_kernel(rng, 3, 3, 2)
    r = rng.uniform(0, 1, (3, 3, 2))
    rep = check_simulation_lemma(P, P, r, r, np.zeros((3, 3), int), 3)
    assert rep.passed and rep.context["direct"] == 0


def test_simulation_lemma_hand_case():
    # two states, H=2, deterministic chains; start in 0 with reward 1 only in state 1
    P1 = np.zeros((2, 2, 1, 2))
    P1[:, 0, 0, 1] = 1
    P1[:, 1, 0, 1] = 1
    P2 = np.zeros((2, 2, 1, 2))
    P2[:, :, 0, 0] = 1
    r = np.zeros((2, 2, 1))
    r[:, 1, 0] = 1
    pol = np.zeros((2, 2), int)
    rep = check_simulation_lemma(P1, P2, r, r, pol, 2)
    assert rep.passed
    assert_allclose(rep.context["direct"], 1.0)


def test_simulation_lemma_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(100):
        S, A, H = rng.integers(1, 7), rng.integers(1, 4), rng.integers(1, 6)
        P1, P2 = random_kernel(rng, H, S, A), random_kernel(rng, H, S, A)
        r1, r2 = rng.uniform(0, 1, (H, S, A)), rng.uniform(0, 1, (H, S, A))
        assert check_simulation_lemma(P1, P2, r1, r2, rng.integers(A, size=(H, S)), H).passed


def test_elliptical_examples():
    assert check_elliptical_potential(np.zeros((5, 2)), 1.0).measured == 0
    rep = check_elliptical_potential(np.array([[1.0]]), 1.0)
    assert_allclose(rep.measured, 1.0)
    assert_allclose(rep.bound, 2 * math.log(2))
    assert rep.passed


def test_elliptical_unit_streams():
    rng = np.random.default_rng(2)
    for _ in range(100):
        xs = rng.normal(size=(500, 4))
        xs /= np.linalg.norm(xs, axis=1, keepdims=True)
        rep = check_elliptical_potential(xs, 1.0)
        assert rep.passed
        assert rep.measured <= rep.context["logdet_bound"] + 1e-9


def test_elliptical_matches_direct_inverse():
    rng = np.random.default_rng(3)
    xs = rng.normal(size=(30, 3)) / 3
    M = 2.0 * np.eye(3)
    total = 0.0
    for x in xs:
        total += x @ np.linalg.inv(M) @ x
        M = M + np.outer(x, x)
    assert_allclose(elliptical_potential(xs, 2.0)[0], total, rtol=1e-12)


def test_truncation_suite():
    rep = check_truncation_lemmas(np.random.default_rng(4), 200)
    assert rep.passed, rep.context


def test_truncation_degenerate_cases():
    rng = np.random.default_rng(5)
    P = random_kernel(rng, 3, 3, 2)
    pol = rng.integers(2, size=(3, 3))
    zero = np.zeros((3, 3, 2))
    v = truncation_violations(P, P, pol, zero, [zero, zero, zero], 3)
    assert all(x <= 0 for x in v.values())
    # equal kernels: the correction term vanishes
    g = np.einsum("hsat,ht->hsa", P - P, np.ones((3, 3)))
    assert np.all(g == 0)
    assert evaluate_policy(P, g, pol, 3).V[0, 0] == 0


def _model1_states(inst, mc, N, checkpoints, seed=0, scale=1.0):
    d = inst.dims
    cfg = AgentConfig(ModelKind.MODEL_I, BonusParams(d.horizon, d.feat_dim, d.num_actions, len(mc),
                                                     bonus_scale=scale), N, seed=seed)
    reports = {}

    def cb(state):
        if state.n in checkpoints:
            reports[state.n] = {
                "mle": check_mle_guarantee(state, 0.1),
                "cov_r": check_pointwise_coverage_model1(state, "reward"),
                "cov_t": check_pointwise_coverage_model1(state, "transition"),
                "conc": check_concentration_event(state),
                "mle_truth_zero": state.transition_indices,
            }

    run_algorithm1(inst, mc, cfg, cb)
    return reports


def test_model1_run_checks(small_model1):
    inst, mc = small_model1
    reps = _model1_states(inst, mc, 33, {2, 8, 32})
    for n, rep in reps.items():
        assert rep["cov_r"].passed
        assert rep["mle"].bound == pytest.approx(math.log(2 * len(mc) * n * inst.dims.horizon / 0.1))
    assert reps[32]["mle"].passed


def test_concentration_at_n2_first_episode_only(small_model1):
    inst, mc = small_model1
    reps = _model1_states(inst, mc, 2, {2})
    assert np.isfinite(reps[2]["conc"].measured)


def test_mle_zero_with_singleton_class(small_model1):
    # only the truth is available, so the fitted model equals it exactly
    inst, mc = small_model1
    single = ModelClass(mc.truth[None], 0, mc.kind)
    reps = _model1_states(inst, single, 40, {8, 39}, scale=0.05)
    for rep in reps.values():
        assert np.all(rep["mle_truth_zero"] == 0)
        assert rep["mle"].measured == pytest.approx(0.0, abs=1e-12)
        assert rep["mle"].passed


def test_model2_checks(small_model2):
    inst, (c2, c3) = small_model2
    d = inst.dims
    p_min, p_max = compute_pmin_pmax(inst)
    cfg = AgentConfig(ModelKind.MODEL_II, BonusParams(d.horizon, d.feat_dim, d.num_actions, (4, 4),
                                                      planned_episodes=64, C=math.sqrt(p_max / p_min)), 64)
    out = {}

    def cb(state):
        if state.n in (2, 64):
            out[state.n] = (check_mle_guarantee(state, 0.1), check_lsr_guarantee(state, 0.1),
                            check_concentration_event(state))

    run_algorithm2(inst, c2, c3, cfg, cb)
    for mle, lsr, conc in out.values():
        assert mle.passed and lsr.passed
    # after one episode the truth is usually already separated on observed tuples
    assert out[64][1].measured >= 0
