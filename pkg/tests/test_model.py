from __future__ import annotations

import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from cmdp_lab.errors import InvalidInstance
from cmdp_lab.model import (
    ContextSpace,
    Dims,
    FeatureSpec,
    ModelKind,
    WeightSpec,
    build_tabular,
    compute_pmin_pmax,
    generate_instance,
    instance_from_dict,
    instance_to_dict,
    instance_violations,
    load_instance,
    model_class_violations,
    sample_context,
    sample_episode,
    save_instance,
)


def _single_step(phi_row, mu_rows):
    """Model I instance with one step, one action, one context."""
    S = len(mu_rows)
    d = len(phi_row)
    phi = np.tile(np.asarray(phi_row, float), (1, S, 1, 1, 1))
    psi = np.zeros((1, S, 1, 1, d))
    mu = np.asarray(mu_rows, float)[None]
    eta = np.zeros((1, d))
    return build_tabular(FeatureSpec(ModelKind.MODEL_I, phi, psi), WeightSpec(mu, eta),
                         Dims(S, 1, 1, 1, d), ContextSpace([1.0]))


def test_uniform_rows_from_constant_feature():
    S = 4
    inst = _single_step([1.0], [[1.0 / S]] * S)
    assert_allclose(inst.P[0, 0, :, 0], np.full((S, S), 1.0 / S), atol=1e-15)


def test_two_dim_row():
    inst = _single_step([0.6, 0.4], [[1, 0], [0, 1]])
    assert_allclose(inst.P[0, 0, 0, 0], [0.6, 0.4], atol=1e-15)


def test_negative_probability_rejected():
    with pytest.raises(InvalidInstance, match="negative"):
        _single_step([0.9, -0.5], [[1, 0], [0, 1]])


def test_shape_mismatch_rejected():
    with pytest.raises(InvalidInstance):
        build_tabular(FeatureSpec(ModelKind.MODEL_I, np.zeros((1, 2, 1, 1, 1)), np.zeros((1, 2, 1, 1, 1))),
                      WeightSpec(np.zeros((1, 3, 1)), np.zeros((1, 1))), Dims(2, 1, 1, 1, 1), ContextSpace([1.0]))


def test_generator_deterministic():
    dims = Dims(4, 2, 3, 4, 3)
    a, ca = generate_instance(7, dims, ModelKind.MODEL_I, 5, 0.0)
    b, cb = generate_instance(7, dims, ModelKind.MODEL_I, 5, 0.0)
    assert_array_equal(a.P, b.P)
    assert_array_equal(a.r, b.r)
    assert_array_equal(ca.candidates, cb.candidates)
    assert ca.true_index == cb.true_index


def test_generator_mixture_floor():
    dims = Dims(4, 2, 3, 4, 3)
    inst, _ = generate_instance(3, dims, ModelKind.MODEL_I, 2, 0.2)
    assert inst.P.min() >= 0.2 / 4 - 1e-15


def test_generator_singleton_class():
    inst, mc = generate_instance(1, Dims(3, 2, 2, 2, 2), ModelKind.MODEL_I, 1, 0.0)
    assert len(mc) == 1 and mc.true_index == 0
    assert_array_equal(mc.truth, inst.weights.mu)


def test_true_index_not_always_zero():
    idx = {generate_instance(s, Dims(3, 2, 2, 2, 2), ModelKind.MODEL_I, 6, 0.0)[1].true_index for s in range(20)}
    assert len(idx) > 1


def test_model2_requires_mixing():
    with pytest.raises(ValueError):
        generate_instance(0, Dims(3, 2, 2, 2, 2), ModelKind.MODEL_II, 2, 0.0)


def test_generator_soundness_many_seeds():
    for seed in range(1000):
        kind = ModelKind.MODEL_I if seed % 2 else ModelKind.MODEL_II
        inst, classes = generate_instance(seed, Dims(3, 2, 2, 2, 2), kind, 2, 0.1)
        assert instance_violations(inst) == []


def test_model_classes_valid(small_model1, small_model2):
    inst, mc = small_model1
    assert model_class_violations(inst, mc) == []
    inst2, (c2, c3) = small_model2
    assert model_class_violations(inst2, c2) == []
    assert model_class_violations(inst2, c3) == []


def test_reconstruction_model2(small_model2):
    inst, _ = small_model2
    phi, mu = inst.features.phi, inst.weights.mu
    for w, h, s, a, t in itertools.product(range(3), range(3), range(4), range(2), range(4)):
        assert abs(inst.P[w, h, s, a, t] - phi[h, s, a] @ mu[h, t, w]) <= 1e-10
    for w, h, s, a in itertools.product(range(3), range(3), range(4), range(2)):
        assert abs(inst.r[w, h, s, a] - inst.features.psi[h, s, a] @ inst.weights.eta[h, w]) <= 1e-10


def test_sample_context_point_mass():
    rng = np.random.default_rng(0)
    cs = ContextSpace([1.0, 0.0, 0.0])
    assert {sample_context(cs, rng) for _ in range(1000)} == {0}


def test_sample_context_frequencies():
    rng = np.random.default_rng(4)
    cs = ContextSpace([0.25] * 4)
    draws = np.array([sample_context(cs, rng) for _ in range(100_000)])
    assert_allclose(np.bincount(draws, minlength=4) / draws.size, 0.25, atol=0.01)


def test_sample_context_streams_differ():
    cs = ContextSpace([0.5, 0.5])
    a = [sample_context(cs, np.random.default_rng(1)) for _ in range(1)]
    r1, r2 = np.random.default_rng(1), np.random.default_rng(2)
    s1 = [sample_context(cs, r1) for _ in range(64)]
    s2 = [sample_context(cs, r2) for _ in range(64)]
    assert s1 != s2
    r1b = np.random.default_rng(1)
    assert s1 == [sample_context(cs, r1b) for _ in range(64)]
    assert a[0] == s1[0]


def _deterministic_chain(S, H):
    # state s moves to s+1 (mod S) under any action
    d = S
    phi = np.zeros((H, S, 1, 1, d))
    for s in range(S):
        phi[:, s, 0, 0, (s + 1) % S] = 1.0
    mu = np.tile(np.eye(S)[None], (H, 1, 1))
    psi = phi.copy()
    eta = np.full((H, d), 0.5)
    return build_tabular(FeatureSpec(ModelKind.MODEL_I, phi, psi), WeightSpec(mu, eta),
                         Dims(S, 1, 1, H, d), ContextSpace([1.0]))


def test_sample_episode_deterministic_path():
    inst = _deterministic_chain(3, 4)
    policy = np.zeros((4, 3), dtype=int)
    for seed in range(5):
        traj = sample_episode(inst, 0, policy, np.random.default_rng(seed))
        assert [st[0] for st in traj.steps] == [0, 1, 2, 0]
        assert [st[3] for st in traj.steps] == [1, 2, 0, 1]
        assert_allclose([st[2] for st in traj.steps], 0.5)


def test_sample_episode_single_step(small_model1):
    inst, _ = small_model1
    dims = inst.dims
    from cmdp_lab.model import FeatureSpec as FS
    one = build_tabular(FS(ModelKind.MODEL_I, inst.features.phi[:1], inst.features.psi[:1]),
                        WeightSpec(inst.weights.mu[:1], inst.weights.eta[:1]),
                        Dims(dims.num_states, dims.num_actions, dims.num_contexts, 1, dims.feat_dim),
                        inst.context_space)
    traj = sample_episode(one, 1, np.zeros((1, dims.num_states), dtype=int), np.random.default_rng(0))
    assert len(traj) == 1 and traj.steps[0][0] == 0


def test_sample_episode_contiguous(small_model1):
    inst, _ = small_model1
    rng = np.random.default_rng(0)
    policy = rng.integers(2, size=(3, 4, 4))
    traj = sample_episode(inst, 2, policy, rng)
    for prev, nxt in zip(traj.steps, traj.steps[1:]):
        assert prev[3] == nxt[0]


def test_next_state_frequencies(small_model2):
    inst, _ = small_model2
    rng = np.random.default_rng(99)
    draws = np.array([inst.next_state(1, 0, 0, 1, rng) for _ in range(50_000)])
    freq = np.bincount(draws, minlength=4) / draws.size
    assert_allclose(freq, inst.P[1, 0, 0, 1], atol=0.01)


def test_pmin_single_state():
    inst = _deterministic_chain(1, 3)
    assert compute_pmin_pmax(inst) == (1.0, 1.0)


def test_pmin_zero_for_unreachable():
    inst = _deterministic_chain(3, 3)
    p_min, p_max = compute_pmin_pmax(inst)
    assert p_min == 0.0 and p_max == 1.0


def test_pmin_mixture_bound():
    inst, _ = generate_instance(5, Dims(4, 2, 2, 3, 3), ModelKind.MODEL_II, 2, 0.2)
    assert compute_pmin_pmax(inst)[0] >= 0.2 / 4 - 1e-15


def _enumerate_extremes(inst):
    W, H, S, A = inst.dims.num_contexts, inst.dims.horizon, inst.dims.num_states, inst.dims.num_actions
    lo, hi = np.inf, -np.inf
    for w in range(W):
        for flat in itertools.product(range(A), repeat=H * S):
            pol = np.array(flat).reshape(H, S)
            rho = np.zeros(S)
            rho[inst.initial_state] = 1.0
            for h in range(H - 1):
                step = np.zeros(S)
                for s in range(S):
                    step += rho[s] * inst.P[w, h, s, pol[h, s]]
                rho = step
                lo, hi = min(lo, rho.min()), max(hi, rho.max())
    return lo, hi


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), S=st.integers(1, 3), A=st.integers(1, 2), H=st.integers(2, 3))
def test_pmin_matches_enumeration(seed, S, A, H):
    d = min(2, S * A)
    inst, _ = generate_instance(seed, Dims(S, A, 2, H, d), ModelKind.MODEL_I, 1, 0.0)
    lo, hi = compute_pmin_pmax(inst)
    elo, ehi = _enumerate_extremes(inst)
    assert_allclose([lo, hi], [elo, ehi], atol=1e-12)


def test_json_round_trip(tmp_path, small_model2):
    inst, (c2, c3) = small_model2
    path = tmp_path / "inst.json"
    save_instance(path, inst, [c2, c3])
    back, classes = load_instance(path)
    assert back.seed == inst.seed
    for a, b in [(back.P, inst.P), (back.r, inst.r), (back.features.phi, inst.features.phi),
                 (back.weights.mu, inst.weights.mu), (back.q, inst.q)]:
        assert_allclose(a, b, rtol=0, atol=1e-15)
    assert_array_equal(classes["reward"].candidates, c3.candidates)
    assert classes["transition"].true_index == c2.true_index


def test_corrupted_document_rejected(small_model1):
    inst, mc = small_model1
    doc = instance_to_dict(inst, mc)
    doc["mu"]["data"][0] += 0.5
    with pytest.raises(InvalidInstance):
        instance_from_dict(json.loads(json.dumps(doc)))
    loose, _ = instance_from_dict(doc, validate=False)
    assert instance_violations(loose)


def test_tables_immutable(small_model1):
    inst, _ = small_model1
    with pytest.raises(ValueError):
        inst.P[0, 0, 0, 0, 0] = 1.0
