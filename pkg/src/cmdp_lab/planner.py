"""Exact finite-horizon dynamic programming on tabular slices.

A slice for one context is ``P_w`` of shape ``(H, S, A, S)`` and ``r_w`` of
shape ``(H, S, A)``. Policies are deterministic integer tables ``(H, S)``.
Step indices are 0-based throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cmdp_lab.errors import InvalidKernel

KERNEL_TOL = 1e-9


@dataclass(frozen=True)
class ValueTable:
    V: np.ndarray  # (H + 1, S), last row zero
    Q: np.ndarray  # (H, S, A)
    cap: float


@dataclass(frozen=True)
class OccupancyTable:
    rho: np.ndarray  # (H, S)
    rho_sa: np.ndarray  # (H, S, A)


def check_kernel(P_w: np.ndarray) -> None:
    if P_w.min() < -KERNEL_TOL:
        raise InvalidKernel(f"negative transition probability {P_w.min():.3g}")
    err = np.abs(P_w.sum(axis=-1) - 1.0).max()
    if err > KERNEL_TOL:
        raise InvalidKernel(f"transition rows off by {err:.3g}")


def _cap_value(cap) -> float:
    return np.inf if cap is None else float(cap)


def truncated_plan(P_w: np.ndarray, r_w: np.ndarray, H: int, cap=None, *, check: bool = True):
    """Greedy backward induction with ``Q = min(cap, r + P V)``.

    Returns ``(policy, ValueTable)``; ``np.argmax`` breaks ties toward the
    lowest action id. Because the capped update is monotone in the
    continuation value, the greedy table maximizes the capped value.
    """
    if check:
        check_kernel(P_w)
    c = _cap_value(cap)
    _, S, A, _ = P_w.shape
    V = np.zeros((H + 1, S))
    Q = np.zeros((H, S, A))
    policy = np.zeros((H, S), dtype=np.int64)
    for h in range(H - 1, -1, -1):
        Q[h] = np.minimum(c, r_w[h] + P_w[h] @ V[h + 1])
        policy[h] = np.argmax(Q[h], axis=1)
        V[h] = Q[h].max(axis=1)
    return policy, ValueTable(V, Q, c)


def optimal_plan(P_w: np.ndarray, r_w: np.ndarray, H: int, *, check: bool = True):
    """Uncapped backward induction; returns ``(policy, V)`` with ``V`` of shape ``(H + 1, S)``."""
    policy, table = truncated_plan(P_w, r_w, H, None, check=check)
    return policy, table.V


def evaluate_policy(P_w: np.ndarray, r_w: np.ndarray, policy_w: np.ndarray, H: int, cap=None) -> ValueTable:
    """Policy evaluation with an optional per-step cap (``None``, ``H`` or ``3H`` in practice)."""
    c = _cap_value(cap)
    _, S, A, _ = P_w.shape
    V = np.zeros((H + 1, S))
    Q = np.zeros((H, S, A))
    idx = np.arange(S)
    for h in range(H - 1, -1, -1):
        Q[h] = np.minimum(c, r_w[h] + P_w[h] @ V[h + 1])
        V[h] = Q[h][idx, policy_w[h]]
    return ValueTable(V, Q, c)


def occupancy(
    P_w: np.ndarray,
    policy_w: np.ndarray,
    H: int,
    initial_state: int = 0,
    uniform_at: int | None = None,
) -> OccupancyTable:
    """Forward marginals of ``s_h`` and ``(s_h, a_h)`` from the fixed initial state.

    With ``uniform_at = h`` the action at step ``h`` is drawn uniformly instead
    of from the policy; earlier steps follow the policy. Steps after ``h`` are
    still reported and follow the policy again.
    """
    _, S, A, _ = P_w.shape
    rho = np.zeros((H, S))
    rho_sa = np.zeros((H, S, A))
    rho[0, initial_state] = 1.0
    idx = np.arange(S)
    for h in range(H):
        if uniform_at == h:
            rho_sa[h] = rho[h][:, None] / A
        else:
            rho_sa[h, idx, policy_w[h]] = rho[h]
        if h + 1 < H:
            rho[h + 1] = np.einsum("sa,sat->t", rho_sa[h], P_w[h])
    return OccupancyTable(rho, rho_sa)


def plan_all_contexts(P: np.ndarray, r: np.ndarray, H: int, cap=None, *, check: bool = True):
    """Plan every context of ``(W, H, S, A, S)`` tables; returns ``(W, H, S)`` policies and ``(W, H+1, S)`` values."""
    W = P.shape[0]
    policies = []
    values = []
    for w in range(W):
        pol, table = truncated_plan(P[w], r[w], H, cap, check=check)
        policies.append(pol)
        values.append(table.V)
    return np.stack(policies), np.stack(values)


def context_values(instance, policies: np.ndarray) -> np.ndarray:
    """True value at the initial state of each context under ``policies`` ``(W, H, S)``."""
    H = instance.dims.horizon
    s1 = instance.initial_state
    return np.array([
        evaluate_policy(instance.P[w], instance.r[w], policies[w], H).V[0, s1]
        for w in range(instance.dims.num_contexts)
    ])


def optimal_values(instance) -> np.ndarray:
    H = instance.dims.horizon
    s1 = instance.initial_state
    return np.array([
        optimal_plan(instance.P[w], instance.r[w], H, check=False)[1][0, s1]
        for w in range(instance.dims.num_contexts)
    ])


def avg_subopt_gap(instance, policies: np.ndarray, v_star: np.ndarray | None = None) -> float:
    """``sum_w q(w) (V*_w(s1) - V^pi_w(s1))`` computed exactly."""
    if v_star is None:
        v_star = optimal_values(instance)
    return float(instance.q @ (v_star - context_values(instance, policies)))
