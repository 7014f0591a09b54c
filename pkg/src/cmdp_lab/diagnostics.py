"""Executable checks of the analysis' supporting inequalities.

Every expectation is evaluated exactly from occupancy tables. Run-dependent
checks take a :class:`cmdp_lab.agents.RunState` snapshot and never mutate it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from cmdp_lab.model import ModelKind, reward_table
from cmdp_lab.planner import evaluate_policy, occupancy

ONE_SIDED_TOL = 1e-9
EQUALITY_TOL = 1e-9
CONCENTRATION_BAND = (0.2, 3.0)


@dataclass
class CheckReport:
    name: str
    measured: float
    bound: float
    passed: bool
    context: dict[str, Any] = field(default_factory=dict)

    def as_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "measured": self.measured,
            "bound": self.bound,
            "passed": self.passed,
            "context": self.context,
        }


def one_sided(name: str, measured: float, bound: float, **context) -> CheckReport:
    return CheckReport(name, float(measured), float(bound), bool(measured <= bound + ONE_SIDED_TOL), context)


def equality(name: str, discrepancy: float, tol: float = EQUALITY_TOL, **context) -> CheckReport:
    return CheckReport(name, float(discrepancy), float(tol), bool(abs(discrepancy) <= tol), context)


# ---------------------------------------------------------------------------
# deterministic value identities
# ---------------------------------------------------------------------------

def _expected_over_path(P_w, policy_w, H, s1, per_step) -> float:
    """``sum_h E_{(P, pi)}[per_step[h](s_h, a_h)]``."""
    occ = occupancy(P_w, policy_w, H, s1)
    return float(np.sum(occ.rho_sa * per_step))


def check_simulation_lemma(P1, P2, r1, r2, policy, H: int, initial_state: int = 0) -> CheckReport:
    """Direct value difference against both telescoping expansions."""
    v1 = evaluate_policy(P1, r1, policy, H).V
    v2 = evaluate_policy(P2, r2, policy, H).V
    direct = v1[0, initial_state] - v2[0, initial_state]
    dP = P1 - P2
    under_p2 = (r1 - r2) + np.einsum("hsat,ht->hsa", dP, v1[1:])
    under_p1 = (r1 - r2) + np.einsum("hsat,ht->hsa", dP, v2[1:])
    form_a = _expected_over_path(P2, policy, H, initial_state, under_p2)
    form_b = _expected_over_path(P1, policy, H, initial_state, under_p1)
    gap = max(abs(direct - form_a), abs(direct - form_b), abs(form_a - form_b))
    return equality("simulation_lemma", gap, direct=direct, form_a=form_a, form_b=form_b)


def elliptical_potential(xs: np.ndarray, lambda0: float) -> tuple[float, float]:
    """``(sum_n x_n^T M_{n-1}^{-1} x_n, 2 log det M_N - 2 log det M_0)``."""
    xs = np.asarray(xs, dtype=float)
    d = xs.shape[1]
    M = lambda0 * np.eye(d)
    total = 0.0
    for x in xs:
        total += float(x @ np.linalg.solve(M, x))
        M += np.outer(x, x)
    logdet = 2.0 * (np.linalg.slogdet(M)[1] - d * math.log(lambda0))
    return total, logdet


def check_elliptical_potential(xs, lambda0: float) -> CheckReport:
    """Potential sum against ``2 d log(1 + N / (d lambda0))``.

    The closed-form bound needs each quadratic term at most one, which holds
    for ``||x|| <= 1`` once ``lambda0 >= 1``.
    """
    if lambda0 <= 0:
        raise ValueError("lambda0 must be positive")
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    N, d = xs.shape
    measured, logdet = elliptical_potential(xs, lambda0)
    bound = 2 * d * math.log(1 + N / (d * lambda0))
    return one_sided("elliptical_potential", measured, bound, logdet_bound=logdet, N=N, d=d)


def random_kernel(rng: np.random.Generator, H: int, S: int, A: int) -> np.ndarray:
    return rng.dirichlet(np.full(S, 0.5), size=(H, S, A))


def check_truncation_lemmas(rng: np.random.Generator, trials: int = 200,
                            max_states: int = 5, max_horizon: int = 4, max_actions: int = 3) -> CheckReport:
    """Cap irrelevance, the two sum-of-rewards inequalities, and the capped difference bound.

    Each trial draws a pair of kernels, a policy, a reward in ``[0, 1]`` and a
    non-negative reward triple whose entries may exceed the caps. The report
    carries the largest violation over all trials and sub-checks.
    """
    worst = -math.inf
    failures = []
    for t in range(trials):
        S = int(rng.integers(1, max_states + 1))
        A = int(rng.integers(1, max_actions + 1))
        H = int(rng.integers(1, max_horizon + 1))
        P1 = random_kernel(rng, H, S, A)
        P2 = random_kernel(rng, H, S, A)
        policy = rng.integers(A, size=(H, S))
        unit_r = rng.uniform(0, 1, size=(H, S, A))
        triple = [rng.uniform(0, H, size=(H, S, A)) * rng.integers(0, 2) for _ in range(3)]
        violations = truncation_violations(P1, P2, policy, unit_r, triple, H)
        for name, v in violations.items():
            if v > 0:
                failures.append((t, name, v))
            worst = max(worst, v)
    return CheckReport("truncation_lemmas", worst, 0.0, not failures,
                       {"trials": trials, "failures": failures[:10]})


def truncation_violations(P1, P2, policy, unit_r, triple, H: int, s1: int = 0) -> dict[str, float]:
    """Excess over each tolerance for one random draw; positive means broken."""
    out = {}
    plain = evaluate_policy(P1, unit_r, policy, H).V
    capped = evaluate_policy(P1, unit_r, policy, H, cap=H).V
    out["cap_irrelevance"] = float(np.abs(plain - capped).max()) - 1e-12
    total = triple[0] + triple[1] + triple[2]
    sum_bar = sum(evaluate_policy(P1, r, policy, H, cap=H).V for r in triple)
    dbar_total = evaluate_policy(P1, total, policy, H, cap=3 * H).V
    sum_dbar = sum(evaluate_policy(P1, r, policy, H, cap=3 * H).V for r in triple)
    out["bar_sum_below_doublebar"] = float((sum_bar - dbar_total).max()) - ONE_SIDED_TOL
    out["doublebar_subadditive"] = float((dbar_total - sum_dbar).max()) - ONE_SIDED_TOL
    # capped value under P1 minus plain value under P2, both with total reward
    dbar_p1 = evaluate_policy(P1, total, policy, H, cap=3 * H).V
    plain_p2 = evaluate_policy(P2, total, policy, H).V
    g = np.einsum("hsat,ht->hsa", P1 - P2, dbar_p1[1:])
    rhs = evaluate_policy(P2, g, policy, H).V
    out["capped_difference"] = float((dbar_p1[0] - plain_p2[0] - rhs[0]).max()) - ONE_SIDED_TOL
    return out


# ---------------------------------------------------------------------------
# run-dependent checks
# ---------------------------------------------------------------------------

def _step_occupancies(state, h: int) -> list[np.ndarray]:
    """For each past episode, ``q``-weighted ``(W, S, A)`` occupancy of ``(s_h, a_h)``.

    Model I follows the past policy at step ``h``; Model II draws the step-``h``
    action uniformly.
    """
    inst = state.instance
    H = inst.dims.horizon
    uniform = h if inst.model_kind is ModelKind.MODEL_II else None
    out = []
    for pol in state.past_policies:
        per_w = np.stack([
            occupancy(inst.P[w], pol[w], H, inst.initial_state, uniform_at=uniform).rho_sa[h]
            for w in range(inst.dims.num_contexts)
        ])
        out.append(per_w * inst.q[:, None, None])
    return out


def _zeta(class_size: int, n: int, H: int, delta: float) -> float:
    return math.log(2 * class_size * n * H / delta)


def mle_error_sum(state, h: int) -> float:
    """``sum_{tau<n} E ||P_hat - P||_TV^2`` at step ``h`` for the episode-``n`` estimate."""
    inst = state.instance
    tv = 0.5 * np.abs(state.P_hat[:, h] - inst.P[:, h]).sum(axis=-1)  # (W, S, A)
    return float(sum(np.sum(occ * tv ** 2) for occ in _step_occupancies(state, h)))


def check_mle_guarantee(state, delta: float, h: int | None = None) -> CheckReport:
    inst = state.instance
    H = inst.dims.horizon
    steps = range(H) if h is None else [h]
    measured = max(mle_error_sum(state, k) for k in steps)
    bound = _zeta(len(state.transition_class), state.n, H, delta)
    return one_sided("mle_guarantee", measured, bound, n=state.n, h=h)


def lsr_error_sum(state, h: int) -> float:
    inst = state.instance
    truth = inst.r[:, h]
    est = reward_table(inst.model_kind, inst.features.psi, state.eta_hat)[:, h]
    err = (est - truth) ** 2
    return float(sum(np.sum(occ * err) for occ in _step_occupancies(state, h)))


def check_lsr_guarantee(state, delta: float, h: int | None = None) -> CheckReport:
    inst = state.instance
    H = inst.dims.horizon
    steps = range(H) if h is None else [h]
    measured = max(lsr_error_sum(state, k) for k in steps)
    bound = _zeta(len(state.reward_class), state.n, H, delta)
    return one_sided("lsr_guarantee", measured, bound, n=state.n, h=h)


def transition_coverage_excess(state) -> float:
    """``max (|(P - P_hat) V_{h+1}| - b_hat)`` over all ``(w, h, s, a)``.

    ``V`` evaluates the episode's planned policy on the estimated kernel with
    the true reward, so it lies in ``[0, H]``.
    """
    inst = state.instance
    H = inst.dims.horizon
    worst = -math.inf
    for w in range(inst.dims.num_contexts):
        V = evaluate_policy(state.P_hat[w], inst.r[w], state.policies[w], H).V
        diff = np.abs(np.einsum("hsat,ht->hsa", inst.P[w] - state.P_hat[w], V[1:]))
        worst = max(worst, float((diff - state.tbonus[w]).max()))
    return worst


def reward_coverage_excess(state) -> tuple[float, float]:
    """Clipped-estimate excess over the capped bonus and raw excess over the uncapped width."""
    inst = state.instance
    clipped = float((np.abs(state.f_hat - inst.r) - state.rbonus).max())
    raw = reward_table(inst.model_kind, inst.features.psi, state.eta_hat)
    beta = state.schedule.beta
    psi = inst.psi_full()
    widths = np.stack([
        beta * np.sqrt(state.lam[h].quad_form_inv(psi[h], state.schedule.xi_n))
        for h in range(inst.dims.horizon)
    ])
    widths = np.moveaxis(widths, 3, 0)
    uncapped = float((np.abs(raw - inst.r) - widths).max())
    return clipped, uncapped


def check_pointwise_coverage_model1(state, part: str = "both") -> CheckReport:
    """Transition and/or reward coverage by the varying-representation bonuses.

    The reward half is a sure inequality for noiseless rewards at unit bonus
    scale; the transition half holds with high probability.
    """
    measured = -math.inf
    ctx: dict[str, Any] = {"n": state.n}
    if part in ("both", "transition"):
        ctx["transition"] = transition_coverage_excess(state)
        measured = max(measured, ctx["transition"])
    if part in ("both", "reward"):
        clipped, uncapped = reward_coverage_excess(state)
        ctx["reward_clipped"] = clipped
        ctx["reward_uncapped"] = uncapped
        measured = max(measured, clipped, uncapped)
    return one_sided(f"coverage_{part}", measured, 0.0, **ctx)


def expected_gram(state, h: int, which: str = "phi") -> np.ndarray:
    """``sum_{tau<n} E[x x^T]`` at step ``h`` without the ridge term."""
    inst = state.instance
    table = inst.features.phi if which == "phi" else inst.features.psi
    feats = table[h]
    d = inst.dims.feat_dim
    gram = np.zeros((d, d))
    for occ in _step_occupancies(state, h):
        if inst.model_kind is ModelKind.MODEL_I:
            gram += np.einsum("wsa,sawk,sawl->kl", occ, feats, feats)
        else:
            gram += np.einsum("sa,sak,sal->kl", occ.sum(axis=0), feats, feats)
    return gram


def norm_ratios(state, h: int, which: str = "phi") -> np.ndarray:
    """Empirical over expected inverse-norm ratios for every feature vector at step ``h``."""
    inst = state.instance
    if which == "phi":
        acc, reg = state.sigma[h], state.schedule.lambda_n
        feats = inst.phi_full()[h] if inst.model_kind is ModelKind.MODEL_I else inst.features.phi[h]
    else:
        acc, reg = state.lam[h], state.schedule.xi_n
        feats = inst.psi_full()[h] if inst.model_kind is ModelKind.MODEL_I else inst.features.psi[h]
    flat = feats.reshape(-1, feats.shape[-1])
    expected = expected_gram(state, h, which) + reg * np.eye(flat.shape[1])
    emp = acc.quad_form_inv(flat, reg)
    solved = np.linalg.solve(expected, flat.T).T
    exp_q = np.einsum("nk,nk->n", flat, solved)
    keep = exp_q > 0
    return np.sqrt(emp[keep] / exp_q[keep])


def check_concentration_event(state, h: int | None = None) -> CheckReport:
    """Worst ratio across both covariance pairs, normalized so passing means ``<= 1``."""
    H = state.instance.dims.horizon
    lo, hi = CONCENTRATION_BAND
    steps = range(H) if h is None else [h]
    rmin, rmax = math.inf, -math.inf
    for k in steps:
        for which in ("phi", "psi"):
            ratios = norm_ratios(state, k, which)
            if ratios.size:
                rmin = min(rmin, float(ratios.min()))
                rmax = max(rmax, float(ratios.max()))
    if rmin is math.inf:
        rmin = rmax = 1.0
    measured = max(rmax / hi, lo / rmin)
    return one_sided("concentration", measured, 1.0, n=state.n, h=h, min_ratio=rmin, max_ratio=rmax)


def optimism_holds(state, slack: float = 0.0) -> bool:
    """Whether the q-averaged planned value plus ``slack`` covers the optimal value."""
    from cmdp_lab.planner import optimal_values

    inst = state.instance
    v_star = float(inst.q @ optimal_values(inst))
    v_opt = float(inst.q @ state.opt_values)
    return v_opt + slack >= v_star - ONE_SIDED_TOL


def run_checks(state, delta: float) -> dict[str, CheckReport]:
    """Every run-dependent check that applies to the snapshot's model."""
    reports = {"mle": check_mle_guarantee(state, delta), "concentration": check_concentration_event(state)}
    if state.instance.model_kind is ModelKind.MODEL_I:
        reports["coverage_transition"] = check_pointwise_coverage_model1(state, "transition")
        reports["coverage_reward"] = check_pointwise_coverage_model1(state, "reward")
    else:
        reports["lsr"] = check_lsr_guarantee(state, delta)
    return reports


def summarize(reports: Sequence[CheckReport]) -> str:
    lines = [f"{'check':<28}{'measured':>14}{'bound':>14}  status"]
    for rep in reports:
        status = "PASS" if rep.passed else "FAIL"
        lines.append(f"{rep.name:<28}{rep.measured:>14.6g}{rep.bound:>14.6g}  {status}")
    return "\n".join(lines)
