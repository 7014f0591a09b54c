"""The two learning loops: varying representation (Model I) and varying weights (Model II)."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from cmdp_lab.bonuses import (
    BonusParams,
    CovarianceAccumulator,
    Schedule,
    schedule_model1,
    schedule_model2,
)
from cmdp_lab.errors import ConfigError
from cmdp_lab.model import (
    Dims,
    InstanceSpec,
    ModelClass,
    ModelKind,
    compute_pmin_pmax,
    reward_table,
    sample_context,
    sample_episode,
    transition_table,
)
from cmdp_lab.oracles import (
    LikelihoodTracker,
    Record,
    ReplayBuffer,
    ResidualTracker,
    clip_reward,
    ridge_solve,
)
from cmdp_lab.planner import avg_subopt_gap, optimal_values, plan_all_contexts

REWARD_BOUND_TOL = 1e-12


@dataclass(frozen=True)
class AgentConfig:
    model_kind: ModelKind
    params: BonusParams
    planned_episodes: int
    seed: int = 0
    oracle_mode: bool = False
    diagnostics_every: int = 0

    def __post_init__(self) -> None:
        if self.planned_episodes < 1:
            raise ConfigError("planned_episodes must be >= 1")
        if self.diagnostics_every < 0:
            raise ConfigError("diagnostics_every must be >= 0")


@dataclass
class EpisodeLog:
    episode: int
    context: int
    gap: float
    transition_indices: tuple[int, ...]
    reward_indices: tuple[int, ...]
    mean_tbonus: float
    mean_rbonus: float
    traj_length: int
    env_steps: int
    optimistic_value: float
    optimal_value: float
    slack: float
    mle_correct: bool
    flags: dict[str, bool] = field(default_factory=dict)


@dataclass
class RunLog:
    model_kind: ModelKind
    seed: int
    episodes: list[EpisodeLog] = field(default_factory=list)
    buffer_counts: list[int] = field(default_factory=list)
    env_steps: int = 0
    transitions: int = 0

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def gaps(self) -> np.ndarray:
        return np.array([e.gap for e in self.episodes])

    @property
    def avg_gaps(self) -> np.ndarray:
        g = self.gaps
        return np.cumsum(g) / np.arange(1, g.size + 1)

    @property
    def contexts(self) -> np.ndarray:
        return np.array([e.context for e in self.episodes])


@dataclass
class RunState:
    """Frozen view of an agent at the start of episode ``n`` (after estimation).

    Passed to callbacks; diagnostics read it but never mutate it.
    """

    n: int
    instance: InstanceSpec
    transition_class: ModelClass
    reward_class: ModelClass | None
    schedule: Schedule | None
    transition_indices: np.ndarray
    eta_hat: np.ndarray
    P_hat: np.ndarray
    r_opt: np.ndarray
    f_hat: np.ndarray
    tbonus: np.ndarray
    rbonus: np.ndarray
    opt_values: np.ndarray
    policies: np.ndarray
    past_policies: list[np.ndarray]
    past_contexts: list[int]
    buffer: ReplayBuffer
    sigma: list[CovarianceAccumulator]
    lam: list[CovarianceAccumulator]


def random_policy(dims: Dims, rng: np.random.Generator) -> np.ndarray:
    """Uniform i.i.d. action for every ``(w, h, s)``."""
    return rng.integers(dims.num_actions, size=(dims.num_contexts, dims.horizon, dims.num_states))


def model2_slack(params: BonusParams, n: int) -> float:
    """Additive term by which the varying-weights optimistic value may undershoot ``V*``."""
    if params.planned_episodes is None:
        return 0.0
    H, d, K, N, C = params.horizon, params.feat_dim, params.num_actions, params.planned_episodes, params.C
    log_n = math.log(2 * n * H / params.delta)
    lam = params.gamma1 * d * log_n
    xi = params.gamma2 * d * log_n
    zeta = math.log(2 * params.transition_class_size * n * H / params.delta)
    zeta_r = math.log(2 * params.reward_class_size * n * H / params.delta)
    coef = H * H * math.sqrt(K) / (2 * C * math.sqrt(d * N))
    return coef * (2 * xi * d + C * C * zeta_r + 2 * lam * d + 4 * C * C * zeta)


class _Agent:
    kind: ModelKind

    def __init__(self, instance: InstanceSpec, transition_class: ModelClass,
                 reward_class: ModelClass | None, config: AgentConfig):
        if instance.model_kind is not self.kind:
            raise ConfigError(f"agent expects a {self.kind.value} instance")
        self.instance = instance
        self.tclass = transition_class
        self.rclass = reward_class
        self.config = config
        self.params = config.params
        dims = instance.dims
        self.H = dims.horizon
        self.d = dims.feat_dim
        self.rng = np.random.default_rng(config.seed)
        self.buffer = ReplayBuffer(self.H)
        self.sigma = [CovarianceAccumulator(self.d) for _ in range(self.H)]
        self.lam = [CovarianceAccumulator(self.d) for _ in range(self.H)]
        self.phi_full = instance.phi_full()
        self.psi_full = instance.psi_full()
        self.mle = [LikelihoodTracker(self._phi_step(h), self.tclass.candidates[:, h]) for h in range(self.H)]
        self.v_star = optimal_values(instance)
        self.past_policies: list[np.ndarray] = []
        self.past_contexts: list[int] = []
        self.log = RunLog(self.kind, config.seed)

    # hooks -------------------------------------------------------------
    def _phi_step(self, h: int) -> np.ndarray:
        return self.instance.features.phi[h]

    def _schedule(self, n: int) -> Schedule:
        raise NotImplementedError

    def _reward_estimate(self, sched: Schedule) -> tuple[np.ndarray, np.ndarray, tuple[int, ...]]:
        raise NotImplementedError

    def _bonuses(self, sched: Schedule) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def _collect(self, w: int, policies: np.ndarray) -> tuple[list[tuple[int, int]], int, int]:
        raise NotImplementedError

    # main loop ---------------------------------------------------------
    def run(self, callback: Callable[[RunState], dict | None] | None = None) -> RunLog:
        N = self.config.planned_episodes
        dims = self.instance.dims
        for n in range(1, N + 1):
            w = sample_context(self.instance.context_space, self.rng)
            state = None
            if n == 1:
                policies = random_policy(dims, self.rng)
                t_idx = tuple([0] * self.H)
                r_idx: tuple[int, ...] = ()
                opt_value = math.nan
                tb = rb = None
            else:
                state = self._estimate(n)
                policies = state.policies
                t_idx = tuple(int(i) for i in state.transition_indices)
                r_idx = self._last_reward_indices
                opt_value = float(self.instance.q @ state.opt_values)
                tb, rb = state.tbonus, state.rbonus
            flags = {}
            if callback is not None and state is not None:
                flags = callback(state) or {}
            gap = avg_subopt_gap(self.instance, policies, self.v_star)
            visited, steps, moves = self._collect(w, policies)
            if tb is not None and visited:
                mean_tb = float(np.mean([tb[w, h, s, a] for h, s, a in visited]))
                mean_rb = float(np.mean([rb[w, h, s, a] for h, s, a in visited]))
            else:
                mean_tb = mean_rb = 0.0
            self.past_policies.append(policies)
            self.past_contexts.append(w)
            self.log.env_steps += steps
            self.log.transitions += moves
            self.log.episodes.append(EpisodeLog(
                episode=n,
                context=w,
                gap=gap,
                transition_indices=t_idx,
                reward_indices=r_idx,
                mean_tbonus=mean_tb,
                mean_rbonus=mean_rb,
                traj_length=self.H,
                env_steps=steps,
                optimistic_value=opt_value,
                optimal_value=float(self.instance.q @ self.v_star),
                slack=self._slack(n),
                mle_correct=all(i == self.tclass.true_index for i in t_idx) if n > 1 else False,
                flags=dict(flags),
            ))
        self.log.buffer_counts = self.buffer.counts()
        return self.log

    def _slack(self, n: int) -> float:
        return 0.0

    def _estimate(self, n: int) -> RunState:
        inst = self.instance
        kind = self.kind
        if self.config.oracle_mode:
            sched = None
            t_idx = np.full(self.H, self.tclass.true_index)
            mu_hat = inst.weights.mu
            f_hat = clip_reward(inst.r)
            self._last_reward_indices = tuple([self.rclass.true_index] * self.H) if self.rclass else ()
            eta_hat = inst.weights.eta
            tbonus = np.zeros_like(f_hat)
            rbonus = np.zeros_like(f_hat)
        else:
            sched = self._schedule(n)
            t_idx = np.array([tracker.best() for tracker in self.mle])
            mu_hat = self.tclass.candidates[t_idx, np.arange(self.H)]
            eta_hat, f_hat, self._last_reward_indices = self._reward_estimate(sched)
            tbonus, rbonus = self._bonuses(sched)
        P_hat = transition_table(kind, inst.features.phi, mu_hat)
        r_opt = f_hat + tbonus + rbonus
        if r_opt.min() < -REWARD_BOUND_TOL or r_opt.max() > 2 + self.H + REWARD_BOUND_TOL:
            raise AssertionError("optimistic reward left [0, H + 2]")
        policies, values = plan_all_contexts(P_hat, r_opt, self.H, 3 * self.H, check=False)
        return RunState(
            n=n,
            instance=inst,
            transition_class=self.tclass,
            reward_class=self.rclass,
            schedule=sched,
            transition_indices=t_idx,
            eta_hat=eta_hat,
            P_hat=P_hat,
            r_opt=r_opt,
            f_hat=f_hat,
            tbonus=tbonus,
            rbonus=rbonus,
            opt_values=values[:, 0, inst.initial_state],
            policies=policies,
            past_policies=list(self.past_policies),
            past_contexts=list(self.past_contexts),
            buffer=self.buffer,
            sigma=self.sigma,
            lam=self.lam,
        )


class VaryingRepresentationAgent(_Agent):
    """Ridge reward fit, MLE over one transition class, norm bonuses, one trajectory per episode."""

    kind = ModelKind.MODEL_I

    def __init__(self, instance, transition_class, config):
        super().__init__(instance, transition_class, None, config)
        self.reward_moment = np.zeros((self.H, self.d))

    def _schedule(self, n: int) -> Schedule:
        return schedule_model1(self.params, n)

    def _reward_estimate(self, sched):
        eta_hat = np.stack([
            ridge_solve(self.lam[h].gram, self.reward_moment[h], sched.xi_n) for h in range(self.H)
        ])
        raw = reward_table(self.kind, self.instance.features.psi, eta_hat)
        return eta_hat, clip_reward(raw), ()

    def _bonuses(self, sched):
        H = self.H
        tb = np.stack([
            np.minimum(sched.alpha * np.sqrt(self.sigma[h].quad_form_inv(self.phi_full[h], sched.lambda_n)), H)
            for h in range(H)
        ])
        rb = np.stack([
            np.minimum(sched.beta * np.sqrt(self.lam[h].quad_form_inv(self.psi_full[h], sched.xi_n)), 1.0)
            for h in range(H)
        ])
        # (H, S, A, W) -> (W, H, S, A)
        return np.moveaxis(tb, 3, 0), np.moveaxis(rb, 3, 0)

    def _collect(self, w, policies):
        traj = sample_episode(self.instance, w, policies[w], self.rng)
        visited = []
        for h, (s, a, r, s_next) in enumerate(traj.steps):
            rec = Record(s, a, s_next, r, w)
            self.buffer.append(h, rec)
            self.mle[h].add(rec)
            phi = self.phi_full[h, s, a, w]
            psi = self.psi_full[h, s, a, w]
            self.sigma[h].update(phi)
            self.lam[h].update(psi)
            self.reward_moment[h] += psi * r
            visited.append((h, s, a))
        return visited, len(traj) + 1, len(traj)


class VaryingWeightsAgent(_Agent):
    """MLE and least squares over finite classes, squared-norm bonuses, uniform-action roll-ins."""

    kind = ModelKind.MODEL_II

    def __init__(self, instance, transition_class, reward_class, config):
        if config.params.planned_episodes is None:
            params = _with_planned(config.params, config.planned_episodes)
            config = AgentConfig(config.model_kind, params, config.planned_episodes, config.seed,
                                 config.oracle_mode, config.diagnostics_every)
        super().__init__(instance, transition_class, reward_class, config)
        self.lsr = [ResidualTracker(instance.features.psi[h], reward_class.candidates[:, h]) for h in range(self.H)]
        p_min, _ = compute_pmin_pmax(instance)
        if p_min <= 0:
            warnings.warn("p_min = 0: reachability assumption fails on this instance", RuntimeWarning)

    def _schedule(self, n: int) -> Schedule:
        return schedule_model2(self.params, n)

    def _slack(self, n: int) -> float:
        return model2_slack(self.params, n) if n > 1 else 0.0

    def _reward_estimate(self, sched):
        r_idx = np.array([tracker.best() for tracker in self.lsr])
        eta_hat = self.rclass.candidates[r_idx, np.arange(self.H)]
        raw = reward_table(self.kind, self.instance.features.psi, eta_hat)
        return eta_hat, clip_reward(raw), tuple(int(i) for i in r_idx)

    def _bonuses(self, sched):
        H, W = self.H, self.instance.dims.num_contexts
        phi = self.instance.features.phi
        psi = self.instance.features.psi
        tb = np.stack([
            np.minimum(sched.alpha * self.sigma[h].quad_form_inv(phi[h], sched.lambda_n), H) for h in range(H)
        ])
        rb = np.stack([
            np.minimum(sched.beta * self.lam[h].quad_form_inv(psi[h], sched.xi_n), 1.0) for h in range(H)
        ])
        shape = (W,) + tb.shape
        return np.broadcast_to(tb, shape).copy(), np.broadcast_to(rb, shape).copy()

    def _collect(self, w, policies):
        inst = self.instance
        pol = policies[w]
        K = inst.dims.num_actions
        visited = []
        observed = 0
        moves = 0
        for h in range(self.H):
            s = inst.initial_state
            observed += 1
            for k in range(h):
                s = inst.next_state(w, k, s, int(pol[k, s]), self.rng)
                observed += 1
                moves += 1
            a = int(self.rng.integers(K))
            s_next = inst.next_state(w, h, s, a, self.rng)
            observed += 1
            moves += 1
            rec = Record(s, a, s_next, float(inst.r[w, h, s, a]), w)
            self.buffer.append(h, rec)
            self.mle[h].add(rec)
            self.lsr[h].add(rec)
            self.sigma[h].update(inst.features.phi[h, s, a])
            self.lam[h].update(inst.features.psi[h, s, a])
            visited.append((h, s, a))
        # observed states: every roll-in for step h shows s_1 .. s_{h+1}
        return visited, observed, moves


def _with_planned(params: BonusParams, N: int) -> BonusParams:
    from dataclasses import replace

    return replace(params, planned_episodes=N)


def run_algorithm1(instance: InstanceSpec, model_class: ModelClass, config: AgentConfig,
                   callback: Callable[[RunState], dict | None] | None = None) -> RunLog:
    """Varying-representation loop for ``config.planned_episodes`` episodes."""
    log = VaryingRepresentationAgent(instance, model_class, config).run(callback)
    _check_counts(log, config.planned_episodes, instance.dims.horizon, per_step=1)
    return log


def run_algorithm2(instance: InstanceSpec, transition_class: ModelClass, reward_class: ModelClass,
                   config: AgentConfig, callback: Callable[[RunState], dict | None] | None = None) -> RunLog:
    """Varying-weights loop; every episode performs one uniform-action roll-in per step."""
    log = VaryingWeightsAgent(instance, transition_class, reward_class, config).run(callback)
    _check_counts(log, config.planned_episodes, instance.dims.horizon, per_step=1)
    H = instance.dims.horizon
    N = config.planned_episodes
    if log.env_steps != N * (H * (H + 1) // 2 + H):
        raise AssertionError(f"environment step count {log.env_steps} != N (H(H+1)/2 + H)")
    if log.transitions != N * H * (H + 1) // 2:
        raise AssertionError("transition count mismatch")
    return log


def _check_counts(log: RunLog, N: int, H: int, per_step: int) -> None:
    if len(log) != N:
        raise AssertionError("run log length differs from planned episodes")
    if log.buffer_counts != [N * per_step] * H:
        raise AssertionError(f"dataset sizes {log.buffer_counts} != {N}")
