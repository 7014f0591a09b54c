"""Covariance accumulators, exploration bonuses, and their parameter schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from cmdp_lab.errors import ConfigError, DimMismatch, MissingN


class CovarianceAccumulator:
    """Raw Gram matrix ``sum x x^T``; the ridge term is added per query."""

    def __init__(self, dim: int):
        self.dim = int(dim)
        self.gram = np.zeros((self.dim, self.dim))
        self.count = 0

    def update(self, x) -> None:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise DimMismatch(f"expected a vector of length {self.dim}, got shape {x.shape}")
        self.gram += np.outer(x, x)
        self.count += 1

    def regularized(self, lam: float) -> np.ndarray:
        return self.gram + lam * np.eye(self.dim)

    def quad_form_inv(self, x, lam: float):
        """``x^T (gram + lam I)^{-1} x``; ``x`` may carry leading batch axes."""
        if lam <= 0:
            raise ValueError("regularizer must be positive")
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise DimMismatch(f"expected trailing dimension {self.dim}, got {x.shape}")
        flat = x.reshape(-1, self.dim)
        factor = cho_factor(self.regularized(lam), lower=True)
        solved = cho_solve(factor, flat.T).T
        out = np.einsum("nk,nk->n", flat, solved).reshape(x.shape[:-1])
        # guard against tiny negative rounding
        out = np.maximum(out, 0.0)
        return float(out) if out.ndim == 0 else out


def update(acc: CovarianceAccumulator, x) -> None:
    acc.update(x)


def quad_form_inv(acc: CovarianceAccumulator, x, lambda_n: float):
    return acc.quad_form_inv(x, lambda_n)


@dataclass(frozen=True)
class BonusParams:
    """Constants entering the regularizer and bonus schedules.

    ``class_sizes`` is ``|Psi_1|`` for Model I or ``(|Psi_2|, |Psi_3|)`` for Model II.
    ``C`` is only used by Model II.
    """

    horizon: int
    feat_dim: int
    num_actions: int
    class_sizes: int | tuple[int, int]
    delta: float = 0.1
    gamma1: float = 1.0
    gamma2: float = 1.0
    planned_episodes: int | None = None
    C: float = 1.0
    bonus_scale: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        for name in ("gamma1", "gamma2", "C"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.bonus_scale < 0:
            raise ConfigError("bonus_scale must be non-negative")
        if min(self.horizon, self.feat_dim, self.num_actions) < 1:
            raise ConfigError("horizon, feat_dim and num_actions must be positive")
        if self.planned_episodes is not None and self.planned_episodes < 1:
            raise ConfigError("planned_episodes must be >= 1")

    @property
    def transition_class_size(self) -> int:
        cs = self.class_sizes
        return int(cs[0]) if isinstance(cs, (tuple, list)) else int(cs)

    @property
    def reward_class_size(self) -> int:
        cs = self.class_sizes
        return int(cs[1]) if isinstance(cs, (tuple, list)) else int(cs)


class Schedule(NamedTuple):
    lambda_n: float
    xi_n: float
    alpha: float
    beta: float


def _log_term(params: BonusParams, n: int) -> float:
    if n < 1:
        raise ValueError("episode index n must be >= 1")
    return math.log(2 * n * params.horizon / params.delta)


def schedule_model1(params: BonusParams, n: int) -> Schedule:
    """Regularizers and bonus multipliers for the varying-representation agent."""
    d, H = params.feat_dim, params.horizon
    log_n = _log_term(params, n)
    lam = params.gamma1 * d * log_n
    xi = params.gamma2 * d * log_n
    class_log = math.log(2 * n * H * params.transition_class_size / params.delta)
    alpha = 5 * H * math.sqrt(2 * lam * d + 4 * class_log) * params.bonus_scale
    beta = math.sqrt(d * xi) * params.bonus_scale
    return Schedule(lam, xi, alpha, beta)


def schedule_model2(params: BonusParams, n: int) -> Schedule:
    """Regularizers and (constant in ``n``) squared-norm bonus multipliers."""
    if params.planned_episodes is None:
        raise MissingN("planned_episodes must be set for the varying-weights agent")
    d, H, K, N = params.feat_dim, params.horizon, params.num_actions, params.planned_episodes
    log_n = _log_term(params, n)
    lam = params.gamma1 * d * log_n
    xi = params.gamma2 * d * log_n
    beta = 25.0 / (2.0 * math.sqrt(K)) * params.C * math.sqrt(d * N) * params.bonus_scale
    return Schedule(lam, xi, H * beta, beta)


def reachability_constant(p_min: float, p_max: float, variant: str = "sqrt") -> float:
    """``sqrt(p_max / p_min)`` by default; ``variant="ratio"`` drops the root."""
    if p_min <= 0:
        raise ValueError("p_min must be positive")
    ratio = p_max / p_min
    if variant == "sqrt":
        return math.sqrt(ratio)
    if variant == "ratio":
        return ratio
    raise ValueError(f"unknown variant {variant!r}")


def bonus_model1_transition(phi, acc: CovarianceAccumulator, alpha_n: float, lambda_n: float, H: float):
    return np.minimum(alpha_n * np.sqrt(acc.quad_form_inv(phi, lambda_n)), H)


def bonus_model1_reward(psi, acc: CovarianceAccumulator, beta_n: float, xi_n: float):
    return np.minimum(beta_n * np.sqrt(acc.quad_form_inv(psi, xi_n)), 1.0)


def bonus_model2_transition(phi, acc: CovarianceAccumulator, alpha_tilde: float, lambda_n: float, H: float):
    return np.minimum(alpha_tilde * acc.quad_form_inv(phi, lambda_n), H)


def bonus_model2_reward(psi, acc: CovarianceAccumulator, beta_tilde: float, xi_n: float):
    return np.minimum(beta_tilde * acc.quad_form_inv(psi, xi_n), 1.0)
