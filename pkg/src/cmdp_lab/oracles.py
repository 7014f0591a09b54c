"""Estimation primitives: ridge reward fit, finite-class MLE and least squares.

Feature and weight tables follow the layouts in :mod:`cmdp_lab.model`, sliced
at a single step ``h``. Model I transition features at one step have shape
``(S, A, W, d)`` and candidate weights ``(M, S, d)``; Model II features are
``(S, A, d)`` and candidates ``(M, S, W, d)``. The functions tell the two
apart by the feature rank.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from cmdp_lab.errors import AllModelsImpossible

LOG_FLOOR = 1e-300


class Record(NamedTuple):
    s: int
    a: int
    s_next: int
    r: float
    w: int


@dataclass
class ReplayBuffer:
    """Per-step datasets ``D_h`` in insertion order."""

    horizon: int
    data: list[list[Record]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.data:
            self.data = [[] for _ in range(self.horizon)]

    def append(self, h: int, record: Record) -> None:
        self.data[h].append(Record(*record))

    def records(self, h: int) -> list[Record]:
        return self.data[h]

    def counts(self) -> list[int]:
        return [len(d) for d in self.data]

    def arrays(self, h: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        recs = self.data[h]
        if not recs:
            empty = np.zeros(0, dtype=int)
            return empty, empty, empty, np.zeros(0), empty
        s, a, t, r, w = zip(*recs)
        return (np.array(s), np.array(a), np.array(t), np.array(r, dtype=float), np.array(w))


def _as_arrays(records: Sequence[Record] | Iterable[Record]):
    recs = list(records)
    if not recs:
        return None
    s, a, t, r, w = (np.array(col) for col in zip(*recs))
    return s.astype(int), a.astype(int), t.astype(int), r.astype(float), w.astype(int)


def clip_reward(raw):
    """Clip to ``[0, 1]``; floats in, floats out, arrays elementwise."""
    if np.ndim(raw) == 0:
        return float(min(max(raw, 0.0), 1.0))
    return np.clip(raw, 0.0, 1.0)


def _gather(table: np.ndarray, s, a, w) -> np.ndarray:
    # step-h feature table with or without a context axis
    if table.ndim == 4:
        return table[s, a, w]
    return table[s, a]


def ridge_solve(gram: np.ndarray, target: np.ndarray, xi: float) -> np.ndarray:
    """``(gram + xi I)^{-1} target`` through a Cholesky factorization."""
    d = gram.shape[0]
    factor = cho_factor(gram + xi * np.eye(d), lower=True)
    return cho_solve(factor, target)


def ridge_reward_fit(records: Sequence[Record], psi_h: np.ndarray, xi_n: float) -> np.ndarray:
    """Regularized least-squares reward weights from one step's dataset."""
    if xi_n <= 0:
        raise ValueError("xi_n must be positive")
    d = psi_h.shape[-1]
    cols = _as_arrays(records)
    if cols is None:
        return np.zeros(d)
    s, a, _, r, w = cols
    X = _gather(psi_h, s, a, w)
    return ridge_solve(X.T @ X, X.T @ r, xi_n)


def transition_probs(phi_h: np.ndarray, mu_candidates_h: np.ndarray, s, a, t, w) -> np.ndarray:
    """Probability each candidate assigns to observed transitions, shape ``(M, n)``."""
    x = _gather(phi_h, s, a, w)
    if phi_h.ndim == 4:
        weights = mu_candidates_h[:, t, :]
    else:
        weights = mu_candidates_h[:, t, w, :]
    return np.einsum("nk,mnk->mn", x, weights)


def log_likelihoods(records: Sequence[Record], phi_h: np.ndarray, mu_candidates_h: np.ndarray) -> np.ndarray:
    """Total log-likelihood per candidate; ``-inf`` when any record is impossible."""
    cols = _as_arrays(records)
    if cols is None:
        return np.zeros(mu_candidates_h.shape[0])
    s, a, t, _, w = cols
    return _log_scores(transition_probs(phi_h, mu_candidates_h, s, a, t, w))


def _log_scores(probs: np.ndarray) -> np.ndarray:
    impossible = np.any(probs <= LOG_FLOOR, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = np.log(np.maximum(probs, LOG_FLOOR)).sum(axis=1)
    scores[impossible] = -np.inf
    return scores


def _argmax_score(scores: np.ndarray) -> int:
    if np.all(np.isneginf(scores)):
        raise AllModelsImpossible("every candidate assigns zero probability to the data")
    return int(np.argmax(scores))


def mle_transition_fit(records: Sequence[Record], phi_h: np.ndarray, mu_candidates_h: np.ndarray) -> int:
    """Index of the maximum-likelihood candidate (lowest index on ties)."""
    return _argmax_score(log_likelihoods(records, phi_h, mu_candidates_h))


def reward_predictions(psi_h: np.ndarray, eta_candidates_h: np.ndarray, s, a, w) -> np.ndarray:
    """Predicted rewards per candidate, shape ``(M, n)``."""
    x = _gather(psi_h, s, a, w)
    if eta_candidates_h.ndim == 2:
        return eta_candidates_h @ x.T
    return np.einsum("nk,mnk->mn", x, eta_candidates_h[:, w, :])


def squared_residuals(records: Sequence[Record], psi_h: np.ndarray, eta_candidates_h: np.ndarray) -> np.ndarray:
    cols = _as_arrays(records)
    if cols is None:
        return np.zeros(eta_candidates_h.shape[0])
    s, a, _, r, w = cols
    pred = reward_predictions(psi_h, eta_candidates_h, s, a, w)
    return ((pred - r[None, :]) ** 2).sum(axis=1)


def lsr_reward_fit(records: Sequence[Record], psi_h: np.ndarray, eta_candidates_h: np.ndarray) -> int:
    """Index of the least-squares candidate (lowest index on ties)."""
    return int(np.argmin(squared_residuals(records, psi_h, eta_candidates_h)))


class LikelihoodTracker:
    """Running per-candidate log-likelihood for one step; same answer as :func:`mle_transition_fit`."""

    def __init__(self, phi_h: np.ndarray, mu_candidates_h: np.ndarray):
        self.phi_h = phi_h
        self.candidates = mu_candidates_h
        self.scores = np.zeros(mu_candidates_h.shape[0])

    def add(self, record: Record) -> None:
        s, a, t, _, w = record
        probs = transition_probs(self.phi_h, self.candidates, np.array([s]), np.array([a]),
                                 np.array([t]), np.array([w]))
        self.scores = self.scores + _log_scores(probs)

    def best(self) -> int:
        return _argmax_score(self.scores)


class ResidualTracker:
    """Running per-candidate squared residual for one step."""

    def __init__(self, psi_h: np.ndarray, eta_candidates_h: np.ndarray):
        self.psi_h = psi_h
        self.candidates = eta_candidates_h
        self.totals = np.zeros(eta_candidates_h.shape[0])

    def add(self, record: Record) -> None:
        s, a, _, r, w = record
        pred = reward_predictions(self.psi_h, self.candidates, np.array([s]), np.array([a]), np.array([w]))
        self.totals = self.totals + (pred[:, 0] - r) ** 2

    def best(self) -> int:
        return int(np.argmin(self.totals))
