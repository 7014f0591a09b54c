"""Linear contextual MDP instances: construction, validation, generation, simulation.

Array layouts (0-based step index ``h``, state ``s``, action ``a``, context ``w``,
next state ``t``, feature coordinate ``k``):

=========  ======================  ======================
table      Model I                 Model II
=========  ======================  ======================
``phi``    ``(H, S, A, W, d)``     ``(H, S, A, d)``
``psi``    ``(H, S, A, W, d)``     ``(H, S, A, d)``
``mu``     ``(H, S, d)``           ``(H, S, W, d)``
``eta``    ``(H, d)``              ``(H, W, d)``
``P``      ``(W, H, S, A, S)``     same
``r``      ``(W, H, S, A)``        same
=========  ======================  ======================
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from cmdp_lab.errors import GenerationFailed, InvalidInstance

PROB_TOL = 1e-9
NORM_TOL = 1e-12
RECON_TOL = 1e-10
NUM_RANDOM_PROBES = 16
PROBE_SEED = 20240611

# Dirichlet concentrations used by the generator.
FEATURE_CONCENTRATION = 0.2
WEIGHT_CONCENTRATION = 1.5
CONTEXT_CONCENTRATION = 2.0

INSTANCE_SCHEMA = "cmdp-lab-instance/1"


class ModelKind(str, Enum):
    MODEL_I = "ModelI"
    MODEL_II = "ModelII"


@dataclass(frozen=True)
class Dims:
    num_states: int
    num_actions: int
    num_contexts: int
    horizon: int
    feat_dim: int

    def __post_init__(self) -> None:
        for name in ("num_states", "num_actions", "num_contexts", "horizon", "feat_dim"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    def as_dict(self) -> dict[str, int]:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "num_contexts": self.num_contexts,
            "horizon": self.horizon,
            "feat_dim": self.feat_dim,
        }


@dataclass(frozen=True)
class ContextSpace:
    """Finite context set ``0..W-1`` with sampling distribution ``q``."""

    q: np.ndarray

    def __post_init__(self) -> None:
        q = np.asarray(self.q, dtype=float)
        if q.ndim != 1 or q.size == 0:
            raise ValueError("q must be a non-empty probability vector")
        if np.any(q < 0) or abs(q.sum() - 1.0) > 1e-12:
            raise ValueError(f"q must be a probability vector, got {q}")
        q = q.copy()
        q.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "_cdf", np.cumsum(q))

    @property
    def contexts(self) -> list[int]:
        return list(range(self.q.size))

    @property
    def size(self) -> int:
        return self.q.size


@dataclass(frozen=True)
class FeatureSpec:
    model_kind: ModelKind
    phi: np.ndarray
    psi: np.ndarray

    def phi_full(self, num_contexts: int) -> np.ndarray:
        """Transition features broadcast to ``(H, S, A, W, d)``."""
        return _broadcast_features(self.model_kind, self.phi, num_contexts)

    def psi_full(self, num_contexts: int) -> np.ndarray:
        return _broadcast_features(self.model_kind, self.psi, num_contexts)


@dataclass(frozen=True)
class WeightSpec:
    mu: np.ndarray
    eta: np.ndarray


@dataclass(frozen=True)
class ModelClass:
    """Finite candidate set for one weight table (``mu`` or ``eta``).

    ``candidates[i]`` has the shape of the corresponding table in
    :class:`WeightSpec`; estimation at step ``h`` reads ``candidates[i][h]``.
    """

    candidates: np.ndarray
    true_index: int
    kind: str = "transition"

    def __post_init__(self) -> None:
        cands = np.array(self.candidates, dtype=float)
        if cands.shape[0] < 1:
            raise ValueError("a model class needs at least one candidate")
        if not 0 <= self.true_index < cands.shape[0]:
            raise ValueError("true_index out of range")
        cands.setflags(write=False)
        object.__setattr__(self, "candidates", cands)

    def __len__(self) -> int:
        return self.candidates.shape[0]

    @property
    def truth(self) -> np.ndarray:
        return self.candidates[self.true_index]


@dataclass(frozen=True)
class InstanceSpec:
    dims: Dims
    context_space: ContextSpace
    features: FeatureSpec
    weights: WeightSpec
    P: np.ndarray
    r: np.ndarray
    initial_state: int = 0
    mix_eps: float = 0.0
    seed: int | None = None
    _cdf: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        cdf = np.cumsum(self.P, axis=-1)
        cdf.setflags(write=False)
        object.__setattr__(self, "_cdf", cdf)

    @property
    def model_kind(self) -> ModelKind:
        return self.features.model_kind

    @property
    def q(self) -> np.ndarray:
        return self.context_space.q

    def phi_full(self) -> np.ndarray:
        return self.features.phi_full(self.dims.num_contexts)

    def psi_full(self) -> np.ndarray:
        return self.features.psi_full(self.dims.num_contexts)

    def next_state(self, w: int, h: int, s: int, a: int, rng: np.random.Generator) -> int:
        cdf = self._cdf[w, h, s, a]
        idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        return min(idx, self.dims.num_states - 1)


@dataclass
class Trajectory:
    context: int
    steps: list[tuple[int, int, float, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)


# ---------------------------------------------------------------------------
# tabular construction
# ---------------------------------------------------------------------------

def _broadcast_features(kind: ModelKind, table: np.ndarray, num_contexts: int) -> np.ndarray:
    if kind is ModelKind.MODEL_I:
        return table
    H, S, A, d = table.shape
    return np.broadcast_to(table[:, :, :, None, :], (H, S, A, num_contexts, d))


def transition_table(kind: ModelKind, phi: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """``P[w, h, s, a, t] = <phi, mu>`` for either model."""
    if ModelKind(kind) is ModelKind.MODEL_I:
        return np.einsum("hsawk,htk->whsat", phi, mu)
    return np.einsum("hsak,htwk->whsat", phi, mu)


def reward_table(kind: ModelKind, psi: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """``r[w, h, s, a] = <psi, eta>`` for either model."""
    if ModelKind(kind) is ModelKind.MODEL_I:
        return np.einsum("hsawk,hk->whsa", psi, eta)
    return np.einsum("hsak,hwk->whsa", psi, eta)


def _expected_shapes(kind: ModelKind, dims: Dims) -> dict[str, tuple[int, ...]]:
    H, S, A, W, d = dims.horizon, dims.num_states, dims.num_actions, dims.num_contexts, dims.feat_dim
    if kind is ModelKind.MODEL_I:
        return {"phi": (H, S, A, W, d), "psi": (H, S, A, W, d), "mu": (H, S, d), "eta": (H, d)}
    return {"phi": (H, S, A, d), "psi": (H, S, A, d), "mu": (H, S, W, d), "eta": (H, W, d)}


def probe_functions(num_states: int) -> np.ndarray:
    """Fixed test functions ``g: S -> [0, 1]`` used for the ``mu`` normalization check."""
    rng = np.random.default_rng(PROBE_SEED)
    rows = [np.ones(num_states), np.zeros(num_states)]
    rows.extend(np.eye(num_states))
    rows.extend(rng.uniform(0.0, 1.0, size=(NUM_RANDOM_PROBES, num_states)))
    return np.array(rows)


def weight_violations(kind: ModelKind, mu: np.ndarray, eta: np.ndarray) -> list[str]:
    """Normalization violations of a weight table pair (empty list if none)."""
    kind = ModelKind(kind)
    problems = []
    d = mu.shape[-1]
    bound = math.sqrt(d)
    eta_norms = np.linalg.norm(eta, axis=-1)
    if np.any(eta_norms > bound + NORM_TOL):
        problems.append(f"||eta|| = {eta_norms.max():.6g} exceeds sqrt(d) = {bound:.6g}")
    g = probe_functions(mu.shape[1])
    if kind is ModelKind.MODEL_I:
        integrals = np.einsum("gt,htk->hgk", g, mu)
    else:
        integrals = np.einsum("gt,htwk->hwgk", g, mu)
    worst = np.linalg.norm(integrals, axis=-1).max()
    if worst > bound + PROB_TOL:
        problems.append(f"||sum_s mu(s) g(s)|| = {worst:.6g} exceeds sqrt(d) = {bound:.6g}")
    return problems


def instance_violations(instance: InstanceSpec) -> list[str]:
    """Every invariant an instance breaks, as human-readable messages."""
    problems = _table_violations(instance.P, instance.r)
    for name, table in (("phi", instance.features.phi), ("psi", instance.features.psi)):
        norms = np.linalg.norm(table, axis=-1)
        if np.any(norms > 1.0 + NORM_TOL):
            problems.append(f"||{name}|| = {norms.max():.6g} exceeds 1")
    problems.extend(weight_violations(instance.model_kind, instance.weights.mu, instance.weights.eta))
    kind = instance.model_kind
    P = transition_table(kind, instance.features.phi, instance.weights.mu)
    r = reward_table(kind, instance.features.psi, instance.weights.eta)
    if np.max(np.abs(P - instance.P)) > RECON_TOL or np.max(np.abs(r - instance.r)) > RECON_TOL:
        problems.append("stored P or r does not match features and weights")
    return problems


def _table_violations(P: np.ndarray, r: np.ndarray) -> list[str]:
    problems = []
    if P.min() < -PROB_TOL:
        problems.append(f"negative transition probability {P.min():.6g}")
    row_err = np.abs(P.sum(axis=-1) - 1.0).max()
    if row_err > PROB_TOL:
        problems.append(f"transition row sums off by {row_err:.6g}")
    if r.min() < -PROB_TOL or r.max() > 1.0 + PROB_TOL:
        problems.append(f"reward outside [0, 1]: range [{r.min():.6g}, {r.max():.6g}]")
    return problems


def build_tabular(
    features: FeatureSpec,
    weights: WeightSpec,
    dims: Dims,
    context_space: ContextSpace,
    *,
    initial_state: int = 0,
    mix_eps: float = 0.0,
    seed: int | None = None,
    validate: bool = True,
) -> InstanceSpec:
    """Assemble the tabular kernel and reward from features and weights.

    Raises :class:`InvalidInstance` when shapes disagree with ``dims`` or when
    ``validate`` is set and any probability, row sum, reward, or normalization
    constraint is broken.
    """
    kind = ModelKind(features.model_kind)
    arrays = {
        "phi": np.array(features.phi, dtype=float),
        "psi": np.array(features.psi, dtype=float),
        "mu": np.array(weights.mu, dtype=float),
        "eta": np.array(weights.eta, dtype=float),
    }
    for name, shape in _expected_shapes(kind, dims).items():
        if arrays[name].shape != shape:
            raise InvalidInstance(f"{name} has shape {arrays[name].shape}, expected {shape}")
    if context_space.size != dims.num_contexts:
        raise InvalidInstance("context distribution length does not match num_contexts")
    if not 0 <= initial_state < dims.num_states:
        raise InvalidInstance("initial_state out of range")
    for arr in arrays.values():
        arr.setflags(write=False)
    P = transition_table(kind, arrays["phi"], arrays["mu"])
    r = reward_table(kind, arrays["psi"], arrays["eta"])
    P.setflags(write=False)
    r.setflags(write=False)
    instance = InstanceSpec(
        dims=dims,
        context_space=context_space,
        features=FeatureSpec(kind, arrays["phi"], arrays["psi"]),
        weights=WeightSpec(arrays["mu"], arrays["eta"]),
        P=P,
        r=r,
        initial_state=int(initial_state),
        mix_eps=float(mix_eps),
        seed=seed,
    )
    if validate:
        problems = instance_violations(instance)
        if problems:
            raise InvalidInstance("; ".join(problems))
    return instance


def model_class_violations(instance: InstanceSpec, model_class: ModelClass) -> list[str]:
    """Check a model class against an instance (truth present, every member valid)."""
    kind = instance.model_kind
    problems = []
    if model_class.kind == "transition":
        if not np.array_equal(model_class.truth, instance.weights.mu):
            problems.append("true transition weights missing from class")
        for i, mu in enumerate(model_class.candidates):
            P = transition_table(kind, instance.features.phi, mu)
            bad = _table_violations(P, np.zeros(1))
            bad += weight_violations(kind, mu, np.zeros(instance.weights.eta.shape))
            problems.extend(f"candidate {i}: {msg}" for msg in bad)
    else:
        if not np.array_equal(model_class.truth, instance.weights.eta):
            problems.append("true reward weights missing from class")
        for i, eta in enumerate(model_class.candidates):
            norms = np.linalg.norm(eta, axis=-1)
            if np.any(norms > math.sqrt(instance.dims.feat_dim) + NORM_TOL):
                problems.append(f"candidate {i}: ||eta|| exceeds sqrt(d)")
    return problems


# ---------------------------------------------------------------------------
# random generation
# ---------------------------------------------------------------------------

def _random_mu(rng: np.random.Generator, kind: ModelKind, dims: Dims, mix_eps: float) -> np.ndarray:
    H, S, W, d = dims.horizon, dims.num_states, dims.num_contexts, dims.feat_dim
    lead = (H, d) if kind is ModelKind.MODEL_I else (H, W, d)
    columns = rng.dirichlet(np.full(S, WEIGHT_CONCENTRATION), size=lead)
    columns = (1.0 - mix_eps) * columns + mix_eps / S
    # (..., d, S) -> (H, S, d) or (H, S, W, d)
    if kind is ModelKind.MODEL_I:
        return np.transpose(columns, (0, 2, 1))
    return np.transpose(columns, (0, 3, 1, 2))


def _random_eta(rng: np.random.Generator, kind: ModelKind, dims: Dims) -> np.ndarray:
    lead = (dims.horizon,) if kind is ModelKind.MODEL_I else (dims.horizon, dims.num_contexts)
    return rng.uniform(0.0, 1.0, size=lead + (dims.feat_dim,))


def _random_features(rng: np.random.Generator, kind: ModelKind, dims: Dims) -> np.ndarray:
    H, S, A, W, d = dims.horizon, dims.num_states, dims.num_actions, dims.num_contexts, dims.feat_dim
    lead = (H, S, A, W) if kind is ModelKind.MODEL_I else (H, S, A)
    return rng.dirichlet(np.full(d, FEATURE_CONCENTRATION), size=lead)


def _fit_rewards(kind: ModelKind, psi: np.ndarray, eta: np.ndarray) -> np.ndarray:
    # Simplex features with eta in [0, 1]^d never leave [0, 1]; the loop is a guard
    # for hand-supplied features.
    for _ in range(100):
        r = reward_table(kind, psi, eta)
        if r.min() >= 0.0 and r.max() <= 1.0:
            return eta
        eta = np.clip(eta, 0.0, None) * 0.9
    raise GenerationFailed("could not rescale reward weights into [0, 1]")


def generate_instance(
    seed: int,
    dims: Dims,
    model_kind: ModelKind | str = ModelKind.MODEL_I,
    class_size: int | tuple[int, int] = 1,
    mix_eps: float = 0.0,
) -> tuple[InstanceSpec, ModelClass | tuple[ModelClass, ModelClass]]:
    """Draw a valid linear CMDP and finite model class(es) containing the truth.

    Features are rows of the probability simplex and each weight column is a
    distribution over next states mixed with the uniform one at rate
    ``mix_eps``, so every kernel is valid by construction. Decoys reuse the
    features. Model I returns one transition class; Model II returns
    ``(transition_class, reward_class)``.
    """
    kind = ModelKind(model_kind)
    if isinstance(class_size, (tuple, list)):
        trans_size, reward_size = int(class_size[0]), int(class_size[1])
    else:
        trans_size = reward_size = int(class_size)
    if trans_size < 1 or reward_size < 1:
        raise ValueError("class_size must be >= 1")
    if not 0.0 <= mix_eps < 1.0:
        raise ValueError("mix_eps must lie in [0, 1)")
    if kind is ModelKind.MODEL_II and mix_eps <= 0.0:
        raise ValueError("Model II needs mix_eps > 0 so that p_min > 0")
    if dims.feat_dim > dims.num_states * dims.num_actions:
        raise ValueError("feat_dim must not exceed num_states * num_actions")

    rng = np.random.default_rng(seed)
    q = rng.dirichlet(np.full(dims.num_contexts, CONTEXT_CONCENTRATION))
    context_space = ContextSpace(q / q.sum())
    for _ in range(100):
        phi = _random_features(rng, kind, dims)
        psi = _random_features(rng, kind, dims)
        mu = _random_mu(rng, kind, dims, mix_eps)
        eta = _fit_rewards(kind, psi, _random_eta(rng, kind, dims))
        try:
            instance = build_tabular(
                FeatureSpec(kind, phi, psi),
                WeightSpec(mu, eta),
                dims,
                context_space,
                mix_eps=mix_eps,
                seed=seed,
            )
            break
        except InvalidInstance:
            continue
    else:
        raise GenerationFailed(f"no valid instance after 100 attempts (seed={seed})")

    trans_class = _make_class(rng, trans_size, instance.weights.mu, "transition",
                              lambda: _random_mu(rng, kind, dims, mix_eps))
    if kind is ModelKind.MODEL_I:
        return instance, trans_class
    reward_class = _make_class(rng, reward_size, instance.weights.eta, "reward",
                               lambda: _fit_rewards(kind, instance.features.psi, _random_eta(rng, kind, dims)))
    return instance, (trans_class, reward_class)


def _make_class(rng, size, truth, kind, draw_decoy) -> ModelClass:
    true_index = int(rng.integers(size))
    members = [draw_decoy() for _ in range(size - 1)]
    members.insert(true_index, np.array(truth))
    return ModelClass(np.stack(members), true_index, kind)


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def sample_context(context_space: ContextSpace, rng: np.random.Generator) -> int:
    cdf = context_space._cdf
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, context_space.size - 1)


def sample_episode(
    instance: InstanceSpec,
    context: int,
    policy: np.ndarray,
    rng: np.random.Generator,
) -> Trajectory:
    """Roll out a deterministic policy for one full episode.

    ``policy`` is either the ``(H, S)`` action table of this context or the
    full ``(W, H, S)`` table.
    """
    policy = np.asarray(policy)
    if policy.ndim == 3:
        policy = policy[context]
    traj = Trajectory(context=int(context))
    s = instance.initial_state
    for h in range(instance.dims.horizon):
        a = int(policy[h, s])
        s_next = instance.next_state(context, h, s, a, rng)
        traj.steps.append((s, a, float(instance.r[context, h, s, a]), s_next))
        s = s_next
    return traj


def compute_pmin_pmax(instance: InstanceSpec) -> tuple[float, float]:
    """Exact min and max over policies of ``Pr(s_h = s)`` for steps ``h >= 2``.

    For each target step the indicator of every state is propagated backwards
    with a max (resp. min) over actions; deterministic Markov policies attain
    both extremes. Returns ``(1.0, 1.0)`` when ``H == 1`` since only the fixed
    initial state is ever observed.
    """
    W, H, S = instance.dims.num_contexts, instance.dims.horizon, instance.dims.num_states
    lo, hi = math.inf, -math.inf
    s1 = instance.initial_state
    for w in range(W):
        for target in range(1, H):
            v_max = np.eye(S)
            v_min = np.eye(S)
            for h in range(target - 1, -1, -1):
                P = instance.P[w, h]
                v_max = np.einsum("sat,tx->sax", P, v_max).max(axis=1)
                v_min = np.einsum("sat,tx->sax", P, v_min).min(axis=1)
            lo = min(lo, float(v_min[s1].min()))
            hi = max(hi, float(v_max[s1].max()))
    if H == 1:
        return 1.0, 1.0
    return max(lo, 0.0), hi


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _pack(arr: np.ndarray) -> dict[str, Any]:
    arr = np.asarray(arr, dtype=float)
    return {"shape": list(arr.shape), "data": arr.ravel(order="C").tolist()}


def _unpack(obj: dict[str, Any]) -> np.ndarray:
    return np.array(obj["data"], dtype=float).reshape(obj["shape"], order="C")


def instance_to_dict(
    instance: InstanceSpec,
    model_classes: ModelClass | Sequence[ModelClass] | None = None,
) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "schema": INSTANCE_SCHEMA,
        "model_kind": instance.model_kind.value,
        "dims": instance.dims.as_dict(),
        "q": instance.q.tolist(),
        "phi": _pack(instance.features.phi),
        "psi": _pack(instance.features.psi),
        "mu": _pack(instance.weights.mu),
        "eta": _pack(instance.weights.eta),
        "mix_eps": instance.mix_eps,
        "seed": instance.seed,
        "initial_state": instance.initial_state,
    }
    if model_classes is not None:
        if isinstance(model_classes, ModelClass):
            model_classes = [model_classes]
        doc["classes"] = {
            mc.kind: {"candidates": _pack(mc.candidates), "true_index": mc.true_index}
            for mc in model_classes
        }
    return doc


def instance_from_dict(
    doc: dict[str, Any], *, validate: bool = True
) -> tuple[InstanceSpec, dict[str, ModelClass]]:
    """Inverse of :func:`instance_to_dict`; returns the instance and any stored classes."""
    try:
        kind = ModelKind(doc["model_kind"])
        dims = Dims(**doc["dims"])
        q = np.array(doc["q"], dtype=float)
        features = FeatureSpec(kind, _unpack(doc["phi"]), _unpack(doc["psi"]))
        weights = WeightSpec(_unpack(doc["mu"]), _unpack(doc["eta"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInstance(f"malformed instance document: {exc}") from exc
    try:
        context_space = ContextSpace(q)
    except ValueError as exc:
        raise InvalidInstance(str(exc)) from exc
    instance = build_tabular(
        features,
        weights,
        dims,
        context_space,
        initial_state=int(doc.get("initial_state", 0)),
        mix_eps=float(doc.get("mix_eps", 0.0)),
        seed=doc.get("seed"),
        validate=validate,
    )
    classes = {
        kind_name: ModelClass(_unpack(entry["candidates"]), int(entry["true_index"]), kind_name)
        for kind_name, entry in doc.get("classes", {}).items()
    }
    return instance, classes


def save_instance(path: str | Path, instance: InstanceSpec, model_classes=None) -> None:
    Path(path).write_text(json.dumps(instance_to_dict(instance, model_classes)))


def load_instance(path: str | Path, *, validate: bool = True) -> tuple[InstanceSpec, dict[str, ModelClass]]:
    return instance_from_dict(json.loads(Path(path).read_text()), validate=validate)
