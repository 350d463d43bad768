"""Sign-constrained sparse connectivity with dormancy and regrowth.

Weights are parametrized as ``w = sign * max(theta, 0)``: the sign matrix is
drawn once and never changes, and a connection with ``theta <= 0`` is
dormant. Gradient descent (with L1 pressure) drops connections; regrowth
either picks the dormant connections with the largest straight-through
gradients (``rigl``) or samples them uniformly (``random``).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, GrowthExhaustedError

log = logging.getLogger(__name__)

MODES = ("rigl", "random", "fixed", "dense")
EPS_GROW = 1e-6


@dataclass(frozen=True)
class SparsityPlan:
    p: float = 0.0
    mode: str = "dense"
    cadence: int = 1  # epochs between rewiring events
    rigl_flip_sign: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown sparsity mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 <= self.p < 1.0:
            raise ConfigError(f"sparsity p must lie in [0, 1), got {self.p}")
        if self.cadence < 1:
            raise ConfigError("rewiring cadence must be >= 1")

    @property
    def rewires(self) -> bool:
        return self.mode in ("rigl", "random")

    def layer_p(self, n_pre: int, n_post: int) -> float:
        if self.mode == "dense":
            return 0.0
        return er_sparsity(self.p, n_pre, n_post)

    def layer_target(self, n_pre: int, n_post: int) -> int:
        return target_active(self.layer_p(n_pre, n_post), n_pre, n_post)


@dataclass
class SparseLayerState:
    theta: np.ndarray  # [n_post, n_pre]
    sign: np.ndarray   # +-1, fixed after init
    target_active: int

    @property
    def active(self) -> np.ndarray:
        return self.theta > 0

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.theta > 0))


def effective_weights(state: SparseLayerState) -> np.ndarray:
    return state.sign * np.maximum(state.theta, 0)


def er_sparsity(p: float, n_pre: int, n_post: int) -> float:
    """Erdos-Renyi layer sparsity: larger layers are pruned harder."""
    if n_pre < 1 or n_post < 1:
        raise ConfigError("layer sizes must be >= 1")
    return max(0.0, p * (1.0 - (n_pre + n_post) / (n_pre * n_post)))


def target_active(layer_p: float, n_pre: int, n_post: int) -> int:
    return int(round((1.0 - layer_p) * n_pre * n_post))


def rigl_grow(candidate_grads, k: int) -> np.ndarray:
    """Positions of the ``k`` largest (signed) values; ties go to the lower index."""
    g = np.asarray(candidate_grads).ravel()
    if k > g.size:
        raise GrowthExhaustedError(f"cannot grow {k} connections from a pool of {g.size}")
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(-g, kind="stable")
    return order[:k]


def random_grow(dormant_indices, k: int, rng: np.random.Generator) -> np.ndarray:
    pool = np.asarray(dormant_indices, dtype=np.int64).ravel()
    if k > pool.size:
        raise GrowthExhaustedError(f"cannot grow {k} connections from a pool of {pool.size}")
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    return rng.choice(pool, size=k, replace=False)


def dale_signs(n_pre: int, n_post: int, rng: np.random.Generator, dale: bool) -> np.ndarray:
    """Sign matrix ``[n_post, n_pre]``; under Dale every column is constant."""
    if dale:
        s = rng.choice(np.array([-1.0, 1.0]), size=n_pre)
        return np.broadcast_to(s, (n_post, n_pre)).copy()
    return rng.choice(np.array([-1.0, 1.0]), size=(n_post, n_pre))


def init_layer(n_pre: int, n_post: int, plan: SparsityPlan, dale: bool,
               rng: np.random.Generator, dtype=np.float64) -> SparseLayerState:
    """Random sign matrix plus a uniformly chosen active subset.

    Active magnitudes are |N(0, 2/n_pre)|; dormant entries start at 0. The
    same random draws are consumed whatever the mode, so a dense plan and a
    fixed plan with p = 0 initialize identically.
    """
    sign = dale_signs(n_pre, n_post, rng, dale).astype(dtype)
    magnitude = np.abs(rng.normal(0.0, np.sqrt(2.0 / n_pre), size=(n_post, n_pre)))
    order = rng.permutation(n_pre * n_post)
    target = plan.layer_target(n_pre, n_post)
    mask = np.zeros(n_pre * n_post, dtype=bool)
    mask[order[:target]] = True
    theta = np.where(mask.reshape(n_post, n_pre), magnitude, 0.0).astype(dtype)
    return SparseLayerState(theta=theta, sign=sign, target_active=target)


def rewire_step(state: SparseLayerState, plan: SparsityPlan, candidate_grads=None,
                delays=None, t_d_max: int = 25, rng: np.random.Generator | None = None):
    """Restore the layer's active count to its target.

    ``candidate_grads`` holds straight-through gradients ``sign * dL/dw`` for
    every entry (only dormant ones are consulted). Newly grown connections get
    ``theta = EPS_GROW`` and, if ``delays`` is given, a fresh uniform delay
    (written in place). Returns ``(new_state, grown_flat_indices)``.
    """
    none = np.empty(0, dtype=np.int64)
    if not plan.rewires:
        return state, none

    theta = state.theta.copy()
    flat = theta.reshape(-1)
    active = flat > 0
    excess = int(active.sum()) - state.target_active
    if excess > 0:
        # Regrowth never overshoots, so this only triggers on states built by hand.
        idx = np.flatnonzero(active)
        drop = idx[np.argsort(flat[idx], kind="stable")[:excess]]
        flat[drop] = 0
        active[drop] = False

    deficit = state.target_active - int(active.sum())
    if deficit <= 0:
        return replace(state, theta=theta), none

    dormant = np.flatnonzero(~active)
    if deficit > dormant.size:
        log.warning("growth pool exhausted: need %d, only %d dormant", deficit, dormant.size)
        deficit = dormant.size

    if plan.mode == "rigl":
        if candidate_grads is None:
            raise ValueError("rigl regrowth needs candidate gradients")
        cand = np.asarray(candidate_grads).reshape(-1)[dormant]
        if plan.rigl_flip_sign:
            cand = -cand
        grown = dormant[rigl_grow(cand, deficit)]
    else:
        if rng is None:
            raise ValueError("random regrowth needs a generator")
        grown = random_grow(dormant, deficit, rng)

    flat[grown] = EPS_GROW
    if delays is not None:
        if rng is None:
            raise ValueError("resampling delays needs a generator")
        delays.reshape(-1)[grown] = rng.uniform(0.0, t_d_max, size=grown.size)
    return replace(state, theta=theta), grown
