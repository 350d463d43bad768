"""Parameter containers for the two-layer delayed SNN."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .dcls import DelayParams, init_delays
from .rewire import SparseLayerState, effective_weights, init_layer


@dataclass
class Layer:
    """One feed-forward projection: sparse sign-constrained weights plus delays."""

    sparse: SparseLayerState
    delay: np.ndarray  # [n_post, n_pre]

    @property
    def theta(self) -> np.ndarray:
        return self.sparse.theta

    @property
    def sign(self) -> np.ndarray:
        return self.sparse.sign

    @property
    def shape(self):
        return self.sparse.theta.shape

    def weights(self) -> np.ndarray:
        return effective_weights(self.sparse)

    def delay_params(self, t_d_max: int, sigma: float, round_delays: bool = False) -> DelayParams:
        d = np.rint(self.delay) if round_delays else self.delay
        return DelayParams(d=d, t_d_max=t_d_max, sigma=sigma)


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, n: int, dtype) -> "BatchNormState":
        return cls(gamma=np.ones(n, dtype), beta=np.zeros(n, dtype),
                   running_mean=np.zeros(n, dtype), running_var=np.ones(n, dtype))


@dataclass
class NetState:
    config: RunConfig
    bn: BatchNormState
    layers: list  # [input -> hidden, hidden -> output]
    sigma: float
    epoch: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def active_counts(self):
        return [layer.sparse.n_active for layer in self.layers]


def rng_streams(seed: int):
    """Independent generators for init, shuffling, dropout and rewiring."""
    children = np.random.SeedSequence(seed).spawn(4)
    return {name: np.random.default_rng(s)
            for name, s in zip(("init", "shuffle", "dropout", "rewire"), children)}


def init_net(config: RunConfig, rng: np.random.Generator | None = None) -> NetState:
    if rng is None:
        rng = rng_streams(config.seed)["init"]
    dtype = np.dtype(config.dtype)
    plan = config.sparsity
    sizes = [(config.n_in, config.n_hidden), (config.n_hidden, config.n_out)]
    layers = []
    for n_pre, n_post in sizes:
        sparse = init_layer(n_pre, n_post, plan, config.dale, rng, dtype)
        delay = init_delays(n_post, n_pre, config.t_d_max, rng, dtype)
        layers.append(Layer(sparse=sparse, delay=delay))
    return NetState(config=config, bn=BatchNormState.fresh(config.n_in, dtype),
                    layers=layers, sigma=config.sigma_start)
