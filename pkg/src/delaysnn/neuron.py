"""Discrete-time leaky integrate-and-fire dynamics.

Arrays are laid out ``[..., T, n]``: any number of leading batch axes, then
time, then neurons. The update is

    u[t] = (1 - 1/tau) * u_post[t-1] + I[t-1]

with ``u_post[-1] = 0`` and ``I[-1] = 0``, so ``u[0]`` is always zero and a
current injected at step ``t`` first shows up in the potential at ``t + 1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericInputError


@dataclass(frozen=True)
class LifParams:
    tau: float = 10.05
    theta: float = 1.0
    reset_value: float = 0.0
    surrogate_scale: float = 1.0

    def __post_init__(self):
        if not self.tau > 1.0:
            raise ConfigError(f"tau must be > 1, got {self.tau}")
        if not self.theta > 0.0:
            raise ConfigError(f"theta must be > 0, got {self.theta}")
        if not self.surrogate_scale > 0.0:
            raise ConfigError(f"surrogate_scale must be > 0, got {self.surrogate_scale}")
        if self.reset_value != 0.0:
            raise ConfigError("reset_value is fixed at 0.0")

    @property
    def decay(self) -> float:
        return 1.0 - 1.0 / self.tau


@dataclass
class LayerTrace:
    u_seq: np.ndarray  # pre-reset potentials
    s_seq: np.ndarray
    i_seq: np.ndarray


def surrogate_grad(v, scale: float = 1.0):
    """Arctan-shaped pseudo-derivative of the Heaviside step at margin ``v``."""
    v = np.asarray(v)
    return 1.0 / (1.0 + (np.pi * scale * v) ** 2)


def lif_forward(i_seq, params: LifParams, spiking: bool = True) -> LayerTrace:
    """Integrate ``i_seq`` through a layer of LIF neurons.

    With ``spiking=False`` the layer is a plain leaky integrator (used for the
    voltage readout): no spikes, no reset.
    """
    i_seq = np.asarray(i_seq)
    if i_seq.ndim < 2:
        raise NumericInputError("current sequence must have shape [..., T, n]")
    if not np.all(np.isfinite(i_seq)):
        raise NumericInputError("input current contains non-finite values")

    dtype = i_seq.dtype if np.issubdtype(i_seq.dtype, np.floating) else np.dtype(np.float64)
    i_seq = i_seq.astype(dtype, copy=False)
    T = i_seq.shape[-2]
    alpha = np.asarray(params.decay, dtype=dtype)
    theta = np.asarray(params.theta, dtype=dtype)

    u_seq = np.zeros_like(i_seq)
    s_seq = np.zeros_like(i_seq)
    u_post = np.zeros(i_seq.shape[:-2] + i_seq.shape[-1:], dtype=dtype)
    for t in range(1, T):
        u = alpha * u_post + i_seq[..., t - 1, :]
        u_seq[..., t, :] = u
        if spiking:
            s = (u >= theta).astype(dtype)
            s_seq[..., t, :] = s
            u_post = u * (1 - s)
        else:
            u_post = u
    return LayerTrace(u_seq=u_seq, s_seq=s_seq, i_seq=i_seq)


def lif_backward(trace: LayerTrace, params: LifParams, grad_u=None, grad_s=None,
                 surrogate: bool = True):
    """Backpropagate through the recurrence of :func:`lif_forward`.

    ``grad_u`` and ``grad_s`` are the direct loss gradients w.r.t. the
    pre-reset potentials and the spikes. The reset multiplication is treated
    as a constant, and with ``surrogate=False`` the spike path is dropped
    entirely (the exact derivative when the spike raster is held fixed).
    Returns the gradient w.r.t. the input current sequence.
    """
    u_seq, s_seq = trace.u_seq, trace.s_seq
    T = u_seq.shape[-2]
    alpha = np.asarray(params.decay, dtype=u_seq.dtype)

    direct = np.zeros_like(u_seq) if grad_u is None else np.array(grad_u, dtype=u_seq.dtype)
    if grad_s is not None and surrogate:
        direct = direct + grad_s * surrogate_grad(u_seq - params.theta, params.surrogate_scale)

    grad_i = np.zeros_like(u_seq)
    carry = np.zeros(u_seq.shape[:-2] + u_seq.shape[-1:], dtype=u_seq.dtype)
    for t in range(T - 1, 0, -1):
        g_u = direct[..., t, :] + (1 - s_seq[..., t, :]) * carry
        grad_i[..., t - 1, :] = g_u
        carry = alpha * g_u
    return grad_i
