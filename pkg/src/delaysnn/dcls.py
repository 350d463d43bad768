"""Learnable synaptic delays as normalized Gaussian convolution kernels.

Every synapse (i, j) owns a kernel of length ``T_d + 1``

    k[i, j, n] = w_ij * g_n / sum_m g_m,   g_n = exp(-0.5 * ((n - T_d + d_ij + 1) / sigma)^2)

and kernel index ``n = T_d`` lines up with the current timestep, so a spike
at ``t`` reaches the postsynaptic current at ``t + T_d - n``. The Gaussian
peak sits at ``n = T_d - d - 1``, i.e. an effective lag of ``d + 1`` steps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, KernelDegenerateError


@dataclass
class DelayParams:
    d: np.ndarray  # [n_post, n_pre], continuous, in timesteps
    t_d_max: int = 25
    sigma: float = 12.5

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")


@dataclass
class DelayKernelBank:
    """Materialized kernels plus the normalized profile needed for gradients."""

    k: np.ndarray        # [n_post, n_pre, T_d + 1]
    profile: np.ndarray  # g / c, same shape; sums to 1 over the last axis
    dlog: np.ndarray     # d(log g_n)/dd, same shape
    w: np.ndarray        # [n_post, n_pre]

    @property
    def t_d_max(self) -> int:
        return self.k.shape[-1] - 1


def _taps(t_d_max: int, dtype) -> np.ndarray:
    return np.arange(t_d_max + 1, dtype=dtype)


def build_kernels(w, dp: DelayParams) -> DelayKernelBank:
    w = np.asarray(w)
    d = np.asarray(dp.d)
    if w.shape != d.shape or w.ndim != 2:
        raise DimensionError(f"weight shape {w.shape} does not match delay shape {d.shape}")
    dtype = np.result_type(w.dtype, d.dtype, np.float32)
    sigma = dtype.type(dp.sigma)
    t_d = dp.t_d_max

    z = (_taps(t_d, dtype) - t_d + d[..., None].astype(dtype) + 1) / sigma
    expo = -0.5 * z * z
    # Shifting by the per-synapse maximum keeps the normalizer >= 1, so the
    # profile stays finite even when sigma is tiny and the peak is off-grid.
    expo = expo - expo.max(axis=-1, keepdims=True)
    g = np.exp(expo)
    c = g.sum(axis=-1, keepdims=True)
    if not np.all(np.isfinite(c)) or np.any(c <= 0):
        bad = np.argwhere(~(np.isfinite(c[..., 0]) & (c[..., 0] > 0)))[0]
        raise KernelDegenerateError(
            f"kernel normalizer degenerate for synapse (post={bad[0]}, pre={bad[1]}) "
            f"at sigma={dp.sigma}"
        )
    profile = g / c
    k = w[..., None].astype(dtype) * profile
    return DelayKernelBank(k=k, profile=profile, dlog=-z / sigma, w=w.astype(dtype))


def offgrid_synapses(dp: DelayParams) -> np.ndarray:
    """Indices of synapses whose Gaussian peak falls before kernel index 0."""
    return np.argwhere(np.asarray(dp.d) > dp.t_d_max - 1)


def synaptic_current(s_prev, bank: DelayKernelBank) -> np.ndarray:
    """Causal delayed convolution of presynaptic activity ``[..., T, n_pre]``."""
    s_prev = np.asarray(s_prev)
    n_post, n_pre, taps = bank.k.shape
    if s_prev.ndim < 2 or s_prev.shape[-1] != n_pre:
        raise DimensionError(
            f"presynaptic input has {s_prev.shape[-1] if s_prev.ndim else 0} channels, "
            f"kernel bank expects {n_pre}"
        )
    t_d = taps - 1
    T = s_prev.shape[-2]
    out = np.zeros(s_prev.shape[:-1] + (n_post,), dtype=np.result_type(s_prev, bank.k))
    for m in range(min(taps, T)):
        # lag m uses kernel tap T_d - m
        out[..., m:, :] += s_prev[..., : T - m, :] @ bank.k[:, :, t_d - m].T
    return out


def synaptic_current_backward(grad_out, s_prev, bank: DelayKernelBank, need_input_grad=True):
    """Gradients of :func:`synaptic_current` w.r.t. the kernels and the input.

    Returns ``(grad_k, grad_s)``; ``grad_s`` is None when not requested.
    """
    n_post, n_pre, taps = bank.k.shape
    t_d = taps - 1
    T = s_prev.shape[-2]
    go = grad_out.reshape(-1, T, n_post)
    sp = s_prev.reshape(-1, T, n_pre)
    grad_k = np.zeros_like(bank.k)
    grad_s = np.zeros_like(sp, dtype=np.result_type(sp, bank.k)) if need_input_grad else None
    for m in range(min(taps, T)):
        g_m = go[:, m:, :].reshape(-1, n_post)
        grad_k[:, :, t_d - m] = g_m.T @ sp[:, : T - m, :].reshape(-1, n_pre)
        if need_input_grad:
            grad_s[:, : T - m, :] += go[:, m:, :] @ bank.k[:, :, t_d - m]
    if need_input_grad:
        grad_s = grad_s.reshape(s_prev.shape)
    return grad_k, grad_s


def kernel_param_grads(grad_k, bank: DelayKernelBank):
    """Chain kernel gradients into (weight, delay) gradients.

    The delay derivative includes the dependence of the normalizer on ``d``:
    dk_n/dd = w * p_n * (q_n - sum_m p_m q_m) with p the normalized profile
    and q the log-derivative of the unnormalized Gaussian.
    """
    p, q = bank.profile, bank.dlog
    grad_w = np.sum(grad_k * p, axis=-1)
    mean_q = np.sum(p * q, axis=-1, keepdims=True)
    grad_d = bank.w * np.sum(grad_k * p * (q - mean_q), axis=-1)
    return grad_w, grad_d


@dataclass(frozen=True)
class SigmaSchedule:
    start: float = 12.5
    final: float = 0.5
    knee: float = 0.75  # fraction of epochs after which sigma holds at `final`

    def __post_init__(self):
        if self.final <= 0:
            raise ConfigError(f"sigma_final must be positive, got {self.final}")
        if self.start < self.final:
            raise ConfigError("sigma_start must be >= sigma_final")
        if not 0 <= self.knee <= 1:
            raise ConfigError(f"sigma knee must lie in [0, 1], got {self.knee}")


def anneal_sigma(epoch: int, schedule: SigmaSchedule, epochs: int) -> float:
    """Linear decay from ``start`` to ``final`` by epoch ceil(knee * epochs)."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    knee_epoch = math.ceil(schedule.knee * epochs)
    if epoch == 0:
        return schedule.start
    if epoch >= knee_epoch:
        return schedule.final
    return schedule.start + (schedule.final - schedule.start) * epoch / knee_epoch


def clamp_delays(dp: DelayParams) -> DelayParams:
    return DelayParams(d=np.clip(dp.d, 0, dp.t_d_max), t_d_max=dp.t_d_max, sigma=dp.sigma)


def init_delays(n_post: int, n_pre: int, t_d_max: int, rng: np.random.Generator, dtype=np.float64):
    return rng.uniform(0.0, t_d_max, size=(n_post, n_pre)).astype(dtype)
