"""BPTT training of the delayed two-layer SNN with a hand-written backward pass.

Forward pipeline for a batch ``x`` of shape ``[B, T, C]``::

    batch norm -> delayed current (layer 1) -> spiking LIF -> dropout
               -> delayed current (layer 2) -> leaky readout -> time mean/max
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import dcls
from .config import RunConfig
from .dataio import Dataset, save_checkpoint
from .errors import DatasetError, DimensionError, StateError
from .network import NetState, init_net, rng_streams
from .neuron import lif_backward, lif_forward
from .rewire import rewire_step

log = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
ONECYCLE_DIV = 25.0
ONECYCLE_FINAL_DIV = 1e4


# -- layers -------------------------------------------------------------------

def batchnorm_forward(x, bn, training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Per-channel normalization over batch and time. Returns ``(y, cache)``.

    Running statistics are updated in place in training mode.
    """
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] == 0:
        raise DimensionError(f"batch norm expects a non-empty [B, T, n] tensor, got {x.shape}")
    if x.shape[-1] != bn.gamma.shape[0]:
        raise DimensionError(f"batch norm has {bn.gamma.shape[0]} channels, input has {x.shape[-1]}")
    if training:
        mean = x.mean(axis=(0, 1))
        var = x.var(axis=(0, 1))
        n = x.shape[0] * x.shape[1]
        unbiased = var * (n / (n - 1)) if n > 1 else var
        bn.running_mean[...] = (1 - momentum) * bn.running_mean + momentum * mean
        bn.running_var[...] = (1 - momentum) * bn.running_var + momentum * unbiased
    else:
        mean, var = bn.running_mean, bn.running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean) * inv_std
    return bn.gamma * x_hat + bn.beta, x_hat


def batchnorm_param_grads(grad_y, x_hat):
    return np.sum(grad_y * x_hat, axis=(0, 1)), np.sum(grad_y, axis=(0, 1))


def dropout_forward(s, p: float, training: bool, rng: np.random.Generator | None = None):
    """Inverted dropout. Returns ``(out, scale_mask)``; the mask is reused in backward."""
    if not training or p == 0.0:
        return s, None
    keep = rng.random(s.shape) >= p
    mask = keep.astype(s.dtype) / s.dtype.type(1.0 - p)
    return s * mask, mask


# -- forward / loss / backward ------------------------------------------------

@dataclass
class ForwardCache:
    training: bool
    x_hat: np.ndarray
    y: np.ndarray
    bank1: dcls.DelayKernelBank
    trace1: object
    drop_mask: np.ndarray | None
    z: np.ndarray
    bank2: dcls.DelayKernelBank
    trace2: object
    logits: np.ndarray
    readout_idx: np.ndarray | None = None


def forward_pass(batch, net: NetState, training: bool, rng: np.random.Generator | None = None,
                 round_delays: bool = False, hidden_spikes=None):
    """Run the network. Returns ``(logits [B, n_out], cache)``.

    ``hidden_spikes`` replaces the hidden raster with a fixed one; used to
    check gradients with the spike pattern frozen.
    """
    cfg = net.config
    x = np.asarray(batch, dtype=net.dtype)
    if x.ndim != 3 or x.shape[2] != cfg.n_in:
        raise DimensionError(f"expected batch [B, T, {cfg.n_in}], got {x.shape}")
    if x.shape[0] == 0:
        raise DimensionError("empty batch")

    y, x_hat = batchnorm_forward(x, net.bn, training)
    l1, l2 = net.layers
    bank1 = dcls.build_kernels(l1.weights(), l1.delay_params(cfg.t_d_max, net.sigma, round_delays))
    trace1 = lif_forward(dcls.synaptic_current(y, bank1), cfg.lif, spiking=True)
    spikes = trace1.s_seq if hidden_spikes is None else np.asarray(hidden_spikes, dtype=net.dtype)
    z, mask = dropout_forward(spikes, cfg.dropout_p, training, rng)
    bank2 = dcls.build_kernels(l2.weights(), l2.delay_params(cfg.t_d_max, net.sigma, round_delays))
    trace2 = lif_forward(dcls.synaptic_current(z, bank2), cfg.lif, spiking=False)

    readout_idx = None
    if cfg.readout == "mean":
        logits = trace2.u_seq.mean(axis=1)
    else:
        readout_idx = trace2.u_seq.argmax(axis=1)
        logits = np.take_along_axis(trace2.u_seq, readout_idx[:, None, :], axis=1)[:, 0, :]
    cache = ForwardCache(training, x_hat, y, bank1, trace1, mask, z, bank2, trace2, logits,
                         readout_idx)
    return logits, cache


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels) -> float:
    labels = np.asarray(labels)
    n_out = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_out):
        raise DatasetError(f"labels must lie in [0, {n_out})")
    logp = _log_softmax(logits.astype(np.float64))
    return float(-logp[np.arange(len(labels)), labels].mean())


def l1_penalty(net: NetState) -> float:
    return float(sum(np.maximum(layer.theta, 0).astype(np.float64).sum() for layer in net.layers))


def loss(logits, labels, net: NetState) -> float:
    """Mean cross-entropy plus L1 on the magnitudes of active connections."""
    return cross_entropy(logits, labels) + net.config.l1_strength * l1_penalty(net)


@dataclass
class GradientSet:
    theta: list
    delay: list
    gamma: np.ndarray
    beta: np.ndarray
    weight: list     # dL/dw for every entry, dormant ones included
    candidate: list  # straight-through regrowth scores sign * dL/dw


def backward_pass(cache: ForwardCache, labels, net: NetState, surrogate: bool = True) -> GradientSet:
    """Reverse-mode gradients of :func:`loss`.

    With ``surrogate=False`` nothing flows through the spike nonlinearity,
    which is the exact gradient when the hidden raster is held fixed.
    """
    if cache is None or not cache.training:
        raise StateError("backward_pass needs the cache of a training-mode forward pass")
    cfg = net.config
    logits = cache.logits
    B, n_out = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= n_out:
        raise DatasetError(f"labels must lie in [0, {n_out})")
    T = cache.trace2.u_seq.shape[1]

    probs = np.exp(_log_softmax(logits))
    probs[np.arange(B), labels] -= 1.0
    g_logits = (probs / B).astype(logits.dtype)

    g_u2 = np.zeros_like(cache.trace2.u_seq)
    if cfg.readout == "mean":
        g_u2[...] = g_logits[:, None, :] / T
    else:
        np.put_along_axis(g_u2, cache.readout_idx[:, None, :], g_logits[:, None, :], axis=1)

    g_i2 = lif_backward(cache.trace2, cfg.lif, grad_u=g_u2)
    g_k2, g_z = dcls.synaptic_current_backward(g_i2, cache.z, cache.bank2)
    g_w2, g_d2 = dcls.kernel_param_grads(g_k2, cache.bank2)

    g_s1 = g_z if cache.drop_mask is None else g_z * cache.drop_mask
    g_i1 = lif_backward(cache.trace1, cfg.lif, grad_s=g_s1, surrogate=surrogate)
    g_k1, g_y = dcls.synaptic_current_backward(g_i1, cache.y, cache.bank1)
    g_w1, g_d1 = dcls.kernel_param_grads(g_k1, cache.bank1)
    g_gamma, g_beta = batchnorm_param_grads(g_y, cache.x_hat)

    thetas, candidates = [], []
    for layer, g_w in zip(net.layers, (g_w1, g_w2)):
        active = layer.theta > 0
        straight = layer.sign * g_w
        thetas.append(np.where(active, straight + cfg.l1_strength, 0).astype(layer.theta.dtype))
        candidates.append(straight)
    return GradientSet(theta=thetas, delay=[g_d1, g_d2], gamma=g_gamma, beta=g_beta,
                       weight=[g_w1, g_w2], candidate=candidates)


# -- optimizer and schedules ---------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)

    def reset_entries(self, name: str, flat_idx) -> None:
        """Forget the moments of selected entries (used for regrown synapses)."""
        if name in self.m and len(flat_idx):
            self.m[name].reshape(-1)[flat_idx] = 0
            self.v[name].reshape(-1)[flat_idx] = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              betas=ADAM_BETAS, eps: float = ADAM_EPS):
    """Bias-corrected Adam update applied in place to every array in ``params``."""
    b1, b2 = betas
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.t[name] = 0
        state.t[name] += 1
        t = state.t[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
    return params, state


def schedule_lr(step: int, total_steps: int, cfg: RunConfig):
    """``(lr_w, lr_d)``: OneCycle for weights, cosine annealing to 0 for delays."""
    if total_steps <= 0:
        return cfg.lr_w_peak, cfg.lr_d_initial
    step = min(max(step, 0), total_steps)
    peak = cfg.lr_w_peak
    start, floor = peak / ONECYCLE_DIV, peak / ONECYCLE_FINAL_DIV
    warm = cfg.lr_w_warmup * total_steps
    if warm > 0 and step <= warm:
        lr_w = start + (peak - start) * step / warm
    else:
        frac = (step - warm) / (total_steps - warm) if total_steps > warm else 1.0
        lr_w = floor + (peak - floor) * 0.5 * (1 + math.cos(math.pi * frac))
    lr_d = cfg.lr_d_initial * 0.5 * (1 + math.cos(math.pi * step / total_steps))
    return lr_w, lr_d


# -- evaluation and the training loop --------------------------------------------

def predict(net: NetState, features, batch_size: int = 256, round_delays: bool | None = None):
    if round_delays is None:
        round_delays = net.config.round_delays
    features = np.asarray(features)
    if len(features) == 0:
        raise DatasetError("cannot evaluate an empty dataset")
    out = []
    for start in range(0, len(features), batch_size):
        logits, _ = forward_pass(features[start:start + batch_size], net, training=False,
                                 round_delays=round_delays)
        out.append(logits.argmax(axis=1))
    return np.concatenate(out)


def evaluate(net: NetState, ds: Dataset, batch_size: int = 256, round_delays: bool | None = None) -> float:
    pred = predict(net, ds.features, batch_size, round_delays)
    return float(np.mean(pred == ds.labels))


METRIC_FIELDS = ("epoch", "train_loss", "test_acc", "active_synapses_l1", "active_synapses_l2", "sigma")

Observer = Callable[[str, NetState, dict], None]


def train(train_ds: Dataset, test_ds: Dataset, config: RunConfig, checkpoint_dir=None,
          observer: Observer | None = None):
    """Train from a fresh initialization. Returns ``(net, metrics)``.

    ``metrics`` holds one dict per epoch with the keys in ``METRIC_FIELDS``.
    ``observer(event, net, info)`` is called after every optimizer step
    (``"step"``), rewiring event (``"rewire"``) and epoch (``"epoch"``).
    """
    for ds in (train_ds, test_ds):
        if ds.t_steps != config.t_steps or ds.n_channels != config.n_in:
            raise DatasetError(f"dataset is [T={ds.t_steps}, C={ds.n_channels}], config expects "
                               f"[T={config.t_steps}, C={config.n_in}]")
        if ds.labels.max() >= config.n_out:
            raise DatasetError(f"dataset has label {ds.labels.max()} but n_out={config.n_out}")

    rngs = rng_streams(config.seed)
    net = init_net(config, rngs["init"])
    plan = config.sparsity
    adam = AdamState()
    metrics = []
    n_batches = math.ceil(train_ds.n_samples / config.batch_size)
    total_steps = config.epochs * n_batches
    step = 0
    features = train_ds.features.astype(net.dtype)

    for epoch in range(config.epochs):
        net.sigma = dcls.anneal_sigma(epoch, config.sigma_schedule, config.epochs)
        order = rngs["shuffle"].permutation(train_ds.n_samples)
        accum = [np.zeros_like(layer.theta) for layer in net.layers] if plan.mode == "rigl" else None
        losses = []
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            labels = train_ds.labels[idx]
            logits, cache = forward_pass(features[idx], net, training=True, rng=rngs["dropout"])
            losses.append(loss(logits, labels, net))
            grads = backward_pass(cache, labels, net)
            if accum is not None:
                for acc, cand in zip(accum, grads.candidate):
                    acc += cand

            lr_w, lr_d = schedule_lr(step, total_steps, config)
            weight_params = {"bn_gamma": net.bn.gamma, "bn_beta": net.bn.beta}
            weight_grads = {"bn_gamma": grads.gamma, "bn_beta": grads.beta}
            for i, layer in enumerate(net.layers, 1):
                weight_params[f"l{i}_theta"] = layer.sparse.theta
                weight_grads[f"l{i}_theta"] = grads.theta[i - 1]
            adam_step(weight_params, weight_grads, adam, lr_w)
            if config.learn_delays:
                delay_params = {f"l{i}_delay": layer.delay for i, layer in enumerate(net.layers, 1)}
                delay_grads = {f"l{i}_delay": g for i, g in enumerate(grads.delay, 1)}
                adam_step(delay_params, delay_grads, adam, lr_d)
                for layer in net.layers:
                    np.clip(layer.delay, 0, config.t_d_max, out=layer.delay)
            step += 1
            if observer is not None:
                observer("step", net, {"epoch": epoch, "step": step})

        if plan.rewires and (epoch + 1) % plan.cadence == 0:
            for i, layer in enumerate(net.layers, 1):
                cand = accum[i - 1] if accum is not None else None
                layer.sparse, grown = rewire_step(layer.sparse, plan, cand, delays=layer.delay,
                                                  t_d_max=config.t_d_max, rng=rngs["rewire"])
                adam.reset_entries(f"l{i}_theta", grown)
                adam.reset_entries(f"l{i}_delay", grown)
            if observer is not None:
                observer("rewire", net, {"epoch": epoch})

        acc = evaluate(net, test_ds, round_delays=config.round_delays)
        counts = net.active_counts()
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "test_acc": acc,
               "active_synapses_l1": counts[0], "active_synapses_l2": counts[1],
               "sigma": float(net.sigma)}
        metrics.append(row)
        net.epoch = epoch + 1
        log.info("epoch %d loss %.4f acc %.4f sigma %.3f active %s", epoch, row["train_loss"],
                 acc, net.sigma, counts)
        if observer is not None:
            observer("epoch", net, row)
        if checkpoint_dir is not None:
            save_checkpoint(net, checkpoint_dir)
    return net, metrics


def format_metrics(metrics) -> str:
    lines = [",".join(METRIC_FIELDS)]
    for row in metrics:
        lines.append(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k])
                              for k in METRIC_FIELDS))
    return "\n".join(lines) + "\n"
