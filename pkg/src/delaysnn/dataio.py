"""Tensor files, datasets, the synthetic timing task and checkpoints.

Tensor file layout (all little-endian)::

    b"RFT1" | ndim: u32 | dims: ndim x u32 | payload: prod(dims) x float32

Labels use the same codec as whole-valued floats.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, _coerce, parse_key_values
from .errors import DatasetError, StateError, TensorFormatError
from .network import BatchNormState, Layer, NetState
from .rewire import SparseLayerState

MAGIC = b"RFT1"
_U32 = struct.Struct("<I")


def encode_tensor(tensor) -> bytes:
    arr = np.asarray(tensor)
    if any(n > 0xFFFFFFFF for n in arr.shape):
        raise TensorFormatError(f"dimension too large for u32: {arr.shape}")
    head = MAGIC + _U32.pack(arr.ndim) + b"".join(_U32.pack(n) for n in arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", offset=0)
    if len(buf) < 8:
        raise TensorFormatError("truncated header: missing ndim", offset=4)
    (ndim,) = _U32.unpack_from(buf, 4)
    dims_end = 8 + 4 * ndim
    if len(buf) < dims_end:
        raise TensorFormatError(f"truncated header: ndim={ndim} needs {dims_end} header bytes, "
                                f"file has {len(buf)}", offset=len(buf))
    dims = [_U32.unpack_from(buf, 8 + 4 * i)[0] for i in range(ndim)]
    need = 4 * math.prod(dims)
    have = len(buf) - dims_end
    if need > have:
        raise TensorFormatError(f"truncated payload: dims {dims} need {need} bytes, found {have}",
                                offset=len(buf))
    if need < have:
        raise TensorFormatError(f"trailing data: dims {dims} need {need} payload bytes, "
                                f"found {have}", offset=dims_end + need)
    return np.frombuffer(buf, dtype="<f4", offset=dims_end).reshape(dims).astype(np.float32)


def save_tensor(path, tensor) -> None:
    Path(path).write_bytes(encode_tensor(tensor))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


@dataclass
class Dataset:
    features: np.ndarray  # [N, T, C]
    labels: np.ndarray    # [N] int64
    n_classes: int
    provenance: str = ""

    def __post_init__(self):
        if self.features.ndim != 3:
            raise DatasetError(f"features must be [N, T, C], got shape {self.features.shape}")
        if len(self.labels) != len(self.features):
            raise DatasetError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if len(self.labels) < 1:
            raise DatasetError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise DatasetError(f"labels must lie in [0, {self.n_classes})")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def t_steps(self) -> int:
        return self.features.shape[1]

    @property
    def n_channels(self) -> int:
        return self.features.shape[2]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.n_classes, self.provenance)


def labels_from_floats(values) -> np.ndarray:
    values = np.asarray(values)
    if values.ndim != 1:
        raise DatasetError(f"labels must be 1-D, got shape {values.shape}")
    if not np.all(np.isfinite(values)) or np.any(values != np.round(values)):
        raise DatasetError("labels must be whole numbers")
    if np.any(values < 0):
        raise DatasetError("labels must be non-negative")
    return values.astype(np.int64)


def load_dataset(features_path, labels_path, n_classes: int | None = None) -> Dataset:
    for p in (features_path, labels_path):
        if not Path(p).is_file():
            raise DatasetError(f"no such file: {p}")
    feats = load_tensor(features_path)
    if feats.ndim != 3:
        raise DatasetError(f"{features_path}: features must have 3 dims [N, T, C], got {feats.ndim}")
    labels = labels_from_floats(load_tensor(labels_path))
    if len(labels) != feats.shape[0]:
        raise DatasetError(f"{labels_path}: {len(labels)} labels for {feats.shape[0]} samples")
    k = int(labels.max()) + 1 if n_classes is None else n_classes
    return Dataset(feats, labels, k, provenance=f"{features_path},{labels_path}")


def save_dataset(ds: Dataset, features_path, labels_path) -> None:
    save_tensor(features_path, ds.features)
    save_tensor(labels_path, ds.labels.astype(np.float32))


def split_dataset(ds: Dataset, test_fraction: float, seed: int):
    """Seeded shuffle split into (train, test)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    order = rng.permutation(ds.n_samples)
    n_test = min(max(1, int(round(test_fraction * ds.n_samples))), ds.n_samples - 1)
    if n_test < 1:
        raise DatasetError("need at least 2 samples to split into train and test")
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


@dataclass
class SyntheticSpec:
    n_classes: int = 4
    pulses_per_class: int = 6
    channels: int = 16
    timesteps: int = 40
    jitter: float = 1.0
    noise_std: float = 0.1
    samples_per_class: int = 100
    seed: int = 0
    onset_span: int = 0  # pulses start in [0, onset_span); 0 means the whole sequence

    @classmethod
    def from_text(cls, text: str, source: str = "<synthetic>") -> "SyntheticSpec":
        values = parse_key_values(text, source)
        types = {f: t for f, t in cls.__annotations__.items()}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise DatasetError(f"{source}: unknown synthetic-spec key {key!r}")
            kwargs[key] = _coerce(raw, types[key], key, source)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "SyntheticSpec":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise DatasetError(f"cannot read synthetic spec {path}: {exc.strerror}") from exc
        return cls.from_text(text, str(path))

    def to_text(self) -> str:
        return "".join(f"{k} = {getattr(self, k)!r}\n" for k in self.__annotations__)


@dataclass
class Template:
    channels: np.ndarray  # [P]
    times: np.ndarray     # [P]


def make_templates(spec: SyntheticSpec, rng: np.random.Generator):
    """One template per class. All classes share a channel set; only timing differs."""
    span = spec.onset_span or spec.timesteps
    if spec.pulses_per_class > spec.channels:
        raise DatasetError(f"{spec.pulses_per_class} pulses need at least as many channels, "
                           f"have {spec.channels}")
    if span > spec.timesteps or span < 2:
        raise DatasetError(f"timesteps={spec.timesteps} too small for onset span {span}")
    if spec.n_classes < 1 or spec.pulses_per_class < 1:
        raise DatasetError("need at least one class and one pulse")
    channels = np.sort(rng.choice(spec.channels, size=spec.pulses_per_class, replace=False))
    templates, seen = [], set()
    while len(templates) < spec.n_classes:
        times = rng.integers(0, span, size=spec.pulses_per_class)
        key = tuple(times)
        if key in seen:
            continue
        seen.add(key)
        templates.append(Template(channels=channels.copy(), times=times))
    return templates


def render_templates(templates, spec: SyntheticSpec, rng: np.random.Generator) -> Dataset:
    k = len(templates)
    n = k * spec.samples_per_class
    feats = np.zeros((n, spec.timesteps, spec.channels))
    labels = np.repeat(np.arange(k), spec.samples_per_class)
    for row, label in enumerate(labels):
        tpl = templates[label]
        if spec.noise_std > 0:
            feats[row] += rng.normal(0.0, spec.noise_std, size=feats[row].shape)
        times = tpl.times
        if spec.jitter > 0:
            times = times + np.rint(rng.normal(0.0, spec.jitter, size=times.shape)).astype(int)
        times = np.clip(times, 0, spec.timesteps - 1)
        np.add.at(feats[row], (times, tpl.channels), 1.0)
    order = rng.permutation(n)
    return Dataset(feats[order].astype(np.float32), labels[order], k,
                   provenance=f"synthetic(seed={spec.seed})")


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    if spec.channels < 1 or spec.timesteps < 1:
        raise DatasetError("channels and timesteps must be >= 1")
    rng = np.random.default_rng(spec.seed)
    return render_templates(make_templates(spec, rng), spec, rng)


# -- checkpoints -------------------------------------------------------------

_LAYER_ARRAYS = ("theta", "sign", "delay")
_BN_ARRAYS = ("gamma", "beta", "running_mean", "running_var")


def save_checkpoint(net: NetState, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in _BN_ARRAYS:
        save_tensor(directory / f"bn_{name}.rft", getattr(net.bn, name))
    for idx, layer in enumerate(net.layers, 1):
        save_tensor(directory / f"l{idx}_theta.rft", layer.theta)
        save_tensor(directory / f"l{idx}_sign.rft", layer.sign)
        save_tensor(directory / f"l{idx}_delay.rft", layer.delay)
    lines = [net.config.to_text(), f"epoch = {net.epoch}\n", f"sigma = {net.sigma!r}\n"]
    for idx, layer in enumerate(net.layers, 1):
        lines.append(f"l{idx}_target_active = {layer.sparse.target_active}\n")
    for key, value in {**net.meta, **(extra or {})}.items():
        lines.append(f"meta_{key} = {value}\n")
    (directory / "manifest.txt").write_text("".join(lines))
    return directory


def load_checkpoint(directory) -> NetState:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.is_file():
        raise StateError(f"no checkpoint manifest at {manifest}")
    values = parse_key_values(manifest.read_text(), str(manifest))
    try:
        epoch = int(values.pop("epoch"))
        sigma = float(values.pop("sigma"))
        targets = [int(values.pop(f"l{i}_target_active")) for i in (1, 2)]
    except KeyError as exc:
        raise StateError(f"{manifest}: missing key {exc.args[0]}") from None
    meta = {k[5:]: values.pop(k) for k in list(values) if k.startswith("meta_")}
    config = RunConfig.from_mapping(values, str(manifest))
    dtype = np.dtype(config.dtype)

    def arr(name):
        path = directory / f"{name}.rft"
        if not path.is_file():
            raise StateError(f"checkpoint is missing {path.name}")
        return load_tensor(path).astype(dtype)

    bn = BatchNormState(**{name: arr(f"bn_{name}") for name in _BN_ARRAYS})
    layers = []
    expected = [(config.n_hidden, config.n_in), (config.n_out, config.n_hidden)]
    for idx, (shape, target) in enumerate(zip(expected, targets), 1):
        theta, sign, delay = (arr(f"l{idx}_{name}") for name in _LAYER_ARRAYS)
        if theta.shape != shape or sign.shape != shape or delay.shape != shape:
            raise StateError(f"layer {idx} arrays do not match configured shape {shape}")
        layers.append(Layer(SparseLayerState(theta=theta, sign=sign, target_active=target), delay))
    if bn.gamma.shape != (config.n_in,):
        raise StateError("batch-norm arrays do not match n_in")
    return NetState(config=config, bn=bn, layers=layers, sigma=sigma, epoch=epoch, meta=meta)
