import numpy as np
import pytest

from delaysnn.config import RunConfig
from delaysnn.dataio import SyntheticSpec, gen_synthetic, split_dataset
from delaysnn.network import init_net


def tiny_config(**overrides) -> RunConfig:
    base = dict(n_in=3, n_hidden=4, n_out=2, t_steps=10, dropout_p=0.0, l1_strength=0.1,
                dtype="float64", t_d_max=5, sigma_start=2.0, sigma_final=0.5, epochs=1,
                batch_size=4, seed=3)
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture
def tiny_net():
    return init_net(tiny_config())


@pytest.fixture
def tiny_batch():
    rng = np.random.default_rng(11)
    x = rng.normal(0.0, 1.0, size=(4, 10, 3))
    labels = np.array([0, 1, 1, 0])
    return x, labels


@pytest.fixture(scope="session")
def small_task():
    """A quick synthetic split for end-to-end plumbing tests."""
    spec = SyntheticSpec(n_classes=3, pulses_per_class=4, channels=6, timesteps=16,
                         jitter=0.5, noise_std=0.05, samples_per_class=20, onset_span=8, seed=5)
    ds = gen_synthetic(spec)
    return spec, ds, split_dataset(ds, 0.2, 0)


def small_config(**overrides) -> RunConfig:
    base = dict(n_in=6, n_hidden=8, n_out=3, t_steps=16, t_d_max=6, epochs=3, batch_size=16,
                l1_strength=0.0, seed=0)
    base.update(overrides)
    return RunConfig(**base)
