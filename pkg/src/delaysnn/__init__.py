"""Spiking networks with learnable delays, dynamic sparsity and receptive-field analysis."""

from .config import RunConfig
from .dataio import Dataset, SyntheticSpec, gen_synthetic, load_dataset, split_dataset
from .network import NetState, init_net
from .trainer import evaluate, train

__all__ = [
    "Dataset",
    "NetState",
    "RunConfig",
    "SyntheticSpec",
    "evaluate",
    "gen_synthetic",
    "init_net",
    "load_dataset",
    "split_dataset",
    "train",
]
__version__ = "0.1.0"
