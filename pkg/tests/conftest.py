import numpy as np
import pytest
import torch

from protoparts import benchmark as bm
from protoparts.config import ModelConfig
from protoparts.training import initialize


def tiny_model(seed: int = 0, num_classes: int = 3, per_class: int = 2,
               depth: int = 4, side: int = 8, grid: int = 2):
    cfg = ModelConfig(num_classes=num_classes, prototypes_per_class=per_class,
                      backbone_id="simple-cnn", input_side=side,
                      latent_depth=depth, grid_w=grid, grid_h=grid)
    return initialize(cfg, seed)


def random_bank(rng: np.random.Generator, num_classes: int, per_class: int,
                depth: int):
    """(tensors, class_of) pair drawn uniform in [0, 1]."""
    tensors = rng.uniform(0.0, 1.0, (num_classes * per_class, depth))
    class_of = np.arange(num_classes * per_class) // per_class
    return tensors, class_of


@pytest.fixture(scope="session")
def toy_cache_root():
    root = bm.default_cache_root()
    root.mkdir(parents=True, exist_ok=True)
    return root


@pytest.fixture(scope="session")
def toy_records(toy_cache_root):
    """All 15 cached benchmark runs, keyed by regime."""
    return bm.toy_suite(toy_cache_root)


@pytest.fixture(scope="session")
def toy_data(toy_cache_root):
    """(TrainingData, test entries, manifest) of the shared toy dataset."""
    manifest_path = bm.toy_dataset(toy_cache_root)
    return bm.toy_training_data(manifest_path)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
