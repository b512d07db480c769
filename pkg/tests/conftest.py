import numpy as np
import pytest

from fedasync import data, models
from fedasync.core import Hyperparams
from fedasync.models import ModelSpec


@pytest.fixture
def softmax_spec():
    return ModelSpec("softmax-classifier", input_dim=5, num_classes=3)


@pytest.fixture
def blob_split():
    """Small classification problem shared by protocol-level tests."""
    full = data.generate_blobs(3, 5, 100, 1.0, seed=7)
    return data.split_train_eval(full, 0.2)


@pytest.fixture
def hp():
    return Hyperparams(
        eta=0.05, beta=0.7, a=0.5, theta=0.1,
        h_min=1, h_max=3, e_total=10, batch_size=8, seed=42,
    )


def make_sim_config(spec, train, eval_ds, hp, n_clients, policy, **kwargs):
    from fedasync.server import FixedIterations
    from fedasync.sim import SimConfig

    shards = data.partition_iid(train, n_clients, hp.seed)
    return SimConfig(
        spec=spec,
        train=train,
        shards=shards,
        hp=hp,
        policy=policy if policy is not None else FixedIterations(hp.h_max),
        w0=models.init_params(spec, hp.seed),
        eval_dataset=eval_ds,
        **kwargs,
    )
