import hypothesis
import numpy as np
import pytest

from imbalanced_supcon.config import (DataConfig, EncoderConfig, LossConfig, MetricConfig,
                                      OptimizerConfig, ProbeConfig, RunConfig)
from imbalanced_supcon.sphere import RngStream

np.seterr(all="warn")

hypothesis.settings.register_profile("default", max_examples=25, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture
def rng():
    return RngStream(1234, 0)


@pytest.fixture
def tiny_config(tmp_path):
    """A run that trains in well under a second"""
    return RunConfig(
        data=DataConfig(n=48, imbalance=0.25, input_dim=4),
        encoder=EncoderConfig(dim=8),
        loss=LossConfig(tau=0.2, prototype_iters=50),
        optimizer=OptimizerConfig(epochs=2, batch_size=16),
        metrics=MetricConfig(r_fraction=0.1),
        probe=ProbeConfig(epochs=30),
        out_dir=str(tmp_path / "runs"),
    )
