import numpy as np
import pytest

from scmd.data import gen_synthetic
from scmd.teacher import OracleTeacherConfig, make_oracle_teacher


@pytest.fixture(scope="session")
def small_dataset():
    return gen_synthetic(num_classes=3, num_domains=3, n_per_domain=30,
                         feature_dim=6, shift_strength=0.3, noise=0.1, seed=42)


@pytest.fixture(scope="session")
def small_teacher(small_dataset):
    cfg = OracleTeacherConfig(embed_dim=8, anchor_seed=5, image_noise=0.3,
                              logit_scale=8.0)
    return make_oracle_teacher(cfg, small_dataset)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
