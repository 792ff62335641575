import numpy as np
import pytest

from headsim.model import EncoderConfig, parameter_init
from headsim.synthworld import FactorSpec, generate_world


@pytest.fixture(scope="session")
def tiny_encoder():
    """Smallest useful encoder, float64 for numeric checks."""
    cfg = EncoderConfig(
        image_size=8, patch_size=4, embed_dim=16, depth=1, num_heads=2, mlp_ratio=2.0
    )
    params = parameter_init(cfg, seed=11, dtype=np.float64)
    return cfg, params


@pytest.fixture(scope="session")
def small_world():
    """8 identities x 4 states x 10 samples, shared across tests."""
    spec = FactorSpec(num_identities=8, states_per_identity=4, samples_per_state=10, seed=42)
    samples, manifest = generate_world(spec)
    return spec, samples, manifest
