import pytest

from sieve.grounding import DiscoveryParams
from sieve.model import ModelConfig, build_model
from sieve.numerics import seed_stream
from sieve.synth_data import generate_sample
from sieve.trainer import populate_cache


@pytest.fixture(scope="session")
def tiny_config():
    # 4x4 patch grid, shallow stack: fast enough for finite differences
    return ModelConfig(
        d_model=32, n_layers=2, n_heads=4, patch_size=16, image_side=64,
        mid_layers=(1, 2), seed=0, max_seq=256,
    )


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return build_model(tiny_config)


@pytest.fixture(scope="session")
def samples():
    root = seed_stream(11).split("test-samples")
    return [
        generate_sample(root.split(f"s{i}"), f"s{i}") for i in range(6)
    ]


@pytest.fixture(scope="session")
def populated_cache(tiny_model, samples):
    return populate_cache(tiny_model, samples, DiscoveryParams())
