"""
Shared fixtures for the matting test suite.
"""
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.services.data_service.infrastructure.synthesis import synth_matting_clip
from src.services.matting_service.domain.entities import ModelConfig
from src.services.matting_service.infrastructure.network import build_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig.tiny_test()


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=0)


@pytest.fixture
def matting_clip():
    """Eight 64×64 frames of the procedural figure over a moving background."""
    return synth_matting_clip(seed=3, length=8, height=64, width=64)


@pytest.fixture
def short_clip():
    return synth_matting_clip(seed=5, length=3, height=32, width=32)
