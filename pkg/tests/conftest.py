"""Shared fixtures: tiny model configs and small deterministic datasets."""

import numpy as np
import pytest

from plm_kit.config import DecoderConfig, EncoderConfig, MaskingPolicy
from plm_kit.encoder import init_encoder
from plm_kit.synthetic import protein_corpus, sequences_of


@pytest.fixture
def tiny_encoder_config():
    return EncoderConfig(
        num_layers=1,
        num_heads=2,
        hidden_dim=16,
        ffn_dim=32,
        max_len=32,
        dropout_rate=0.0,
        seed=0,
    )


@pytest.fixture
def tiny_decoder_config():
    return DecoderConfig(
        num_layers=1,
        num_heads=2,
        hidden_dim=16,
        ffn_dim=32,
        z_dim=8,
        max_len=32,
        dropout_rate=0.0,
        seed=0,
    )


@pytest.fixture
def tiny_encoder(tiny_encoder_config):
    return init_encoder(tiny_encoder_config)


@pytest.fixture
def corpus():
    return sequences_of(protein_corpus(12, min_len=8, max_len=20, seed=3))


@pytest.fixture
def policy():
    return MaskingPolicy(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
