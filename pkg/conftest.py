"""Shared pytest fixtures: codec, vocabulary, tiny corpora and tiny model configs"""
import pytest

from codec import CodecConfig
from corpus import TaskSpec, generate_corpus
from model import ModelConfig
from template import Vocabulary


@pytest.fixture
def codec_cfg():
    return CodecConfig()


@pytest.fixture
def vocab(codec_cfg):
    return Vocabulary(codec_cfg)


@pytest.fixture
def pairs(codec_cfg):
    return generate_corpus(TaskSpec(min_length=4, max_length=6), 8, seed=1, cfg=codec_cfg)


@pytest.fixture
def tiny_model_cfg(vocab):
    return ModelConfig(vocab_size=len(vocab), context_length=256, num_layers=1, num_heads=2,
                       model_dim=16, feedforward_dim=32, seed=0)
