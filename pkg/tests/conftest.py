import os

import pytest
import torch

from bimodal_core import Vocabulary, backbone_preset, build_class_prompts, build_encoder
from data_pipeline import SyntheticShapesConfig, make_synthetic_shapes, sample_few_shot
from distill_trainer import DistillConfig, ModelFactory

MICRO_TEMPLATE = '{}'

def pytest_collection_modifyitems(config, items):
  if os.environ.get('APD_RUN_SLOW') == '1':
    return
  skip = pytest.mark.skip(reason='set APD_RUN_SLOW=1 to run trend checks')
  for item in items:
    if 'slow' in item.keywords:
      item.add_marker(skip)

@pytest.fixture(scope='session')
def micro_backbone():
  return backbone_preset('micro')

@pytest.fixture(scope='session')
def micro_shapes():
  cfg = SyntheticShapesConfig(classes=2, train_per_class=6, test_per_class=6,
    resolution=2, seed=3)
  return make_synthetic_shapes(cfg)

@pytest.fixture
def micro_factory(micro_backbone, micro_shapes):
  return ModelFactory(micro_backbone, micro_shapes[0], MICRO_TEMPLATE, depth=1,
    length=2)

@pytest.fixture
def micro_shots(micro_shapes):
  return sample_few_shot(micro_shapes[0], 2, seed=0)

@pytest.fixture
def micro_cfg():
  return DistillConfig(epochs=2, batch_size=2, shots=2, learning_rate=0.01,
    warmup_lr=0.001, seed=0)

@pytest.fixture
def micro_encoder_double(micro_backbone, micro_shapes):
  # A private double-precision copy; never the factory's cached encoder.
  names = micro_shapes[0].class_names
  texts = [n.replace('_', ' ') for n in names]
  vocab = Vocabulary.from_texts(texts, micro_backbone.context_length)
  encoder = build_encoder(micro_backbone, vocab).double()
  tokens = build_class_prompts(names, MICRO_TEMPLATE, vocab)
  return encoder, tokens
