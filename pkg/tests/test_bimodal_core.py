import math
import types

import numpy as np
import pytest
import torch
from torch.autograd import gradcheck

from apd_errors import ConfigurationError, InputError
from apd_protocol import *
from bimodal_core import (BackboneConfig, LogitMatrix, Modality, PromptModality,
  PromptSet, Vocabulary, backbone_preset, build_class_prompts, build_encoder,
  classify, compute_logits, encode_image, encode_text, init_prompts,
  parameter_digest, predict, softmax_probs)

def micro_encoder(backbone):
  vocab = Vocabulary.from_texts(['red circle', 'red square'], backbone.context_length)
  return build_encoder(backbone, vocab)

def identity_blocks(model):
  # Every linear map inside the transformer blocks becomes the identity,
  # so q = k = v = LayerNorm(x).
  with torch.no_grad():
    for block in list(model.visual.blocks) + list(model.textual.blocks):
      eye = torch.eye(block.out_proj.weight.shape[0], dtype=block.out_proj.weight.dtype)
      block.in_proj.weight.copy_(torch.cat([eye, eye, eye]))
      for linear in (block.out_proj, block.mlp.c_fc, block.mlp.c_proj):
        linear.weight.copy_(eye)
      for linear in (block.in_proj, block.out_proj, block.mlp.c_fc, block.mlp.c_proj):
        linear.bias.zero_()
  return model

def np_layer_norm(x, eps=1e-5):
  mu = x.mean(axis=-1, keepdims=True)
  return (x - mu) / np.sqrt(x.var(axis=-1, keepdims=True) + eps)

def np_gelu(x):
  return 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))

def np_identity_block(x, causal):
  h = np_layer_norm(x)
  scores = h @ h.T / math.sqrt(h.shape[-1])
  if causal:
    scores = scores + np.triu(np.full(scores.shape, -np.inf), 1)
  weights = np.exp(scores - scores.max(axis=-1, keepdims=True))
  weights /= weights.sum(axis=-1, keepdims=True)
  x = x + weights @ h
  return x + np_gelu(np_layer_norm(x))

def np_unit(z):
  return z / np.linalg.norm(z)

def np_encode_image(model, images):
  v = model.visual
  conv = v.conv1.weight.detach().numpy().reshape(v.conv1.weight.shape[0], -1)
  mean = model.image_mean.numpy().reshape(3, 1, 1)
  std = model.image_std.numpy().reshape(3, 1, 1)
  rows = []
  for img in images.numpy():
    patch = conv @ ((img - mean) / std).reshape(-1)
    x = np.stack([v.class_embedding.detach().numpy(), patch])
    x = np_layer_norm(x + v.positional_embedding.detach().numpy())
    for _ in v.blocks:
      x = np_identity_block(x, causal=False)
    rows.append(np_unit(np_layer_norm(x[0]) @ v.proj.detach().numpy()))
  return np.stack(rows)

def np_encode_text(model, tokens):
  t = model.textual
  embedding = t.token_embedding.weight.detach().numpy()
  positions = t.positional_embedding.detach().numpy()
  rows = []
  for ids in tokens.numpy():
    x = embedding[ids] + positions[:len(ids)]
    for _ in t.blocks:
      x = np_identity_block(x, causal=True)
    end = list(ids).index(TOKEN_END)
    rows.append(np_unit(np_layer_norm(x)[end] @ t.text_projection.detach().numpy()))
  return np.stack(rows)

class TestVocabulary:

  def test_ids_do_not_depend_on_text_order(self):
    a = Vocabulary.from_texts(['b a', 'a c'], 8)
    b = Vocabulary.from_texts(['a c', 'b a'], 8)
    assert a == b
    assert a.token_to_id['a'] == FIRST_WORD_TOKEN
    assert a.token_to_id['c'] == FIRST_WORD_TOKEN + 2
    assert len(a) == 6

  def test_encode_pads_and_truncates(self):
    vocab = Vocabulary.from_texts(['one two three four five'], 5)
    ids = vocab.encode('One two.')
    assert ids == [TOKEN_START, vocab.token_to_id['one'], vocab.token_to_id['two'],
      TOKEN_END, TOKEN_PAD]
    long_ids = vocab.encode('one two three four five')
    assert len(long_ids) == 5
    assert long_ids[-1] == TOKEN_END

  def test_unknown_word(self):
    vocab = Vocabulary.from_texts(['a photo'], 8)
    with pytest.raises(InputError, match='zebra'):
      vocab.encode('a zebra')

  def test_dict_round_trip(self):
    vocab = Vocabulary.from_texts(['a photo of a cat'], 8)
    assert Vocabulary.from_dict(vocab.to_dict()) == vocab

class TestClassPrompts:

  def test_underscores_become_spaces(self):
    vocab = Vocabulary.from_texts(['a photo of a water lily.'], 16)
    tokens = build_class_prompts(['water_lily'], DEFAULT_TEMPLATE, vocab)
    assert tokens.tolist()[0] == vocab.encode('a photo of a water lily.')

  def test_builds_vocabulary_when_missing(self):
    tokens = build_class_prompts(['cat', 'dog'])
    assert tokens.shape == (2, BackboneConfig.context_length)
    assert not torch.equal(tokens[0], tokens[1])

  @pytest.mark.parametrize('template', ['a photo', '{} and {}'])
  def test_template_needs_one_placeholder(self, template):
    with pytest.raises(ConfigurationError):
      build_class_prompts(['cat'], template)

  def test_out_of_vocabulary_class(self):
    vocab = Vocabulary.from_texts(['a photo of a cat.'], 16)
    with pytest.raises(InputError, match="'dog'"):
      build_class_prompts(['cat', 'dog'], DEFAULT_TEMPLATE, vocab)

class TestBackboneConfig:

  def test_heads_must_divide_width(self):
    with pytest.raises(ConfigurationError):
      BackboneConfig(visual_width=10, heads=4)

  def test_unknown_preset(self):
    with pytest.raises(ConfigurationError, match='toy-large'):
      backbone_preset('huge')

  def test_preset_overrides(self):
    cfg = backbone_preset('toy-large', init_seed=3)
    assert cfg.image_layers == 12 and cfg.text_layers == 12
    assert cfg.init_seed == 3

  def test_build_is_deterministic_and_frozen(self, micro_backbone):
    a, b = micro_encoder(micro_backbone), micro_encoder(micro_backbone)
    assert a.parameter_digest() == b.parameter_digest()
    assert a.architecture_digest() == b.architecture_digest()
    assert not any(p.requires_grad for p in a.parameters())

  def test_init_seed_changes_weights(self, micro_backbone):
    other = backbone_preset('micro', init_seed=1)
    assert (micro_encoder(micro_backbone).parameter_digest() !=
      micro_encoder(other).parameter_digest())

  def test_vocabulary_must_fit(self):
    cfg = backbone_preset('micro')
    vocab = Vocabulary.from_texts(['a b c d e f g h i j k l m n'], cfg.context_length)
    with pytest.raises(ConfigurationError, match='vocab_size'):
      build_encoder(cfg, vocab)

class TestEncoders:

  def test_image_embeddings_are_unit_norm(self, micro_backbone):
    model = micro_encoder(micro_backbone)
    images = torch.rand(3, 3, 2, 2)
    z = encode_image(images, None, model)
    assert z.modality == Modality.IMAGE
    torch.testing.assert_close(z.vectors.norm(dim=-1), torch.ones(3))

  def test_image_shape_is_checked(self, micro_backbone):
    model = micro_encoder(micro_backbone)
    with pytest.raises(ConfigurationError):
      encode_image(torch.rand(1, 3, 4, 4), None, model)

  def test_non_finite_pixels(self, micro_backbone):
    model = micro_encoder(micro_backbone)
    images = torch.rand(1, 3, 2, 2)
    images[0, 0, 0, 0] = float('nan')
    with pytest.raises(InputError):
      encode_image(images, None, model)

  def test_tokens_after_the_end_token_are_ignored(self, micro_backbone):
    model = micro_encoder(micro_backbone)
    prompts = init_prompts(model, 1, 2, PromptModality.T, seed=0)
    red = model.vocab.token_to_id['red']
    a = torch.tensor([[TOKEN_START, red, TOKEN_END, TOKEN_PAD, TOKEN_PAD, TOKEN_PAD]])
    b = torch.tensor([[TOKEN_START, red, TOKEN_END, red, red, TOKEN_PAD]])
    torch.testing.assert_close(encode_text(a, prompts, model).vectors,
      encode_text(b, prompts, model).vectors)

  def test_full_depth_prompts_on_the_large_backbone(self):
    cfg = backbone_preset('toy-large')
    vocab = Vocabulary.from_texts(['a photo of a red circle.', 'a photo of a red square.'],
      cfg.context_length)
    model = build_encoder(cfg, vocab)
    prompts = init_prompts(model, 12, 16, PromptModality.VL, seed=0)
    images = torch.rand(2, 3, cfg.image_resolution, cfg.image_resolution)
    z = encode_image(images, prompts, model).vectors
    assert z.shape == (2, cfg.embed_dim)
    tokens = build_class_prompts(['red circle', 'red square'], DEFAULT_TEMPLATE, vocab)
    assert encode_text(tokens, prompts, model).vectors.shape == (2, cfg.embed_dim)
    with pytest.raises(ConfigurationError, match='depth'):
      init_prompts(build_encoder(backbone_preset('toy'), vocab), 12, 16)

  def test_text_checks(self, micro_backbone):
    model = micro_encoder(micro_backbone)
    with pytest.raises(InputError):
      encode_text(torch.zeros(1, 3, dtype=torch.long), None, model)
    with pytest.raises(InputError, match='end token'):
      encode_text(torch.ones(1, micro_backbone.context_length, dtype=torch.long),
        None, model)

  def test_deep_prompts_reach_later_layers(self):
    cfg = backbone_preset('micro', image_layers=2, text_layers=2)
    model = micro_encoder(cfg)
    images = torch.rand(2, 3, 2, 2)
    prompts = init_prompts(model, 2, 2, PromptModality.VL, seed=0)
    tokens = build_class_prompts(['red circle', 'red square'], '{}', model.vocab)
    g = torch.Generator().manual_seed(1)
    # A constant shift would be removed by the block's LayerNorm.
    before = encode_image(images, prompts, model).vectors
    with torch.no_grad():
      prompts.visual_prompts[1].add_(torch.randn(2, cfg.visual_width, generator=g))
    after = encode_image(images, prompts, model).vectors
    assert (before - after).abs().max() > 1e-4

    before = encode_text(tokens, prompts, model).vectors
    with torch.no_grad():
      prompts.textual_prompts[1].add_(torch.randn(2, cfg.text_width, generator=g))
    after = encode_text(tokens, prompts, model).vectors
    assert (before - after).abs().max() > 1e-5

class TestMicroForwardPass:

  @pytest.fixture
  def model(self, micro_backbone):
    return identity_blocks(micro_encoder(micro_backbone).double())

  @pytest.fixture
  def images(self):
    g = torch.Generator().manual_seed(4)
    return torch.rand(3, 3, 2, 2, generator=g, dtype=torch.float64)

  @pytest.fixture
  def tokens(self, model):
    return build_class_prompts(['red circle', 'red square'], '{}', model.vocab)

  def test_encode_image(self, model, images):
    z = encode_image(images, None, model).vectors
    np.testing.assert_allclose(z.numpy(), np_encode_image(model, images),
      rtol=1e-9, atol=1e-12)

  def test_encode_text(self, model, tokens):
    z = encode_text(tokens, None, model, torch.float64).vectors
    np.testing.assert_allclose(z.numpy(), np_encode_text(model, tokens),
      rtol=1e-9, atol=1e-12)

  def test_classify(self, model, images, tokens):
    logits, preds = classify(images, None, tokens, model)
    expected = model.logit_scale * (np_encode_image(model, images) @
      np_encode_text(model, tokens).T)
    np.testing.assert_allclose(logits.values.numpy(), expected, rtol=1e-9, atol=1e-12)
    assert preds.tolist() == expected.argmax(axis=1).tolist()

class TestLogits:

  def test_scaled_cosine_similarity(self, micro_backbone):
    model = micro_encoder(micro_backbone)
    zi = encode_image(torch.rand(4, 3, 2, 2), None, model)
    zt = encode_text(build_class_prompts(['red circle', 'red square'], '{}',
      model.vocab), None, model)
    logits = compute_logits(zi, zt, model).values.numpy()
    a, b = zi.vectors.numpy(), zt.vectors.numpy()
    cosine = (a @ b.T) / np.outer(np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1))
    np.testing.assert_allclose(logits, micro_backbone.logit_scale * cosine,
      rtol=1e-5, atol=1e-6)

  def test_argument_order(self, micro_backbone):
    model = micro_encoder(micro_backbone)
    zi = encode_image(torch.rand(1, 3, 2, 2), None, model)
    with pytest.raises(ConfigurationError):
      compute_logits(zi, zi, model)

  def test_softmax_is_stable(self):
    probs = softmax_probs(LogitMatrix(torch.tensor([[1000.0, 0.0], [3.0, 3.0]])))
    torch.testing.assert_close(probs.values,
      torch.tensor([[1.0, 0.0], [0.5, 0.5]]))

  def test_softmax_rejects_non_finite(self):
    with pytest.raises(InputError):
      softmax_probs(torch.tensor([[float('inf'), 0.0]]))

  def test_ties_go_to_the_lowest_class(self):
    assert predict(torch.tensor([[1.0, 2.0, 2.0], [0.0, 0.0, 0.0]])).tolist() == [1, 0]

  def test_classify(self, micro_backbone):
    model = micro_encoder(micro_backbone)
    tokens = build_class_prompts(['red circle', 'red square'], '{}', model.vocab)
    logits, preds = classify(torch.rand(5, 3, 2, 2), None, tokens, model)
    assert logits.values.shape == (5, 2)
    assert preds.tolist() == logits.values.argmax(dim=1).tolist()

  def test_predictions_do_not_depend_on_logit_scale(self, micro_backbone):
    g = torch.Generator().manual_seed(2)
    batches = [torch.rand(16, 3, 2, 2, generator=g) for _ in range(3)]
    reference = micro_encoder(micro_backbone)
    tokens = build_class_prompts(['red circle', 'red square'], '{}', reference.vocab)
    for scale in (0.01, 3.0, 100.0):
      model = micro_encoder(backbone_preset('micro', logit_scale=scale))
      assert model.parameter_digest() == reference.parameter_digest()
      for images in batches:
        base_logits, base_preds = classify(images, None, tokens, reference)
        logits, preds = classify(images, None, tokens, model)
        assert torch.equal(preds, base_preds)
        torch.testing.assert_close(logits.values, scale * base_logits.values)

class TestPrompts:

  def test_initialization_is_seeded(self):
    model = types.SimpleNamespace(config=backbone_preset('toy'))
    a = init_prompts(model, 4, 16, PromptModality.VL, seed=5)
    b = init_prompts(model, 4, 16, PromptModality.VL, seed=5)
    assert a.digest() == b.digest()
    assert len(a.visual_prompts) == 4 and a.visual_prompts[0].shape == (16, 64)
    std = torch.cat([p.flatten() for p in a.parameters()]).std().item()
    assert 0.015 < std < 0.025

  def test_unimodal_sets_share_the_visual_draw(self):
    model = types.SimpleNamespace(config=backbone_preset('toy'))
    vl = init_prompts(model, 2, 4, PromptModality.VL, seed=1)
    v = init_prompts(model, 2, 4, PromptModality.V, seed=1)
    t = init_prompts(model, 2, 4, PromptModality.T, seed=1)
    torch.testing.assert_close(vl.visual_prompts[1], v.visual_prompts[1])
    torch.testing.assert_close(vl.textual_prompts[0], t.textual_prompts[0])
    assert len(v.textual_prompts) == 0 and len(t.visual_prompts) == 0
    assert (vl.modality, v.modality, t.modality) == (PromptModality.VL,
      PromptModality.V, PromptModality.T)

  def test_depth_is_bounded_by_the_encoder(self):
    model = types.SimpleNamespace(config=backbone_preset('toy'))
    with pytest.raises(ConfigurationError):
      init_prompts(model, 5, 16)

  def test_width_mismatch(self, micro_backbone):
    model = micro_encoder(micro_backbone)
    prompts = PromptSet([torch.zeros(2, 8)], [], 1, 2)
    with pytest.raises(ConfigurationError, match='visual_width'):
      prompts.check(model)

  def test_prompt_set_validation(self):
    with pytest.raises(ConfigurationError):
      PromptSet([], [], 1, 2)
    with pytest.raises(ConfigurationError):
      PromptSet([torch.zeros(3, 4)], [], 1, 2)

class TestGradients:

  def test_logits_gradcheck(self, micro_encoder_double):
    encoder, tokens = micro_encoder_double
    torch.manual_seed(0)
    x = torch.rand(2, 3, 2, 2, dtype=torch.float64, requires_grad=True)
    vp = (0.1 * torch.randn(2, 4, dtype=torch.float64)).requires_grad_()
    tp = (0.1 * torch.randn(2, 4, dtype=torch.float64)).requires_grad_()

    def logits(x, vp, tp):
      mean = encoder.image_mean.to(x.dtype)
      std = encoder.image_std.to(x.dtype)
      zi = encoder.visual((x - mean) / std, [vp])
      zt = encoder.textual(tokens, [tp], torch.float64)
      zi = zi / zi.norm(dim=-1, keepdim=True)
      zt = zt / zt.norm(dim=-1, keepdim=True)
      return encoder.logit_scale * zi @ zt.t()

    assert gradcheck(logits, (x, vp, tp), eps=1e-6, atol=1e-5, rtol=1e-4)

  def test_parameter_digest_sees_every_bit(self):
    a = torch.nn.Linear(2, 2)
    before = parameter_digest(a)
    with torch.no_grad():
      a.weight[0, 0] = torch.nextafter(a.weight[0, 0], torch.tensor(10.0))
    assert parameter_digest(a) != before
