# See LICENSE.txt for details.

import dataclasses
import hashlib
import json
import logging
import math
import re
from collections import OrderedDict
from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from apd_protocol import *
from apd_errors import ConfigurationError, InputError

## \file bimodal_core.py
##
## A small CLIP-like model: prompted transformer image and text encoders that
## map both modalities into a joint embedding space, scaled cosine-similarity
## logits and softmax class probabilities.

logger = logging.getLogger(__name__)

class Modality(Enum):
  IMAGE = 'image'
  TEXT = 'text'

class PromptModality(Enum):
  T = 'T'    # textual prompts only
  V = 'V'    # visual prompts only
  VL = 'VL'  # both branches

@dataclasses.dataclass(frozen=True)
class BackboneConfig:
  """
  Architecture of the frozen image and text encoders, plus the short
  contrastive pretraining that stands in for a cleanly pre-trained model.
  """
  image_layers: int = 6
  text_layers: int = 4
  visual_width: int = 64
  text_width: int = 64
  heads: int = 4
  mlp_ratio: int = 4
  embed_dim: int = 64
  patch_size: int = 8
  image_resolution: int = 32
  context_length: int = 16
  vocab_size: int = 256
  logit_scale: float = DEFAULT_LOGIT_SCALE
  init_seed: int = 0
  pretrain_epochs: int = 10
  pretrain_lr: float = 1e-3
  pretrain_batch_size: int = 32

  def __post_init__(self):
    positive = ('image_layers', 'text_layers', 'visual_width', 'text_width',
      'heads', 'mlp_ratio', 'embed_dim', 'patch_size', 'image_resolution',
      'context_length', 'vocab_size', 'pretrain_batch_size')
    for name in positive:
      value = getattr(self, name)
      if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigurationError(
          f"backbone.{name} must be a positive integer, got {value!r}.")
    if self.visual_width % self.heads or self.text_width % self.heads:
      raise ConfigurationError(
        'backbone widths must be divisible by backbone.heads.')
    if self.image_resolution % self.patch_size:
      raise ConfigurationError(
        'backbone.image_resolution must be a multiple of backbone.patch_size.')
    if self.context_length < 3:
      raise ConfigurationError('backbone.context_length must be at least 3.')
    if not self.logit_scale > 0 or math.isinf(self.logit_scale):
      raise ConfigurationError(
        f"backbone.logit_scale must be positive and finite, got {self.logit_scale!r}.")
    if self.pretrain_epochs < 0:
      raise ConfigurationError('backbone.pretrain_epochs must be non-negative.')
    if not self.pretrain_lr > 0:
      raise ConfigurationError('backbone.pretrain_lr must be positive.')

  @property
  def grid_size(self):
    return self.image_resolution // self.patch_size

## Named backbone sizes.  'toy' is the default desk-scale model, 'toy-large'
## is deep enough for the full prompt depth sweep, 'micro' is small enough
## for finite-difference checks.
BACKBONE_PRESETS = {
  'toy': {},
  'toy-small': dict(image_layers=4, text_layers=3, visual_width=32,
    text_width=32, heads=2, embed_dim=32),
  'toy-large': dict(image_layers=12, text_layers=12, visual_width=96,
    text_width=96, heads=4, embed_dim=96),
  'micro': dict(image_layers=1, text_layers=1, visual_width=4, text_width=4,
    heads=1, mlp_ratio=1, embed_dim=2, patch_size=2, image_resolution=2,
    context_length=6, vocab_size=16, logit_scale=1.0, pretrain_epochs=0),
}

def backbone_preset(name, **overrides):
  """
  Returns the BackboneConfig registered under \p name with \p overrides
  applied on top.
  """
  if name not in BACKBONE_PRESETS:
    raise ConfigurationError(f"Unknown backbone preset {name!r}; expected "
      f"one of {sorted(BACKBONE_PRESETS)}.")
  values = dict(BACKBONE_PRESETS[name])
  values.update(overrides)
  return BackboneConfig(**values)

class Vocabulary():
  """
  Deterministic lowercase word-level vocabulary.

  Id 0 is padding, 1 starts a sequence and 2 ends it.  Words get the
  following ids in sorted order, so the same corpus always yields the same
  map regardless of the order texts are given in.
  """

  WORD_PATTERN = re.compile(r'[a-z0-9]+')

  def __init__(self, words, context_length):
    self.context_length = context_length
    self.token_to_id = {'<pad>': TOKEN_PAD, '<start>': TOKEN_START,
      '<end>': TOKEN_END}
    for i, word in enumerate(sorted(set(words))):
      self.token_to_id[word] = FIRST_WORD_TOKEN + i

  @classmethod
  def from_texts(cls, texts, context_length):
    words = []
    for text in texts:
      words += cls.split(text)
    return cls(words, context_length)

  @classmethod
  def split(cls, text):
    return cls.WORD_PATTERN.findall(text.lower())

  def __len__(self):
    return len(self.token_to_id)

  def __eq__(self, other):
    return (isinstance(other, Vocabulary) and
      self.token_to_id == other.token_to_id and
      self.context_length == other.context_length)

  def unknown_words(self, text):
    return [w for w in self.split(text) if w not in self.token_to_id]

  def encode(self, text):
    """
    Converts \p text to a list of exactly context_length token ids,
    truncating words (the end token is always kept) and padding with 0.
    """
    unknown = self.unknown_words(text)
    if unknown:
      raise InputError(f"Words {unknown} in {text!r} are not in the vocabulary.")
    words = self.split(text)[:self.context_length - 2]
    ids = [TOKEN_START] + [self.token_to_id[w] for w in words] + [TOKEN_END]
    return ids + [TOKEN_PAD] * (self.context_length - len(ids))

  def to_dict(self):
    return {'context_length': self.context_length,
      'words': sorted(w for w, i in self.token_to_id.items()
        if i >= FIRST_WORD_TOKEN)}

  @classmethod
  def from_dict(cls, data):
    return cls(data['words'], data['context_length'])

def build_class_prompts(class_names, template=DEFAULT_TEMPLATE, vocab=None):
  """
  Fills \p template with every class name and tokenizes the results.

  Underscores in class names are replaced by spaces first, so "water_lily"
  becomes "a photo of a water lily.".

  \param class_names Class names in class-index order.
  \param template A string containing exactly one "{}" placeholder.
  \param vocab The Vocabulary to tokenize with.  If omitted, one is built
    from the template and the class names.
  \return A long tensor with one row of token ids per class.
  """
  if template.count(CLASS_PLACEHOLDER) != 1:
    raise ConfigurationError(
      f"Template {template!r} must contain exactly one '{{}}' placeholder.")
  if len(class_names) == 0:
    raise InputError('At least one class name is required.')
  texts = []
  for name in class_names:
    readable = str(name).replace('_', ' ').strip()
    if not Vocabulary.split(readable):
      raise InputError(f"Class name {name!r} is empty after normalization.")
    texts.append(template.replace(CLASS_PLACEHOLDER, readable))
  if vocab is None:
    vocab = Vocabulary.from_texts(texts, BackboneConfig.context_length)
  rows = []
  for name, text in zip(class_names, texts):
    if vocab.unknown_words(text):
      raise InputError(f"Class {name!r} contains tokens outside the vocabulary: "
        f"{vocab.unknown_words(text)}.")
    rows.append(vocab.encode(text))
  return torch.tensor(rows, dtype=torch.long)

class ResidualAttentionBlock(nn.Module):
  """
  Pre-norm transformer block: multi-head self-attention followed by a GELU
  MLP, each with a residual connection.
  """

  def __init__(self, width, heads, mlp_ratio):
    super().__init__()
    self.heads = heads
    self.ln_1 = nn.LayerNorm(width)
    self.in_proj = nn.Linear(width, 3 * width)
    self.out_proj = nn.Linear(width, width)
    self.ln_2 = nn.LayerNorm(width)
    self.mlp = nn.Sequential(OrderedDict([
      ('c_fc', nn.Linear(width, width * mlp_ratio)),
      ('gelu', nn.GELU()),
      ('c_proj', nn.Linear(width * mlp_ratio, width)),
    ]))

  def attention(self, x, mask=None):
    batch, n, width = x.shape
    head_dim = width // self.heads
    q, k, v = self.in_proj(x).chunk(3, dim=-1)
    q = q.view(batch, n, self.heads, head_dim).transpose(1, 2)
    k = k.view(batch, n, self.heads, head_dim).transpose(1, 2)
    v = v.view(batch, n, self.heads, head_dim).transpose(1, 2)
    scores = q @ k.transpose(-2, -1) / math.sqrt(head_dim)
    if mask is not None:
      scores = scores + mask
    out = scores.softmax(dim=-1) @ v
    return self.out_proj(out.transpose(1, 2).reshape(batch, n, width))

  def forward(self, x, mask=None):
    x = x + self.attention(self.ln_1(x), mask)
    return x + self.mlp(self.ln_2(x))

def _deep_prompt(x, prompts, layer, keep_before, keep_after):
  # Replaces the prompt positions of x with this layer's prompt tokens.
  tokens = prompts[layer].to(x.dtype).expand(x.shape[0], -1, -1)
  return torch.cat([x[:, :keep_before], tokens, x[:, keep_after:]], dim=1)

class VisionTower(nn.Module):
  """
  Patch-embedding vision transformer.  Visual prompt tokens are appended
  after the class and patch tokens.
  """

  def __init__(self, cfg):
    super().__init__()
    width = cfg.visual_width
    self.conv1 = nn.Conv2d(3, width, kernel_size=cfg.patch_size,
      stride=cfg.patch_size, bias=False)
    scale = width ** -0.5
    self.class_embedding = nn.Parameter(scale * torch.randn(width))
    self.positional_embedding = nn.Parameter(
      scale * torch.randn(cfg.grid_size ** 2 + 1, width))
    self.ln_pre = nn.LayerNorm(width)
    self.blocks = nn.ModuleList([ResidualAttentionBlock(width, cfg.heads,
      cfg.mlp_ratio) for _ in range(cfg.image_layers)])
    self.ln_post = nn.LayerNorm(width)
    self.proj = nn.Parameter(scale * torch.randn(width, cfg.embed_dim))

  def forward(self, images, prompts=()):
    x = self.conv1(images)
    x = x.flatten(2).transpose(1, 2)
    cls = self.class_embedding.to(x.dtype).expand(x.shape[0], 1, -1)
    x = torch.cat([cls, x], dim=1) + self.positional_embedding.to(x.dtype)
    n_tokens = x.shape[1]
    if len(prompts):
      x = _deep_prompt(x, prompts, 0, n_tokens, n_tokens)
    x = self.ln_pre(x)
    for i, block in enumerate(self.blocks):
      if 0 < i < len(prompts):
        x = _deep_prompt(x, prompts, i, n_tokens, x.shape[1])
      x = block(x)
    return self.ln_post(x[:, 0]) @ self.proj.to(x.dtype)

class TextTower(nn.Module):
  """
  Causal text transformer pooled at the end token.  Textual prompt tokens
  are inserted right after the start token.
  """

  def __init__(self, cfg):
    super().__init__()
    width = cfg.text_width
    self.token_embedding = nn.Embedding(cfg.vocab_size, width)
    nn.init.normal_(self.token_embedding.weight, std=0.02)
    self.positional_embedding = nn.Parameter(
      0.01 * torch.randn(cfg.context_length, width))
    self.blocks = nn.ModuleList([ResidualAttentionBlock(width, cfg.heads,
      cfg.mlp_ratio) for _ in range(cfg.text_layers)])
    self.ln_final = nn.LayerNorm(width)
    self.text_projection = nn.Parameter(
      width ** -0.5 * torch.randn(width, cfg.embed_dim))

  def forward(self, tokens, prompts=(), dtype=torch.float32):
    n = tokens.shape[1]
    x = self.token_embedding(tokens).to(dtype)
    x = x + self.positional_embedding[:n].to(dtype)
    length = 0
    if len(prompts):
      length = prompts[0].shape[0]
      x = _deep_prompt(x, prompts, 0, 1, 1)
    seq = x.shape[1]
    mask = torch.full((seq, seq), float('-inf'), dtype=dtype).triu(1)
    for i, block in enumerate(self.blocks):
      if 0 < i < len(prompts):
        x = _deep_prompt(x, prompts, i, 1, 1 + length)
      x = block(x, mask)
    x = self.ln_final(x)
    end = (tokens == TOKEN_END).int().argmax(dim=1) + length
    return x[torch.arange(x.shape[0]), end] @ self.text_projection.to(dtype)

class BimodalEncoder(nn.Module):
  """
  Frozen image and text encoders that share a d-dimensional output space.

  Training code never updates these weights; build_encoder() marks every
  parameter as not requiring gradients and the hash checks in the test
  suite compare parameter_digest() before and after each trainer.
  """

  def __init__(self, cfg, vocab):
    super().__init__()
    if len(vocab) > cfg.vocab_size:
      raise ConfigurationError(f"Vocabulary has {len(vocab)} tokens but "
        f"backbone.vocab_size is {cfg.vocab_size}.")
    if vocab.context_length != cfg.context_length:
      raise ConfigurationError('Vocabulary context length does not match '
        'backbone.context_length.')
    ## The BackboneConfig this encoder was built from.
    self.config = cfg
    ## The Vocabulary used to tokenize class prompts.
    self.vocab = vocab
    self.visual = VisionTower(cfg)
    self.textual = TextTower(cfg)
    self.register_buffer('image_mean',
      torch.tensor(IMAGE_MEAN).view(1, 3, 1, 1), persistent=False)
    self.register_buffer('image_std',
      torch.tensor(IMAGE_STD).view(1, 3, 1, 1), persistent=False)

  @property
  def embed_dim(self):
    return self.config.embed_dim

  @property
  def logit_scale(self):
    return self.config.logit_scale

  def freeze(self):
    for p in self.parameters():
      p.requires_grad_(False)
    self.eval()
    return self

  def parameter_digest(self):
    return parameter_digest(self)

  def architecture_digest(self):
    """
    Digest of everything that determines this encoder's outputs: the
    architecture, the vocabulary and the frozen weights.  Checkpoints record
    it so they are never evaluated against a different backbone.
    """
    h = hashlib.sha256()
    h.update(json.dumps(dataclasses.asdict(self.config), sort_keys=True).encode())
    h.update(json.dumps(self.vocab.to_dict(), sort_keys=True).encode())
    h.update(self.parameter_digest().encode())
    return h.hexdigest()

def parameter_digest(module):
  """
  Returns a SHA-256 hex digest over the exact bytes of every named parameter
  of \p module (name, dtype, shape and values).
  """
  h = hashlib.sha256()
  for name, tensor in sorted(module.named_parameters(), key=lambda kv: kv[0]):
    t = tensor.detach().cpu().contiguous()
    h.update(name.encode())
    h.update(str(t.dtype).encode())
    h.update(str(tuple(t.shape)).encode())
    h.update(t.numpy().tobytes())
  return h.hexdigest()

def build_encoder(cfg, vocab):
  """
  Builds a BimodalEncoder with weights drawn from cfg.init_seed.  The global
  torch random state is left untouched.
  """
  with torch.random.fork_rng(devices=[]):
    torch.manual_seed(cfg.init_seed)
    model = BimodalEncoder(cfg, vocab)
  return model.freeze()

class PromptSet(nn.Module):
  """
  Learnable per-layer visual and textual prompt tokens.

  visual_prompts[i] is a (length x visual_width) tensor used at image layer
  i, textual_prompts[i] a (length x text_width) tensor used at text layer i.
  A unimodal set has exactly one of the two lists empty.
  """

  def __init__(self, visual, textual, depth, length):
    super().__init__()
    self.visual_prompts = nn.ParameterList([nn.Parameter(p) for p in visual])
    self.textual_prompts = nn.ParameterList([nn.Parameter(p) for p in textual])
    ## Number of prompted layers.
    self.depth = depth
    ## Prompt tokens per layer.
    self.length = length
    if depth < 1 or length < 1:
      raise ConfigurationError(
        f"Prompt depth and length must be at least 1, got {depth} and {length}.")
    if not visual and not textual:
      raise ConfigurationError('A PromptSet needs visual or textual prompts.')
    for p in list(visual) + list(textual):
      if p.shape[0] != length:
        raise ConfigurationError('Every prompt layer must have length tokens.')
      if not torch.isfinite(p).all():
        raise ConfigurationError('Prompt tokens must be finite.')
    for group in (visual, textual):
      if group and len(group) != depth:
        raise ConfigurationError(
          f"Expected {depth} prompt layers, got {len(group)}.")

  @property
  def modality(self):
    if len(self.visual_prompts) and len(self.textual_prompts):
      return PromptModality.VL
    return PromptModality.V if len(self.visual_prompts) else PromptModality.T

  def digest(self):
    return parameter_digest(self)

  def check(self, model):
    """
    Raises ConfigurationError if this set cannot be used with \p model.
    """
    cfg = model.config
    if self.depth > min(cfg.image_layers, cfg.text_layers):
      raise ConfigurationError(f"Prompt depth {self.depth} exceeds the "
        f"encoder depth min({cfg.image_layers}, {cfg.text_layers}).")
    for p in self.visual_prompts:
      if p.shape[1] != cfg.visual_width:
        raise ConfigurationError(f"Visual prompt width {p.shape[1]} does not "
          f"match visual_width {cfg.visual_width}.")
    for p in self.textual_prompts:
      if p.shape[1] != cfg.text_width:
        raise ConfigurationError(f"Textual prompt width {p.shape[1]} does not "
          f"match text_width {cfg.text_width}.")

def init_prompts(model, depth, length, modality=PromptModality.VL, seed=0):
  """
  Creates a PromptSet for \p model with every token drawn from
  N(0, 0.02^2) using a generator seeded with \p seed.

  Both branches are always drawn, in the same order, so the visual tokens of
  a VL set equal those of a V set created with the same seed.
  """
  modality = PromptModality(modality)
  cfg = model.config
  if not 1 <= depth <= min(cfg.image_layers, cfg.text_layers):
    raise ConfigurationError(f"Prompt depth must be between 1 and "
      f"{min(cfg.image_layers, cfg.text_layers)}, got {depth}.")
  if length < 1:
    raise ConfigurationError(f"Prompt length must be at least 1, got {length}.")
  g = torch.Generator().manual_seed(seed)
  visual = [PROMPT_INIT_STD * torch.randn(length, cfg.visual_width, generator=g)
    for _ in range(depth)]
  textual = [PROMPT_INIT_STD * torch.randn(length, cfg.text_width, generator=g)
    for _ in range(depth)]
  if modality == PromptModality.T: visual = []
  if modality == PromptModality.V: textual = []
  return PromptSet(visual, textual, depth, length)

@dataclasses.dataclass
class EmbeddingBatch:
  vectors: torch.Tensor
  modality: Modality

@dataclasses.dataclass
class LogitMatrix:
  values: torch.Tensor

@dataclasses.dataclass
class ProbMatrix:
  values: torch.Tensor

def encode_image(images, prompts, model):
  """
  Encodes a batch of [0, 1] images with the prompted image encoder.

  Normalization with the CLIP pixel statistics happens here, so attacks and
  budgets stay in raw pixel units.  The result is differentiable with respect
  to both \p images and the visual prompts.

  \param images A (B x 3 x R x R) tensor.
  \param prompts A PromptSet (only its visual part is used) or None.
  \param model The BimodalEncoder.
  \return An EmbeddingBatch of unit-norm rows.
  """
  cfg = model.config
  res = cfg.image_resolution
  if images.dim() != 4 or tuple(images.shape[1:]) != (3, res, res):
    raise ConfigurationError(f"Expected images of shape (B, 3, {res}, {res}), "
      f"got {tuple(images.shape)}.")
  if not torch.isfinite(images).all():
    raise InputError('Image batch contains non-finite values.')
  visual = ()
  if prompts is not None:
    prompts.check(model)
    visual = prompts.visual_prompts
  x = (images - model.image_mean.to(images.dtype)) / model.image_std.to(images.dtype)
  z = model.visual(x, visual)
  return EmbeddingBatch(F.normalize(z, dim=-1), Modality.IMAGE)

def encode_text(token_batch, prompts, model, dtype=torch.float32):
  """
  Encodes token sequences with the prompted text encoder.

  \param token_batch A (N x context_length) long tensor, e.g. from
    build_class_prompts().
  \param prompts A PromptSet (only its textual part is used) or None.
  \param model The BimodalEncoder.
  \return An EmbeddingBatch of unit-norm rows.
  """
  cfg = model.config
  if token_batch.dim() != 2 or token_batch.shape[1] != cfg.context_length:
    raise InputError(f"Token sequences must be padded to {cfg.context_length} "
      f"tokens, got shape {tuple(token_batch.shape)}.")
  if token_batch.min() < 0 or token_batch.max() >= len(model.vocab):
    raise InputError('Token batch contains ids outside the vocabulary.')
  if not (token_batch == TOKEN_END).any(dim=1).all():
    raise InputError('Every token sequence must contain an end token.')
  textual = ()
  if prompts is not None:
    prompts.check(model)
    textual = prompts.textual_prompts
    if len(textual):
      dtype = textual[0].dtype
  z = model.textual(token_batch, textual, dtype)
  return EmbeddingBatch(F.normalize(z, dim=-1), Modality.TEXT)

def compute_logits(image_embeds, text_embeds, model):
  """
  Returns logit_scale times the cosine similarity of every image embedding
  with every text embedding.  Both inputs are unit-normalized, so this is a
  scaled dot product.
  """
  if (image_embeds.modality != Modality.IMAGE or
      text_embeds.modality != Modality.TEXT):
    raise ConfigurationError(
      'compute_logits expects image embeddings first and text embeddings second.')
  zi, zt = image_embeds.vectors, text_embeds.vectors
  if zi.shape[-1] != zt.shape[-1] or zi.shape[-1] != model.embed_dim:
    raise ConfigurationError(f"Embedding dimensions {zi.shape[-1]} and "
      f"{zt.shape[-1]} do not match embed_dim {model.embed_dim}.")
  return LogitMatrix(model.logit_scale * zi @ zt.to(zi.dtype).t())

def softmax_probs(logits):
  """
  Row-wise softmax, stabilized by subtracting each row's maximum.
  """
  values = logits.values if isinstance(logits, LogitMatrix) else logits
  if not torch.isfinite(values).all():
    raise InputError('Logits contain non-finite values.')
  shifted = values - values.max(dim=1, keepdim=True).values
  e = shifted.exp()
  return ProbMatrix(e / e.sum(dim=1, keepdim=True))

def classify(images, prompts, class_prompts, model):
  """
  Composes encode_image(), encode_text() and compute_logits().

  \return A (LogitMatrix, predictions) pair.  Ties between classes go to the
    lowest class index.
  """
  image_embeds = encode_image(images, prompts, model)
  text_embeds = encode_text(class_prompts, prompts, model, images.dtype)
  logits = compute_logits(image_embeds, text_embeds, model)
  return logits, predict(logits.values)

def predict(values):
  # torch.argmax returns the first maximal index.
  return values.argmax(dim=1)

class PromptedModel():
  """
  A frozen BimodalEncoder together with one PromptSet and the tokenized
  class prompts: the teacher or student of a distillation run, or the single
  model of an adversarial prompt tuning baseline.
  """

  def __init__(self, encoder, prompts, class_tokens):
    prompts.check(encoder)
    self.encoder = encoder
    self.prompts = prompts
    self.class_tokens = class_tokens

  def parameters(self):
    return list(self.prompts.parameters())

  def text_features(self, dtype=torch.float32):
    return encode_text(self.class_tokens, self.prompts, self.encoder, dtype)

  def logits(self, images, text_features=None):
    """
    Returns the (B x C) logit tensor for \p images.  Text features are
    recomputed unless given, since textual prompts change during training.
    """
    if text_features is None:
      text_features = self.text_features(images.dtype)
    image_features = encode_image(images, self.prompts, self.encoder)
    return compute_logits(image_features, text_features, self.encoder).values

  def attack_forward(self, dtype=torch.float32):
    """
    Returns a function images -> logits with the text features computed once
    and detached.  Attacks only need gradients with respect to pixels.
    """
    with torch.no_grad():
      text_features = self.text_features(dtype)
    return lambda images: self.logits(images, text_features)

def pretrain_backbone(model, images, labels, class_tokens, progress=False):
  """
  Runs model.config.pretrain_epochs epochs of symmetric contrastive training
  of both encoders on (image, class prompt) pairs, then freezes the model.

  Pairs of the same class are treated as positives of each other.

  \param model The BimodalEncoder to train in place.
  \param images A (N x 3 x R x R) tensor of [0, 1] training images.
  \param labels A (N) long tensor of class indices.
  \param class_tokens Token ids of each class prompt.
  """
  cfg = model.config
  if cfg.pretrain_epochs == 0:
    return model.freeze()
  for p in model.parameters():
    p.requires_grad_(True)
  model.train()
  optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.pretrain_lr)
  g = torch.Generator().manual_seed(cfg.init_seed + 1)
  n = images.shape[0]
  epochs = tqdm(range(cfg.pretrain_epochs), desc='Pretrain', disable=not progress)
  for epoch in epochs:
    order = torch.randperm(n, generator=g)
    total = 0.0
    for start in range(0, n, cfg.pretrain_batch_size):
      idx = order[start:start + cfg.pretrain_batch_size]
      y = labels[idx]
      zi = encode_image(images[idx], None, model).vectors
      zt = encode_text(class_tokens[y], None, model).vectors
      logits = cfg.logit_scale * zi @ zt.t()
      same = (y[:, None] == y[None, :]).float()
      targets = same / same.sum(dim=1, keepdim=True)
      loss = 0.5 * (F.cross_entropy(logits, targets) +
        F.cross_entropy(logits.t(), targets))
      optimizer.zero_grad()
      loss.backward()
      optimizer.step()
      total += loss.item() * len(idx)
    logger.debug('pretrain epoch %d loss %.4f', epoch + 1, total / n)
  return model.freeze()
