# See LICENSE.txt for details.

import collections
import dataclasses
import hashlib
import json
import logging
import math
import os
from enum import Enum

import torch
import torch.nn.functional as F
from tqdm import tqdm

from apd_protocol import *
from apd_errors import ConfigurationError, EvaluationError, TrainingError
from attack_engine import (AttackBudget, evaluation_budget, kl_per_example,
  pgd_attack, training_budget)
from bimodal_core import (PromptModality, PromptSet, PromptedModel,
  Vocabulary, build_class_prompts, build_encoder, init_prompts,
  pretrain_backbone)
from data_pipeline import (Dataset, FewShotSubset, batches, dataset_digest,
  epoch_seed)

## \file distill_trainer.py
##
## Outer minimization: the online adversarial prompt distillation trainer,
## its offline and unimodal variants, and the adversarial prompt tuning
## baselines (dynamic APT-T/V/VL and static AdvPT).

logger = logging.getLogger(__name__)

class Method(Enum):
  APD = 'APD'
  APD_OFFLINE = 'APD_OFFLINE'
  APD_T = 'APD_T'
  APD_V = 'APD_V'
  APT_T = 'APT_T'
  APT_V = 'APT_V'
  APT_VL = 'APT_VL'
  ADVPT = 'ADVPT'

  @property
  def is_distillation(self):
    return self in DISTILLATION_METHODS

DISTILLATION_METHODS = frozenset((Method.APD, Method.APD_OFFLINE, Method.APD_T,
  Method.APD_V))

def derive_seed(root_seed, component):
  """
  Expands \p root_seed into the subseed of a named component, for example
  "student_prompts" or "eval_attack".  The derivation is a SHA-256 of
  "<root_seed>:<component>", so it is stable across processes and Python
  versions.
  """
  digest = hashlib.sha256(f"{root_seed}:{component}".encode()).digest()
  return int.from_bytes(digest[:8], 'big') % (2 ** 31)

def canonical_digest(data):
  """
  SHA-256 of the canonical JSON form (sorted keys, no whitespace) of \p data.
  """
  text = json.dumps(data, sort_keys=True, separators=(',', ':'))
  return hashlib.sha256(text.encode()).hexdigest()

@dataclasses.dataclass(frozen=True)
class DistillConfig:
  """
  Outer-loop hyperparameters shared by every trainer.
  """
  ## Weight of the student feedback term in the teacher loss.
  beta: float = DEFAULT_BETA
  distill_temperature: float = DEFAULT_DISTILL_TEMPERATURE
  epochs: int = DEFAULT_EPOCHS
  batch_size: int = DEFAULT_BATCH_SIZE
  learning_rate: float = DEFAULT_LEARNING_RATE
  momentum: float = DEFAULT_MOMENTUM
  ## Learning rate at the first iteration of the one-epoch linear warmup.
  warmup_lr: float = DEFAULT_WARMUP_LR
  shots: int = DEFAULT_SHOTS
  seed: int = 0
  train_budget: AttackBudget = dataclasses.field(default_factory=training_budget)
  ## Argument order of both KL terms; see teacher_loss() and student_loss().
  kl_direction: str = KL_STUDENT_FIRST
  ## If true, the student step uses teacher logits computed after the
  ## teacher update instead of the ones from the teacher step.
  recompute_teacher_logits: bool = False

  def __post_init__(self):
    if not self.beta >= 0:
      raise ConfigurationError(f"distill.beta must be non-negative, got {self.beta!r}.")
    if not self.distill_temperature > 0:
      raise ConfigurationError('distill.distill_temperature must be positive.')
    for name in ('epochs', 'batch_size', 'shots'):
      value = getattr(self, name)
      if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigurationError(f"distill.{name} must be a positive integer, got {value!r}.")
    if not self.learning_rate > 0:
      raise ConfigurationError('distill.learning_rate must be positive.')
    if not 0 <= self.momentum < 1:
      raise ConfigurationError('distill.momentum must be in [0, 1).')
    if not 0 < self.warmup_lr <= self.learning_rate:
      raise ConfigurationError('distill.warmup_lr must be in (0, learning_rate].')
    if self.kl_direction not in (KL_STUDENT_FIRST, KL_TEACHER_FIRST):
      raise ConfigurationError(f"Unknown distill.kl_direction {self.kl_direction!r}; "
        f"expected '{KL_STUDENT_FIRST}' or '{KL_TEACHER_FIRST}'.")
    if not isinstance(self.train_budget, AttackBudget):
      raise ConfigurationError('distill.train_budget must be an AttackBudget.')

  def to_dict(self):
    return dataclasses.asdict(self)

@dataclasses.dataclass
class TrainedDefense:
  """
  The result of one training run.
  """
  method: Method
  student_prompts: PromptSet
  ## Present exactly for distillation methods.
  teacher_prompts: PromptSet
  config_hash: str
  ## One dict per epoch: 'epoch', 'lr', 'student_loss' and, for methods
  ## that train a teacher, 'teacher_loss'.
  history: list
  ## Digest of the frozen encoder the prompts were trained against.
  architecture_digest: str
  seed: int = 0
  ## Per-epoch history of the clean teacher pre-tuning phase (APD_OFFLINE).
  pretune_history: list = dataclasses.field(default_factory=list)

  def __post_init__(self):
    self.method = Method(self.method)
    if self.method.is_distillation != (self.teacher_prompts is not None):
      raise ConfigurationError(f"{self.method.value} defenses must "
        f"{'' if self.method.is_distillation else 'not '}have teacher prompts.")

  @property
  def epochs(self):
    return len(self.history)

  @property
  def final_metrics(self):
    if not self.history:
      return {}
    return {k: v for k, v in self.history[-1].items() if k != 'epoch'}

def kl_divergence(p_logits, q_logits, temperature=DEFAULT_DISTILL_TEMPERATURE):
  """
  Batch mean of KL(softmax(p / T) || softmax(q / T)), multiplied by T^2 so
  gradient magnitudes do not depend on the temperature.
  """
  return kl_per_example(p_logits, q_logits, temperature).mean() * temperature ** 2

def teacher_loss(teacher_logits, student_logits, y, cfg):
  """
  CE(T(x), y) + beta * KL(T(x) || S(x')), with the student logits detached.
  The KL term is skipped entirely when beta is 0.

  \sa teacher_step()
  """
  loss = F.cross_entropy(teacher_logits, y)
  if cfg.beta:
    student_logits = student_logits.detach()
    if cfg.kl_direction == KL_STUDENT_FIRST:
      kl = kl_divergence(teacher_logits, student_logits, cfg.distill_temperature)
    else:
      kl = kl_divergence(student_logits, teacher_logits, cfg.distill_temperature)
    loss = loss + cfg.beta * kl
  return loss

def student_loss(student_logits, teacher_logits, cfg):
  """
  KL(S(x') || T(x)) * T^2 with the teacher logits detached.

  \sa student_step()
  """
  teacher_logits = teacher_logits.detach()
  if cfg.kl_direction == KL_STUDENT_FIRST:
    return kl_divergence(student_logits, teacher_logits, cfg.distill_temperature)
  return kl_divergence(teacher_logits, student_logits, cfg.distill_temperature)

def warmup_cosine(cfg, steps_per_epoch):
  """
  Returns the LambdaLR multiplier of the learning rate schedule: linear
  warmup from cfg.warmup_lr to cfg.learning_rate over the first epoch, then
  cosine decay to 0 over the remaining epochs.  Indexed by iteration.
  """
  warmup = max(1, steps_per_epoch)
  total = max(warmup, cfg.epochs * steps_per_epoch)
  start = cfg.warmup_lr / cfg.learning_rate

  def factor(it):
    if it < warmup:
      return start + (1 - start) * it / warmup
    if total == warmup:
      return 1.0
    progress = min(1.0, (it - warmup) / (total - warmup))
    return 0.5 * (1 + math.cos(math.pi * progress))

  return factor

class Learner():
  """
  SGD with momentum on one PromptedModel's prompts, stepped once per batch.
  """

  def __init__(self, model, cfg, steps_per_epoch):
    self.model = model
    self.optimizer = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate,
      momentum=cfg.momentum)
    self.scheduler = torch.optim.lr_scheduler.LambdaLR(self.optimizer,
      warmup_cosine(cfg, steps_per_epoch))

  @property
  def lr(self):
    return self.optimizer.param_groups[0]['lr']

  def step(self, loss):
    self.optimizer.zero_grad()
    loss.backward()
    self.optimizer.step()
    self.scheduler.step()

def _where(batch_id):
  return 'batch' if batch_id is None else f"epoch {batch_id[0]}, batch {batch_id[1]}"

def _check_loss(loss, what, batch_id):
  if not torch.isfinite(loss):
    raise TrainingError(f"{what} loss became non-finite at {_where(batch_id)}.")

def teacher_step(teacher, student, x, y, x_adv, cfg, learner,
  student_logits=None, return_logits=False, batch_id=None):
  """
  Performs one update of the teacher prompts on clean images, with feedback
  from the student's predictions on the adversarial images.

  \param teacher The teacher PromptedModel; only its prompts change.
  \param student The student PromptedModel; never modified.
  \param x Clean images.
  \param y Labels.
  \param x_adv The AdversarialBatch generated from \p x against the student.
  \param cfg The DistillConfig.
  \param learner The teacher's Learner.
  \param student_logits Student logits on x_adv.images, if already computed.
  \param return_logits If true, also return the pre-update teacher logits.
  \return The pre-update teacher loss as a float, or (loss, logits).
  """
  if cfg.beta < 0:
    raise ConfigurationError(f"distill.beta must be non-negative, got {cfg.beta}.")
  teacher_logits = teacher.logits(x)
  if cfg.beta and student_logits is None:
    with torch.no_grad():
      student_logits = student.logits(x_adv.images)
  loss = teacher_loss(teacher_logits, student_logits, y, cfg)
  _check_loss(loss, 'Teacher', batch_id)
  learner.step(loss)
  if return_logits:
    return loss.item(), teacher_logits.detach()
  return loss.item()

def student_step(student, teacher, x_adv, x, cfg, learner, teacher_logits=None,
  batch_id=None):
  """
  Performs one update of the student prompts, matching the student's
  distribution on the adversarial images to the teacher's distribution on
  the clean images.

  \param teacher_logits Teacher logits on \p x, if already computed.  They
    are treated as constants either way.
  \return The pre-update student loss as a float.
  """
  if teacher_logits is None:
    with torch.no_grad():
      teacher_logits = teacher.logits(x)
  if not torch.isfinite(teacher_logits).all():
    raise TrainingError(f"Teacher logits are non-finite at {_where(batch_id)}.")
  loss = student_loss(student.logits(x_adv.images), teacher_logits, cfg)
  _check_loss(loss, 'Student', batch_id)
  learner.step(loss)
  return loss.item()

def _steps_per_epoch(data, cfg):
  return math.ceil(len(data) / cfg.batch_size)

def _attack(model, x, y, budget, cfg, batch_id):
  seed = derive_seed(cfg.seed, f"train_attack/{batch_id[0]}/{batch_id[1]}")
  return pgd_attack(model.attack_forward(x.dtype), x, y, budget, seed=seed,
    batch_id=batch_id)

def _epochs(cfg, desc, progress):
  return tqdm(range(1, cfg.epochs + 1), desc=desc, disable=not progress)

def _mean(values):
  return sum(values) / len(values) if values else float('nan')

def train_apd(data, model_factory, cfg, modality=PromptModality.VL,
  progress=False, config_hash=None):
  """
  Online adversarial prompt distillation.

  Each batch: adversarial images are generated against the student with
  cfg.train_budget, the teacher takes one step on the clean images with
  student feedback, and the student takes one step towards the teacher's
  pre-update clean predictions.  A text-only or vision-only \p modality
  gives the unimodal variants.

  \param data The FewShotSubset to train on.
  \param model_factory A ModelFactory.
  \param cfg The DistillConfig.
  \return A TrainedDefense.
  """
  modality = PromptModality(modality)
  method = {PromptModality.VL: Method.APD, PromptModality.T: Method.APD_T,
    PromptModality.V: Method.APD_V}[modality]
  teacher = model_factory.prompted('teacher', cfg.seed, modality)
  student = model_factory.prompted('student', cfg.seed, modality)
  steps = _steps_per_epoch(data, cfg)
  teacher_learner = Learner(teacher, cfg, steps)
  student_learner = Learner(student, cfg, steps)
  history = []

  for epoch in _epochs(cfg, method.value, progress):
    teacher_losses, student_losses = [], []
    for i, (x, y) in enumerate(batches(data, cfg.batch_size, epoch_seed(cfg.seed, epoch))):
      batch_id = (epoch, i)
      x_adv = _attack(student, x, y, cfg.train_budget, cfg, batch_id)
      with torch.no_grad():
        student_logits = student.logits(x_adv.images)
      t_loss, t_logits = teacher_step(teacher, student, x, y, x_adv, cfg,
        teacher_learner, student_logits=student_logits, return_logits=True,
        batch_id=batch_id)
      if cfg.recompute_teacher_logits:
        t_logits = None
      s_loss = student_step(student, teacher, x_adv, x, cfg, student_learner,
        teacher_logits=t_logits, batch_id=batch_id)
      teacher_losses.append(t_loss)
      student_losses.append(s_loss)
    history.append({'epoch': epoch, 'lr': student_learner.lr,
      'teacher_loss': _mean(teacher_losses), 'student_loss': _mean(student_losses)})
    logger.debug('%s epoch %d teacher %.4f student %.4f', method.value, epoch,
      history[-1]['teacher_loss'], history[-1]['student_loss'])

  return _finish(method, student, teacher, history, model_factory, cfg, config_hash)

def train_apd_offline(data, model_factory, cfg, progress=False, config_hash=None):
  """
  Offline distillation: the teacher is first tuned with cross-entropy on the
  clean images for cfg.epochs epochs, then frozen while the student is
  distilled from it on freshly generated adversarial images.  cfg.beta has
  no effect.
  """
  if cfg.beta:
    logger.warning('distill.beta=%s is ignored by APD_OFFLINE.', cfg.beta)
  teacher = model_factory.prompted('teacher', cfg.seed, PromptModality.VL)
  student = model_factory.prompted('student', cfg.seed, PromptModality.VL)
  steps = _steps_per_epoch(data, cfg)

  teacher_learner = Learner(teacher, cfg, steps)
  pretune = []
  for epoch in _epochs(cfg, 'Teacher', progress):
    losses = []
    for i, (x, y) in enumerate(batches(data, cfg.batch_size,
        epoch_seed(derive_seed(cfg.seed, 'teacher_pretune'), epoch))):
      loss = F.cross_entropy(teacher.logits(x), y)
      _check_loss(loss, 'Teacher', (epoch, i))
      teacher_learner.step(loss)
      losses.append(loss.item())
    pretune.append({'epoch': epoch, 'lr': teacher_learner.lr,
      'teacher_loss': _mean(losses)})

  student_learner = Learner(student, cfg, steps)
  history = []
  for epoch in _epochs(cfg, Method.APD_OFFLINE.value, progress):
    losses = []
    for i, (x, y) in enumerate(batches(data, cfg.batch_size, epoch_seed(cfg.seed, epoch))):
      x_adv = _attack(student, x, y, cfg.train_budget, cfg, (epoch, i))
      losses.append(student_step(student, teacher, x_adv, x, cfg,
        student_learner, batch_id=(epoch, i)))
    history.append({'epoch': epoch, 'lr': student_learner.lr,
      'student_loss': _mean(losses)})
  defense = _finish(Method.APD_OFFLINE, student, teacher, history,
    model_factory, cfg, config_hash)
  defense.pretune_history = pretune
  return defense

def apt_step(model, x_train, y, learner, batch_id=None):
  """
  Performs one cross-entropy update of \p model's prompts on the (already
  perturbed) images \p x_train.

  \return The pre-update loss as a float.
  """
  loss = F.cross_entropy(model.logits(x_train), y)
  _check_loss(loss, 'Training', batch_id)
  learner.step(loss)
  return loss.item()

def _adversarial_ce_epochs(model, data, cfg, method, progress, attack,
    end_epoch=None):
  # end_epoch(entry) may add fields to each history entry or raise.
  learner = Learner(model, cfg, _steps_per_epoch(data, cfg))
  history = []
  for epoch in _epochs(cfg, method.value, progress):
    losses = []
    for i, (x, y) in enumerate(batches(data, cfg.batch_size, epoch_seed(cfg.seed, epoch))):
      losses.append(apt_step(model, attack(x, y, (epoch, i)), y, learner, (epoch, i)))
    history.append({'epoch': epoch, 'lr': learner.lr, 'student_loss': _mean(losses)})
    if end_epoch is not None:
      end_epoch(history[-1])
  return history

def train_apt(data, model_factory, cfg, modality=PromptModality.VL,
  progress=False, config_hash=None):
  """
  Single-model adversarial prompt tuning: each batch is attacked with
  cfg.train_budget against the current prompts, then the prompts of
  \p modality take one cross-entropy step on the adversarial images.
  """
  modality = PromptModality(modality)
  method = {PromptModality.T: Method.APT_T, PromptModality.V: Method.APT_V,
    PromptModality.VL: Method.APT_VL}[modality]
  model = model_factory.prompted('student', cfg.seed, modality)

  def attack(x, y, batch_id):
    return _attack(model, x, y, cfg.train_budget, cfg, batch_id).images

  history = _adversarial_ce_epochs(model, data, cfg, method, progress, attack)
  return _finish(method, model, None, history, model_factory, cfg, config_hash)

def static_adversarial_set(model, data, budget, seed, batch_size=DEFAULT_EVAL_BATCH_SIZE):
  """
  Attacks every image of \p data once against \p model and returns a
  FewShotSubset over the resulting fixed adversarial images (same order and
  labels as \p data).
  """
  images, labels = data.images, data.labels
  forward = model.attack_forward(images.dtype)
  adversarial = []
  for start in range(0, len(labels), batch_size):
    x, y = images[start:start + batch_size], labels[start:start + batch_size]
    adv = pgd_attack(forward, x, y, budget,
      seed=derive_seed(seed, f"static_attack/{start}"), batch_id=start // batch_size)
    adversarial.append(adv.images)
  parent = Dataset(f"{data.parent.name}-static-adversarial", torch.cat(adversarial),
    labels.clone(), data.parent.class_names, 'train')
  return FewShotSubset(parent, list(range(len(labels))), data.shots, data.seed)

def tensor_digest(t):
  return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()

def train_advpt(data, model_factory, cfg, progress=False, config_hash=None):
  """
  AdvPT baseline: one static set of adversarial images is generated up
  front with evaluation-strength PGD against the frozen model and its
  untrained input-layer text prompts, then only those text prompts are
  tuned with cross-entropy on the fixed images.  The set is never
  regenerated; each history entry records its digest.
  """
  model = model_factory.prompted('student', cfg.seed, PromptModality.T, depth=1)
  budget = evaluation_budget(cfg.train_budget.epsilon)
  static = static_adversarial_set(model, data, budget,
    derive_seed(cfg.seed, 'static_attack'))
  digest = tensor_digest(static.parent.images)
  logger.info('AdvPT static adversarial set: %d images, digest %s',
    len(static), digest[:12])

  def check_static(entry):
    entry['static_digest'] = tensor_digest(static.parent.images)
    if entry['static_digest'] != digest:
      raise TrainingError('The static adversarial set changed during epoch '
        f"{entry['epoch']}.")

  history = _adversarial_ce_epochs(model, static, cfg, Method.ADVPT, progress,
    lambda x, y, batch_id: x, check_static)
  return _finish(Method.ADVPT, model, None, history, model_factory, cfg, config_hash)

def _finish(method, student, teacher, history, model_factory, cfg, config_hash):
  if config_hash is None:
    config_hash = canonical_digest({'method': method.value,
      'distill': cfg.to_dict(), 'model': model_factory.describe()})
  return TrainedDefense(method, student.prompts,
    None if teacher is None else teacher.prompts, config_hash, history,
    model_factory.encoder().architecture_digest(), cfg.seed)

def train_defense(method, data, model_factory, cfg, progress=False, config_hash=None):
  """
  Trains a defense with any of the eight methods.

  \sa train_apd(), train_apd_offline(), train_apt(), train_advpt()
  """
  method = Method(method)
  kwargs = dict(progress=progress, config_hash=config_hash)
  if method == Method.APD:
    return train_apd(data, model_factory, cfg, PromptModality.VL, **kwargs)
  if method == Method.APD_T:
    return train_apd(data, model_factory, cfg, PromptModality.T, **kwargs)
  if method == Method.APD_V:
    return train_apd(data, model_factory, cfg, PromptModality.V, **kwargs)
  if method == Method.APD_OFFLINE:
    return train_apd_offline(data, model_factory, cfg, **kwargs)
  if method == Method.ADVPT:
    return train_advpt(data, model_factory, cfg, **kwargs)
  modality = {Method.APT_T: PromptModality.T, Method.APT_V: PromptModality.V,
    Method.APT_VL: PromptModality.VL}[method]
  return train_apt(data, model_factory, cfg, modality, **kwargs)

## Encoders are pretrained once per process and shared by every factory
## with the same backbone, training split and template.  Only the most
## recently used ENCODER_CACHE_SIZE encoders are kept.
_encoder_cache = collections.OrderedDict()
ENCODER_CACHE_SIZE = 4

class ModelFactory():
  """
  Builds the frozen encoder shared by every model of an experiment and
  fresh, seeded PromptSets for each role.

  \param backbone A BackboneConfig.
  \param train_set The full training Dataset: its class names define the
    class prompts and its images are used for backbone pretraining.
  \param template The class prompt template.
  \param depth Default prompt depth.
  \param length Prompt tokens per layer.
  """

  def __init__(self, backbone, train_set, template=DEFAULT_TEMPLATE,
      depth=DEFAULT_PROMPT_DEPTH, length=DEFAULT_PROMPT_LENGTH, progress=False):
    self.backbone = backbone
    self.train_set = train_set
    self.template = template
    self.depth = depth
    self.length = length
    self.progress = progress
    texts = [template.replace(CLASS_PLACEHOLDER, n.replace('_', ' '))
      for n in train_set.class_names]
    ## The Vocabulary built from the template and the class names.
    self.vocab = Vocabulary.from_texts(texts, backbone.context_length)
    ## Token ids of every class prompt, one row per class.
    self.class_tokens = build_class_prompts(train_set.class_names, template, self.vocab)
    self._encoder = None

  def describe(self):
    return {'backbone': dataclasses.asdict(self.backbone),
      'dataset': dataset_digest(self.train_set), 'template': self.template,
      'depth': self.depth, 'length': self.length}

  def encoder(self):
    if self._encoder is not None:
      return self._encoder
    key = canonical_digest({k: v for k, v in self.describe().items()
      if k not in ('depth', 'length')})
    if key in _encoder_cache:
      _encoder_cache.move_to_end(key)
    else:
      logger.info('building %s-layer encoder', self.backbone.image_layers)
      model = build_encoder(self.backbone, self.vocab)
      ts = self.train_set
      pretrain_backbone(model, ts.images, ts.labels, self.class_tokens, self.progress)
      _encoder_cache[key] = model
      while len(_encoder_cache) > ENCODER_CACHE_SIZE:
        _encoder_cache.popitem(last=False)
    self._encoder = _encoder_cache[key]
    return self._encoder

  def prompted(self, role, seed, modality=PromptModality.VL, depth=None):
    """
    Returns a PromptedModel with fresh prompts for \p role ('teacher' or
    'student'), seeded from derive_seed(seed, role + '_prompts').
    """
    encoder = self.encoder()
    prompts = init_prompts(encoder, depth or self.depth, self.length, modality,
      derive_seed(seed, f"{role}_prompts"))
    return PromptedModel(encoder, prompts, self.class_tokens)

  def restore(self, prompts):
    """
    Wraps trained \p prompts with this factory's encoder and class prompts.
    """
    return PromptedModel(self.encoder(), prompts, self.class_tokens)

def _prompt_tensors(prompts):
  if prompts is None:
    return None
  return {'visual': [p.detach().clone() for p in prompts.visual_prompts],
    'textual': [p.detach().clone() for p in prompts.textual_prompts],
    'depth': prompts.depth, 'length': prompts.length}

def _prompt_set(data):
  if data is None:
    return None
  return PromptSet(data['visual'], data['textual'], data['depth'], data['length'])

def manifest_fields(defense):
  fields = {
    'format_version': str(CHECKPOINT_FORMAT_VERSION),
    'method': defense.method.value,
    'config_hash': defense.config_hash,
    'architecture_digest': defense.architecture_digest,
    'epochs': str(defense.epochs),
    'seed': str(defense.seed),
    'student_modality': defense.student_prompts.modality.value,
    'prompt_depth': str(defense.student_prompts.depth),
    'prompt_length': str(defense.student_prompts.length),
  }
  for key, value in sorted(defense.final_metrics.items()):
    fields[f"final_{key}"] = value if isinstance(value, str) else f"{value:.6g}"
  return fields

def save_defense(defense, path):
  """
  Writes \p defense to the checkpoint directory \p path: the prompt tensors
  and history in prompts.pt, the key: value manifest in manifest.txt.
  """
  os.makedirs(path, exist_ok=True)
  archive = {
    'format_version': CHECKPOINT_FORMAT_VERSION,
    'student': _prompt_tensors(defense.student_prompts),
    'teacher': _prompt_tensors(defense.teacher_prompts),
    'history': defense.history,
    'pretune_history': defense.pretune_history,
  }
  torch.save(archive, os.path.join(path, CHECKPOINT_PROMPTS_FILE))
  with open(os.path.join(path, CHECKPOINT_MANIFEST_FILE), 'w') as f:
    for key, value in manifest_fields(defense).items():
      f.write(f"{key}: {value}\n")
  return path

def read_manifest(path):
  manifest_path = os.path.join(path, CHECKPOINT_MANIFEST_FILE)
  try:
    with open(manifest_path) as f:
      lines = f.read().splitlines()
  except OSError as e:
    raise EvaluationError(f"Cannot read checkpoint manifest {manifest_path!r}: "
      f"{e.strerror}.") from e
  fields = {}
  for line in lines:
    if line.strip():
      key, sep, value = line.partition(':')
      if not sep:
        raise EvaluationError(f"Malformed manifest line {line!r} in {manifest_path!r}.")
      fields[key.strip()] = value.strip()
  return fields

def load_defense(path):
  """
  Reads a checkpoint written by save_defense().
  """
  fields = read_manifest(path)
  if fields.get('format_version') != str(CHECKPOINT_FORMAT_VERSION):
    raise EvaluationError(f"Checkpoint {path!r} has format version "
      f"{fields.get('format_version')!r}, expected {CHECKPOINT_FORMAT_VERSION}.")
  try:
    archive = torch.load(os.path.join(path, CHECKPOINT_PROMPTS_FILE),
      weights_only=True)
  except OSError as e:
    raise EvaluationError(f"Cannot read prompts of checkpoint {path!r}.") from e
  missing = [k for k in ('method', 'config_hash', 'architecture_digest', 'seed')
    if k not in fields]
  if missing:
    raise EvaluationError(f"Checkpoint {path!r} manifest lacks {', '.join(missing)}.")
  try:
    return TrainedDefense(Method(fields['method']), _prompt_set(archive['student']),
      _prompt_set(archive['teacher']), fields['config_hash'], archive['history'],
      fields['architecture_digest'], int(fields['seed']),
      archive.get('pretune_history', []))
  except (KeyError, ValueError) as e:
    raise EvaluationError(f"Checkpoint {path!r} is malformed: {e}.") from e

def defense_digest(defense):
  """
  Digest of a trained defense: both prompt sets, bit for bit, and its
  manifest fields.  Two runs with the same configuration and seed must
  produce the same digest.
  """
  return canonical_digest({
    'student': defense.student_prompts.digest(),
    'teacher': None if defense.teacher_prompts is None else defense.teacher_prompts.digest(),
    'manifest': manifest_fields(defense),
  })
