# See LICENSE.txt for details.

import dataclasses
import logging
from fractions import Fraction

import torch
import torch.nn.functional as F

from apd_protocol import *
from apd_errors import AttackError, ConfigurationError
from bimodal_core import predict

## \file attack_engine.py
##
## L-infinity inner maximization: projected gradient descent against one
## model, the two adaptive attacks against a student/teacher pair, and a
## multi-restart, two-loss evaluation attack.
##
## All attacks work in raw [0, 1] pixel space.  A model forward is any
## function mapping an image batch to a (B x C) logit tensor; normalization
## belongs inside it.

logger = logging.getLogger(__name__)

def parse_epsilon(value):
  """
  Converts an epsilon given as a number or as a fraction string such as
  "1/255" to a float.
  """
  if isinstance(value, bool):
    raise ConfigurationError(f"Invalid epsilon {value!r}.")
  if isinstance(value, (int, float)):
    return float(value)
  try:
    return float(Fraction(str(value).strip()))
  except (ValueError, ZeroDivisionError):
    raise ConfigurationError(f"Invalid epsilon {value!r}; use a decimal or a "
      'fraction such as "1/255".') from None

@dataclasses.dataclass(frozen=True)
class AttackBudget:
  """
  Radius, step schedule, restart policy and loss of an L-infinity attack.
  """
  epsilon: float = DEFAULT_EPSILON
  steps: int = EVAL_ATTACK_STEPS
  step_size: float = DEFAULT_EPSILON * EVAL_ATTACK_STEP_RATIO
  random_start: bool = True
  loss_kind: str = LOSS_CROSS_ENTROPY
  restarts: int = 1

  def __post_init__(self):
    object.__setattr__(self, 'epsilon', parse_epsilon(self.epsilon))
    object.__setattr__(self, 'step_size', parse_epsilon(self.step_size))
    if not self.epsilon >= 0:
      raise ConfigurationError(f"epsilon must be non-negative, got {self.epsilon}.")
    if not isinstance(self.steps, int) or isinstance(self.steps, bool) or self.steps < 0:
      raise ConfigurationError(f"steps must be a non-negative integer, got {self.steps!r}.")
    if self.steps > 0 and self.epsilon > 0 and not self.step_size > 0:
      raise ConfigurationError(f"step_size must be positive, got {self.step_size}.")
    if self.step_size < 0:
      raise ConfigurationError(f"step_size must be non-negative, got {self.step_size}.")
    if not isinstance(self.restarts, int) or self.restarts < 1:
      raise ConfigurationError(f"restarts must be at least 1, got {self.restarts!r}.")
    if self.loss_kind not in (LOSS_CROSS_ENTROPY, LOSS_CW_MARGIN):
      raise ConfigurationError(f"Unknown loss_kind {self.loss_kind!r}; expected "
        f"'{LOSS_CROSS_ENTROPY}' or '{LOSS_CW_MARGIN}'.")

  def replace(self, **changes):
    return dataclasses.replace(self, **changes)

def training_budget(epsilon=DEFAULT_EPSILON):
  """
  The 3-step, 2*eps/3 attack used while training, without random start.
  """
  epsilon = parse_epsilon(epsilon)
  return AttackBudget(epsilon=epsilon, steps=TRAIN_ATTACK_STEPS,
    step_size=epsilon * TRAIN_ATTACK_STEP_RATIO, random_start=False)

def evaluation_budget(epsilon=DEFAULT_EPSILON, steps=EVAL_ATTACK_STEPS, restarts=1):
  """
  The eps/4 evaluation attack (100 steps by default) with random start.
  """
  epsilon = parse_epsilon(epsilon)
  return AttackBudget(epsilon=epsilon, steps=steps,
    step_size=epsilon * EVAL_ATTACK_STEP_RATIO, random_start=True,
    restarts=restarts)

@dataclasses.dataclass
class AdversarialBatch:
  images: torch.Tensor
  clean_images: torch.Tensor
  budget: AttackBudget

  def within_budget(self):
    """
    Returns True if every pixel is inside the epsilon ball around the clean
    image and inside [0, 1].
    """
    eps = self.budget.epsilon
    x, adv = self.clean_images, self.images
    return bool(((adv <= x + eps) & (adv >= x - eps) &
      (adv >= 0) & (adv <= 1)).all())

def cross_entropy_loss(logits, y):
  return F.cross_entropy(logits, y, reduction='none')

def cw_margin_loss(logits, y):
  """
  Per-example logit of the runner-up class minus logit of the true class.
  Positive values mean the example is misclassified.
  """
  true = logits.gather(1, y[:, None]).squeeze(1)
  mask = F.one_hot(y, logits.shape[1]).bool()
  other = logits.masked_fill(mask, torch.finfo(logits.dtype).min).max(dim=1).values
  return other - true

LOSSES = {
  LOSS_CROSS_ENTROPY: cross_entropy_loss,
  LOSS_CW_MARGIN: cw_margin_loss,
}

def kl_per_example(p_logits, q_logits, temperature=1.0):
  """
  Per-example KL(softmax(p / T) || softmax(q / T)).
  """
  log_p = F.log_softmax(p_logits / temperature, dim=1)
  log_q = F.log_softmax(q_logits / temperature, dim=1)
  return F.kl_div(log_q, log_p, reduction='none', log_target=True).sum(dim=1)

def _project(x_adv, lower, upper):
  return torch.max(torch.min(x_adv, upper), lower)

def _run_pgd(objective, x, budget, seed, batch_id):
  # objective(x_adv) returns a per-example loss to maximize.
  x = x.detach()
  eps = budget.epsilon
  lower = torch.clamp(x - eps, min=0)
  upper = torch.clamp(x + eps, max=1)
  g = torch.Generator().manual_seed(seed)
  best_adv, best_loss = None, None

  for restart in range(budget.restarts):
    if budget.random_start and eps > 0:
      noise = (2 * torch.rand(x.shape, generator=g, dtype=x.dtype) - 1) * eps
      x_adv = _project(x + noise, lower, upper)
    else:
      x_adv = x.clone()

    for step in range(budget.steps):
      x_adv.requires_grad_(True)
      loss = objective(x_adv)
      _check_finite(loss, batch_id)
      grad, = torch.autograd.grad(loss.sum(), x_adv, allow_unused=True)
      if grad is None:
        grad = torch.zeros_like(x_adv)
      # torch.sign(0) == 0, so dead gradients do not move the pixel.
      x_adv = _project(x_adv.detach() + budget.step_size * grad.sign(),
        lower, upper)

    with torch.no_grad():
      final = objective(x_adv)
    _check_finite(final, batch_id)
    if best_adv is None:
      best_adv, best_loss = x_adv, final
    else:
      better = final > best_loss
      best_adv = torch.where(better.view(-1, *([1] * (x.dim() - 1))), x_adv, best_adv)
      best_loss = torch.where(better, final, best_loss)
    logger.debug('restart %d mean loss %.4f', restart, final.mean().item())

  return AdversarialBatch(best_adv.detach(), x, budget)

def _check_finite(loss, batch_id):
  if not torch.isfinite(loss).all():
    where = '' if batch_id is None else f" on batch {batch_id}"
    raise AttackError(f"Attack objective became non-finite{where}.")

def pgd_attack(model_forward, x, y, budget, seed=0, batch_id=None):
  """
  Maximizes budget.loss_kind of \p model_forward inside the L-infinity ball
  of radius budget.epsilon around \p x (intersected with [0, 1]) using
  sign-gradient steps.

  With several restarts, each example keeps the restart that reached the
  highest final loss.  Model parameters are never modified; only gradients
  with respect to the pixels are computed.

  \param model_forward Function mapping an image batch to logits.
  \param x Clean images in [0, 1].
  \param y Class labels.
  \param budget An AttackBudget.
  \param seed Seed of the random start noise.
  \param batch_id Optional identifier included in error messages.
  \return An AdversarialBatch.
  """
  loss_fn = LOSSES[budget.loss_kind]
  return _run_pgd(lambda x_adv: loss_fn(model_forward(x_adv), y), x, budget,
    seed, batch_id)

def kl_attack(student_forward, teacher_forward, x, y, budget,
  kl_weight=DEFAULT_KL_WEIGHT, seed=0, batch_id=None):
  """
  Adaptive attack that also pushes the student away from the teacher:
  maximizes CE(S(x'), y) + kl_weight * KL(softmax S(x') || softmax T(x)).

  The teacher logits are computed once on the clean images and held fixed.
  """
  if kl_weight < 0:
    raise ConfigurationError(f"kl_weight must be non-negative, got {kl_weight}.")
  with torch.no_grad():
    teacher_logits = teacher_forward(x.detach())

  def objective(x_adv):
    student_logits = student_forward(x_adv)
    loss = cross_entropy_loss(student_logits, y)
    if kl_weight:
      loss = loss + kl_weight * kl_per_example(student_logits, teacher_logits)
    return loss

  return _run_pgd(objective, x, budget.replace(loss_kind=LOSS_CROSS_ENTROPY),
    seed, batch_id)

def ja_attack(student_forward, teacher_forward, x, y, budget,
  weights=DEFAULT_JA_WEIGHTS, seed=0, batch_id=None):
  """
  Adaptive attack against both models at once: maximizes
  w_s * CE(S(x'), y) + w_t * CE(T(x'), y), with the teacher evaluated on the
  perturbed images at every step.
  """
  w_s, w_t = weights
  if w_s < 0 or w_t < 0:
    raise ConfigurationError(f"Joint attack weights must be non-negative, got {weights}.")

  def objective(x_adv):
    loss = torch.zeros(x_adv.shape[0], dtype=x_adv.dtype)
    if w_s:
      loss = loss + w_s * cross_entropy_loss(student_forward(x_adv), y)
    if w_t:
      loss = loss + w_t * cross_entropy_loss(teacher_forward(x_adv), y)
    return loss

  return _run_pgd(objective, x, budget.replace(loss_kind=LOSS_CROSS_ENTROPY),
    seed, batch_id)

def strong_eval_attack(model_forward, x, y, eval_budget, seed=0, batch_id=None):
  """
  Runs pgd_attack() with the cross-entropy loss and with the CW margin loss,
  eval_budget.restarts restarts each, and keeps the worst case per example:
  a successful attack if either run found one, otherwise the run with the
  larger margin.

  \sa pgd_attack()
  """
  if eval_budget.restarts < 2:
    raise ConfigurationError('strong_eval_attack needs at least 2 restarts.')
  runs = [
    pgd_attack(model_forward, x, y, eval_budget.replace(loss_kind=kind),
      seed=seed + i, batch_id=batch_id)
    for i, kind in enumerate((LOSS_CROSS_ENTROPY, LOSS_CW_MARGIN))
  ]
  with torch.no_grad():
    logits = [model_forward(run.images) for run in runs]
  success = [predict(l) != y for l in logits]
  margin = [cw_margin_loss(l, y) for l in logits]
  take_cw = (success[1] & ~success[0]) | ((success[1] == success[0]) &
    (margin[1] > margin[0]))
  shape = (-1,) + (1,) * (x.dim() - 1)
  images = torch.where(take_cw.view(shape), runs[1].images, runs[0].images)
  return AdversarialBatch(images, x.detach(), eval_budget)
