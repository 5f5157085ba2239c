import itertools

import pytest
import torch
from torch.autograd import gradcheck

from apd_errors import AttackError, ConfigurationError
from apd_protocol import *
from attack_engine import (AttackBudget, cross_entropy_loss,
  cw_margin_loss, evaluation_budget, ja_attack, kl_attack, kl_per_example,
  parse_epsilon, pgd_attack, strong_eval_attack, training_budget)
from bimodal_core import parameter_digest

def linear_model(dim, classes, seed, dtype=torch.float64):
  g = torch.Generator().manual_seed(seed)
  w = torch.randn(dim, classes, generator=g, dtype=dtype)
  b = torch.randn(classes, generator=g, dtype=dtype)
  return lambda x: x.flatten(1) @ w + b, w

def random_batch(n, seed, dtype=torch.float64):
  g = torch.Generator().manual_seed(seed)
  x = torch.rand(n, 3, 2, 2, generator=g, dtype=dtype)
  y = torch.randint(0, 2, (n,), generator=g)
  return x, y

class TestBudgets:

  def test_parse_epsilon(self):
    assert parse_epsilon('1/255') == 1 / 255
    assert parse_epsilon(' 4/255 ') == 4 / 255
    assert parse_epsilon(0.5) == 0.5
    assert parse_epsilon('0.25') == 0.25
    for bad in ('abc', '1/0', True):
      with pytest.raises(ConfigurationError):
        parse_epsilon(bad)

  def test_training_budget(self):
    b = training_budget()
    assert b.epsilon == DEFAULT_EPSILON
    assert b.steps == 3
    assert b.step_size == pytest.approx(2 * DEFAULT_EPSILON / 3)
    assert not b.random_start

  def test_evaluation_budget(self):
    b = evaluation_budget('1/255')
    assert b.steps == 100
    assert b.step_size == pytest.approx(DEFAULT_EPSILON / 4)
    assert b.random_start and b.restarts == 1

  def test_zero_radius_budgets(self):
    assert training_budget(0).step_size == 0 and training_budget(0).steps == 3
    assert evaluation_budget(0.0).epsilon == 0
    forward, _ = linear_model(12, 2, 0)
    x, y = random_batch(3, 0)
    adv = pgd_attack(forward, x, y, training_budget(0))
    assert torch.equal(adv.images, x)

  @pytest.mark.parametrize('changes', [dict(epsilon=-0.1), dict(steps=-1),
    dict(step_size=0.0), dict(restarts=0), dict(loss_kind='hinge')])
  def test_invalid(self, changes):
    with pytest.raises(ConfigurationError):
      AttackBudget(**changes)

class TestLosses:

  def test_cw_margin(self):
    logits = torch.tensor([[3.0, 1.0, 2.0], [0.0, 5.0, 1.0]])
    y = torch.tensor([0, 0])
    torch.testing.assert_close(cw_margin_loss(logits, y), torch.tensor([-1.0, 5.0]))

  def test_kl_is_zero_for_identical_logits(self):
    p = torch.randn(4, 5)
    assert kl_per_example(p, p).abs().max() <= 1e-9
    assert (kl_per_example(p, torch.randn(4, 5)) >= 0).all()

  def test_kl_gradient_matches_the_closed_form(self):
    g = torch.Generator().manual_seed(5)
    s = torch.randn(4, 3, generator=g, dtype=torch.float64, requires_grad=True)
    q = torch.randn(4, 3, generator=g, dtype=torch.float64)
    kl = kl_per_example(s, q)
    grad, = torch.autograd.grad(kl.sum(), s)
    log_p, log_q = s.detach().log_softmax(dim=1), q.log_softmax(dim=1)
    # d KL(p || q) / d s_k = p_k * (log p_k - log q_k - KL)
    expected = log_p.exp() * (log_p - log_q - kl.detach()[:, None])
    torch.testing.assert_close(grad, expected, rtol=1e-10, atol=1e-12)

    same = s.detach().clone().requires_grad_(True)
    kl = kl_per_example(same, s.detach())
    grad, = torch.autograd.grad(kl.sum(), same)
    assert kl.abs().max() <= 1e-12
    assert grad.abs().max() <= 1e-12

  def test_ce_objective_gradcheck(self):
    forward, _ = linear_model(12, 2, 0)
    x, y = random_batch(3, 0)
    x.requires_grad_(True)
    assert gradcheck(lambda x: cross_entropy_loss(forward(x), y), (x,),
      eps=1e-6, atol=1e-6, rtol=1e-4)

class TestPgd:

  def test_budget_soundness(self):
    for trial in range(3334):
      forward, _ = linear_model(12, 2, trial, torch.float32)
      teacher, _ = linear_model(12, 2, trial + 1000, torch.float32)
      x, y = random_batch(4, trial, torch.float32)
      eps = [0.0, 1 / 255, 8 / 255, 0.5][trial % 4]
      budget = AttackBudget(epsilon=eps, steps=3, step_size=max(eps, 1e-3) / 2,
        restarts=1 + trial % 2)
      for adv in (pgd_attack(forward, x, y, budget, seed=trial),
          kl_attack(forward, teacher, x, y, budget, seed=trial),
          ja_attack(forward, teacher, x, y, budget, seed=trial)):
        assert adv.within_budget()
        assert (adv.images - x).abs().max().item() <= eps + 1e-6

  def test_linear_one_step_optimum(self):
    for trial in range(100):
      forward, w = linear_model(12, 2, trial)
      x, y = random_batch(5, trial)
      eps = 0.05
      budget = AttackBudget(epsilon=eps, steps=1, step_size=2 * eps,
        random_start=False)
      adv = pgd_attack(forward, x, y, budget)
      direction = (w[:, 1] - w[:, 0]).view(1, 3, 2, 2)
      direction = torch.where(y.view(-1, 1, 1, 1) == 0, direction, -direction)
      expected = torch.where(direction > 0, torch.clamp(x + eps, max=1),
        torch.clamp(x - eps, min=0))
      torch.testing.assert_close(adv.images, expected, rtol=0, atol=1e-6)

  def test_strong_attack_matches_vertex_enumeration(self):
    for trial in range(100):
      forward, w = linear_model(12, 2, trial)
      x, y = random_batch(1, trial)
      eps = 0.03
      lower = torch.clamp(x - eps, min=0).flatten()
      upper = torch.clamp(x + eps, max=1).flatten()
      corners = torch.tensor(list(itertools.product((0, 1), repeat=12)),
        dtype=torch.bool)
      vertices = torch.where(corners, upper, lower).view(-1, 3, 2, 2)
      best = cw_margin_loss(forward(vertices), y.expand(len(vertices))).max().item()
      budget = evaluation_budget(eps, restarts=2)
      adv = strong_eval_attack(forward, x, y, budget, seed=trial)
      found = cw_margin_loss(forward(adv.images), y).item()
      assert found == pytest.approx(best, abs=1e-6)

  def test_zero_epsilon_leaves_images_unchanged(self):
    forward, _ = linear_model(12, 2, 0)
    x, y = random_batch(3, 0)
    adv = pgd_attack(forward, x, y, AttackBudget(epsilon=0.0, steps=5, step_size=0.01))
    torch.testing.assert_close(adv.images, x, rtol=0, atol=0)

  def test_restarts_never_lower_the_loss(self):
    forward, _ = linear_model(12, 3, 1)
    x, y = random_batch(8, 1)
    budget = AttackBudget(epsilon=0.02, steps=2, step_size=0.005)
    single = pgd_attack(forward, x, y, budget, seed=4)
    multi = pgd_attack(forward, x, y, budget.replace(restarts=4), seed=4)
    assert (cross_entropy_loss(forward(multi.images), y) >=
      cross_entropy_loss(forward(single.images), y)).all()

  def test_seeded(self):
    forward, _ = linear_model(12, 2, 2)
    x, y = random_batch(4, 2)
    budget = evaluation_budget(0.03, steps=3)
    a = pgd_attack(forward, x, y, budget, seed=9)
    b = pgd_attack(forward, x, y, budget, seed=9)
    assert torch.equal(a.images, b.images)

  def test_model_parameters_are_untouched(self):
    model = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(12, 3))
    before = parameter_digest(model)
    x = torch.rand(4, 3, 2, 2)
    pgd_attack(model, x, torch.tensor([0, 1, 2, 0]), evaluation_budget(0.1, steps=4))
    assert parameter_digest(model) == before
    assert all(p.grad is None for p in model.parameters())

  def test_non_finite_objective(self):
    x, y = random_batch(2, 0)
    with pytest.raises(AttackError, match='batch 7'):
      pgd_attack(lambda x: x.flatten(1)[:, :2] * float('nan'), x, y,
        evaluation_budget(0.1, steps=1), batch_id=7)

class TestAdaptiveAttacks:

  def test_zero_kl_weight_is_pgd(self):
    student, _ = linear_model(12, 3, 0)
    teacher, _ = linear_model(12, 3, 1)
    x, y = random_batch(6, 0)
    budget = evaluation_budget(0.05, steps=10)
    a = kl_attack(student, teacher, x, y, budget, kl_weight=0.0, seed=3)
    b = pgd_attack(student, x, y, budget, seed=3)
    assert torch.equal(a.images, b.images)

  def test_student_only_joint_attack_is_pgd(self):
    student, _ = linear_model(12, 3, 0)
    teacher, _ = linear_model(12, 3, 1)
    x, y = random_batch(6, 0)
    budget = evaluation_budget(0.05, steps=10)
    a = ja_attack(student, teacher, x, y, budget, weights=(1.0, 0.0), seed=3)
    b = pgd_attack(student, x, y, budget, seed=3)
    assert torch.equal(a.images, b.images)

  def test_teacher_only_joint_attack_is_pgd_on_the_teacher(self):
    student, _ = linear_model(12, 3, 0)
    teacher, _ = linear_model(12, 3, 1)
    x, y = random_batch(6, 0)
    budget = evaluation_budget(0.05, steps=10)
    a = ja_attack(student, teacher, x, y, budget, weights=(0.0, 1.0), seed=3)
    b = pgd_attack(teacher, x, y, budget, seed=3)
    assert torch.equal(a.images, b.images)

  def test_joint_attack_step_follows_the_summed_gradients(self):
    eps = 0.05
    budget = AttackBudget(epsilon=eps, steps=1, step_size=2 * eps, random_start=False)
    for trial in range(20):
      student, w_s = linear_model(12, 3, 2 * trial)
      teacher, w_t = linear_model(12, 3, 2 * trial + 1)
      x, y = random_batch(4, trial)
      weights = (0.7, 0.3)
      adv = ja_attack(student, teacher, x, y, budget, weights=weights)
      onehot = torch.nn.functional.one_hot(y, 3).double()
      # d CE / d x = W (softmax(logits) - onehot(y)) for a linear model.
      grad = sum(w * (f(x).softmax(dim=1) - onehot) @ m.T
        for w, f, m in zip(weights, (student, teacher), (w_s, w_t)))
      grad = grad.view_as(x)
      expected = torch.where(grad > 0, torch.clamp(x + eps, max=1),
        torch.where(grad < 0, torch.clamp(x - eps, min=0), x))
      torch.testing.assert_close(adv.images, expected, rtol=0, atol=1e-12)

  def test_kl_attack_uses_clean_teacher_logits(self):
    calls = []
    student, _ = linear_model(12, 3, 0)
    teacher_fn, _ = linear_model(12, 3, 1)

    def teacher(x):
      calls.append(x.clone())
      return teacher_fn(x)

    x, y = random_batch(2, 0)
    kl_attack(student, teacher, x, y, evaluation_budget(0.05, steps=4))
    assert len(calls) == 1
    assert torch.equal(calls[0], x)

  def test_negative_weights(self):
    f, _ = linear_model(12, 2, 0)
    x, y = random_batch(1, 0)
    with pytest.raises(ConfigurationError):
      kl_attack(f, f, x, y, evaluation_budget(), kl_weight=-1)
    with pytest.raises(ConfigurationError):
      ja_attack(f, f, x, y, evaluation_budget(), weights=(1, -1))

  def test_strong_attack_needs_restarts(self):
    f, _ = linear_model(12, 2, 0)
    x, y = random_batch(1, 0)
    with pytest.raises(ConfigurationError):
      strong_eval_attack(f, x, y, evaluation_budget())
