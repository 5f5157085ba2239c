# See LICENSE.txt for details.

import concurrent.futures
import dataclasses
import json
import logging
import math
import re
import time

import numpy as np
import torch
from tqdm import tqdm

from apd_protocol import *
from apd_errors import ConfigurationError, EvaluationError
from attack_engine import (evaluation_budget, ja_attack, kl_attack, pgd_attack,
  strong_eval_attack)
from bimodal_core import predict
from data_pipeline import sample_eval_subset
from distill_trainer import derive_seed

## \file eval_harness.py
##
## Natural and robust accuracy of trained defenses, adaptive attacks against
## distilled defenses, parameter sweeps, and the table, record and plot
## outputs built from them.

logger = logging.getLogger(__name__)

## Table row order of the methods.
METHOD_ORDER = ('ADVPT', 'APT_T', 'APT_V', 'APT_VL', 'APD', 'APD_OFFLINE',
  'APD_T', 'APD_V')

## The attack whose robust accuracy is the Adv. addend of the Sum column.
PRIMARY_ATTACK = ATTACK_PGD100

PGD_PATTERN = re.compile(r'^pgd(\d+)$')

@dataclasses.dataclass
class EvalReport:
  """
  Accuracies of one defense on one test subset, in percent.
  """
  method: str
  dataset: str
  seed: int
  natural_acc: float
  ## Robust accuracy per attack identifier.
  robust_acc: dict
  sum_metric: float
  config_hash: str
  runtime_seconds: float
  ## Number of test examples evaluated; smaller than the test split when
  ## the evaluation was run on a subset.
  test_examples: int = 0
  attack_seed: int = 0

  def __post_init__(self):
    for name, value in [('natural', self.natural_acc)] + list(self.robust_acc.items()):
      if not 0 <= value <= 100:
        raise EvaluationError(f"Accuracy {name}={value} is outside [0, 100].")
    expected = self.natural_acc + self.robust_acc.get(PRIMARY_ATTACK, 0.0)
    if abs(self.sum_metric - expected) > 1e-9:
      raise EvaluationError(f"sum_metric {self.sum_metric} does not equal "
        f"natural_acc + robust_acc[{PRIMARY_ATTACK!r}] = {expected}.")

  def to_dict(self):
    return dataclasses.asdict(self)

  @classmethod
  def from_dict(cls, data):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
      raise EvaluationError(f"Unknown report fields {sorted(unknown)}.")
    return cls(**data)

  def same_results(self, other):
    """
    Returns True if \p other has the same fields apart from the runtime.
    """
    mine, theirs = self.to_dict(), other.to_dict()
    mine.pop('runtime_seconds')
    theirs.pop('runtime_seconds')
    return mine == theirs

def _report(method, dataset, seed, natural, robust, config_hash, started,
    test_examples, attack_seed):
  robust = {k: robust[k] for k in sorted(robust)}
  return EvalReport(method, dataset, seed, natural, robust,
    natural + robust.get(PRIMARY_ATTACK, 0.0), config_hash,
    time.monotonic() - started, test_examples, attack_seed)

def _percent(correct, total):
  return round(100.0 * correct / total, 1) if total else 0.0

@dataclasses.dataclass
class SweepEntry:
  value: object
  seed: int
  report: EvalReport = None
  ## 'ok' or 'failed'.
  status: str = 'ok'
  error: str = ''

@dataclasses.dataclass
class SweepResult:
  """
  One entry per (value, seed) pair of a sweep along \p axis.
  """
  axis: str
  values: list
  reports: list

  @property
  def failures(self):
    return [e for e in self.reports if e.status != 'ok']

  def summary(self, attack=PRIMARY_ATTACK):
    """
    Returns one (value, natural mean, natural std, robust mean, robust std,
    successful runs) tuple per sweep value.
    """
    rows = []
    for value in self.values:
      ok = [e.report for e in self.reports if e.value == value and e.status == 'ok']
      nat = np.array([r.natural_acc for r in ok], dtype=np.float64)
      adv = np.array([r.robust_acc.get(attack, np.nan) for r in ok], dtype=np.float64)
      stats = [float(a.mean()) if len(a) else math.nan for a in (nat, adv)]
      spread = [float(a.std()) if len(a) else math.nan for a in (nat, adv)]
      rows.append((value, stats[0], spread[0], stats[1], spread[1], len(ok)))
    return rows

def attack_budget(attack, epsilon=DEFAULT_EPSILON):
  """
  Returns the AttackBudget of an attack identifier: 'pgd<N>' is an N-step
  evaluation PGD, 'strong' the multi-restart two-loss attack.
  """
  if attack == ATTACK_STRONG:
    return evaluation_budget(epsilon, restarts=STRONG_ATTACK_RESTARTS)
  match = PGD_PATTERN.match(attack)
  if match:
    return evaluation_budget(epsilon, steps=int(match.group(1)))
  raise ConfigurationError(f"Unknown attack {attack!r}; expected 'none', "
    "'strong' or 'pgd<steps>'.")

class _Evaluator():
  # Runs a fixed list of attacks batch by batch and counts correct
  # predictions.  Every batch draws its attack seed from its index, so
  # results do not depend on how batches are spread over workers.

  def __init__(self, images, labels, attacks, attack_seed):
    self.images = images
    self.labels = labels
    self.attacks = attacks
    self.attack_seed = attack_seed

  def run_batch(self, start, batch_size):
    x = self.images[start:start + batch_size]
    y = self.labels[start:start + batch_size]
    batch_index = start // batch_size
    seed = derive_seed(self.attack_seed, f"batch/{batch_index}")
    correct = {}
    for name, attack in self.attacks.items():
      correct[name] = attack(x, y, seed, batch_index)
    if ATTACK_STRONG in correct and PRIMARY_ATTACK in correct:
      # The strong attack's worst case includes the PGD-100 run.
      correct[ATTACK_STRONG] = correct[ATTACK_STRONG] & correct[PRIMARY_ATTACK]
    return {name: int(c.sum()) for name, c in correct.items()}

  def run(self, batch_size, workers=1, progress=False, desc='Eval'):
    starts = list(range(0, len(self.labels), batch_size))
    if workers > 1:
      with concurrent.futures.ThreadPoolExecutor(workers) as pool:
        counts = list(tqdm(pool.map(lambda s: self.run_batch(s, batch_size), starts),
          total=len(starts), desc=desc, disable=not progress))
    else:
      counts = [self.run_batch(s, batch_size)
        for s in tqdm(starts, desc=desc, disable=not progress)]
    totals = {name: 0 for name in self.attacks}
    for batch_counts in counts:
      for name, count in batch_counts.items():
        totals[name] += count
    return {name: _percent(count, len(self.labels)) for name, count in totals.items()}

def _check_architecture(defense, model_factory):
  expected = model_factory.encoder().architecture_digest()
  if defense.architecture_digest != expected:
    raise EvaluationError(f"Checkpoint architecture digest "
      f"{defense.architecture_digest[:12]} does not match the configured "
      f"encoder {expected[:12]}; refusing to evaluate.")

def _test_subset(test_set, eval_examples, attack_seed):
  indices = sample_eval_subset(test_set, eval_examples,
    derive_seed(attack_seed, 'eval_subset'))
  return test_set.images[indices], test_set.labels[indices]

def evaluate(defense, test_set, attacks, model_factory, epsilon=DEFAULT_EPSILON,
    eval_examples=DEFAULT_EVAL_EXAMPLES, attack_seed=0,
    batch_size=DEFAULT_EVAL_BATCH_SIZE, workers=1, progress=False):
  """
  Measures natural accuracy and robust accuracy under every attack in
  \p attacks on a class-stratified test subset.

  The subset and the per-batch attack seeds depend only on \p attack_seed,
  so every defense evaluated with the same arguments sees the same images
  and the same random starts.

  \param defense A TrainedDefense; its student prompts are evaluated.
  \param test_set The test Dataset.
  \param attacks Attack identifiers; must include 'none' and 'pgd100'.
    Others: 'strong' and 'pgd<N>'.
  \param model_factory The ModelFactory the defense was trained with.
  \param eval_examples Subset size, or None for the full test split.
  \param workers Number of threads that evaluate batches concurrently.
  \return An EvalReport.
  """
  attacks = list(dict.fromkeys(attacks))
  missing = {ATTACK_NONE, ATTACK_PGD100} - set(attacks)
  if missing:
    raise ConfigurationError(f"Evaluation needs the attacks {sorted(missing)}.")
  _check_architecture(defense, model_factory)
  started = time.monotonic()
  model = model_factory.restore(defense.student_prompts)
  forward = model.attack_forward()

  def natural(x, y, seed, batch_index):
    with torch.no_grad():
      return predict(forward(x)) == y

  def adversarial(budget, strong):
    def run(x, y, seed, batch_index):
      if strong:
        adv = strong_eval_attack(forward, x, y, budget, seed, batch_index)
      else:
        adv = pgd_attack(forward, x, y, budget, seed, batch_index)
      with torch.no_grad():
        return predict(forward(adv.images)) == y
    return run

  fns = {}
  for name in attacks:
    if name == ATTACK_NONE:
      fns[name] = natural
    else:
      fns[name] = adversarial(attack_budget(name, epsilon), name == ATTACK_STRONG)

  images, labels = _test_subset(test_set, eval_examples, attack_seed)
  accuracy = _Evaluator(images, labels, fns, attack_seed).run(batch_size,
    workers, progress, defense.method.value)
  robust = {name: acc for name, acc in accuracy.items() if name != ATTACK_NONE}
  robust[ATTACK_NONE] = accuracy[ATTACK_NONE]
  report = _report(defense.method.value, test_set.name, defense.seed,
    accuracy[ATTACK_NONE], robust, defense.config_hash, started, len(labels),
    attack_seed)
  logger.info('%s: natural %.1f, pgd100 %.1f', report.method,
    report.natural_acc, report.robust_acc[ATTACK_PGD100])
  return report

def evaluate_adaptive(defense, test_set, model_factory, budget=None,
    kl_weight=DEFAULT_KL_WEIGHT, ja_weights=DEFAULT_JA_WEIGHTS,
    eval_examples=DEFAULT_EVAL_EXAMPLES, attack_seed=0,
    batch_size=DEFAULT_EVAL_BATCH_SIZE, workers=1, progress=False):
  """
  Robust accuracy of a distilled student under attacks that also use its
  trained teacher: the KL-enhanced attack and the joint attack.  PGD-100 is
  evaluated alongside with the same seeds for comparison.

  \param budget The AttackBudget of all three attacks; defaults to the
    100-step evaluation budget.
  """
  if defense.teacher_prompts is None:
    raise EvaluationError(f"{defense.method.value} has no teacher prompts; "
      'adaptive attacks need a distilled defense.')
  _check_architecture(defense, model_factory)
  budget = budget or evaluation_budget()
  started = time.monotonic()
  student = model_factory.restore(defense.student_prompts).attack_forward()
  teacher = model_factory.restore(defense.teacher_prompts).attack_forward()

  def accuracy_after(attack):
    def run(x, y, seed, batch_index):
      adv = attack(x, y, seed, batch_index)
      with torch.no_grad():
        return predict(student(adv.images)) == y
    return run

  def natural(x, y, seed, batch_index):
    with torch.no_grad():
      return predict(student(x)) == y

  fns = {
    ATTACK_NONE: natural,
    ATTACK_PGD100: accuracy_after(lambda x, y, s, b:
      pgd_attack(student, x, y, budget, s, b)),
    ATTACK_KL: accuracy_after(lambda x, y, s, b:
      kl_attack(student, teacher, x, y, budget, kl_weight, s, b)),
    ATTACK_JA: accuracy_after(lambda x, y, s, b:
      ja_attack(student, teacher, x, y, budget, ja_weights, s, b)),
  }
  images, labels = _test_subset(test_set, eval_examples, attack_seed)
  accuracy = _Evaluator(images, labels, fns, attack_seed).run(batch_size,
    workers, progress, f"{defense.method.value} adaptive")
  return _report(defense.method.value, test_set.name, defense.seed,
    accuracy[ATTACK_NONE], dict(accuracy), defense.config_hash, started,
    len(labels), attack_seed)

def _sweep_job(job):
  run_fn, override_fn, base_config, axis, value, seed = job
  config = override_fn(base_config, SWEEP_AXES[axis], value)
  return run_fn(config, seed)

def sweep(axis, values, base_config, seeds, run_fn, override_fn, workers=1,
    progress=False):
  """
  Trains and evaluates one defense per (value, seed) pair.

  A run that raises is recorded as a failed SweepEntry and the sweep goes
  on.  With \p workers > 1 the runs are spread over a process pool; entries
  are always returned in (value, seed) order.

  \param axis 'prompt_depth', 'prompt_length' or 'beta'.
  \param base_config The configuration every run starts from.
  \param run_fn Picklable function (config, seed) -> EvalReport.
  \param override_fn Picklable function (config, dotted path, value) ->
    config.
  """
  if axis not in SWEEP_AXES:
    raise ConfigurationError(f"Unknown sweep axis {axis!r}; expected one of "
      f"{sorted(SWEEP_AXES)}.")
  values, seeds = list(values), list(seeds)
  if not values:
    raise ConfigurationError('A sweep needs at least one value.')
  if not seeds:
    raise ConfigurationError('A sweep needs at least one seed.')
  # Validates every value before anything is trained.
  for value in values:
    override_fn(base_config, SWEEP_AXES[axis], value)

  jobs = [(run_fn, override_fn, base_config, axis, v, s) for v in values for s in seeds]
  entries = []
  if workers > 1:
    with concurrent.futures.ProcessPoolExecutor(workers) as pool:
      futures = [pool.submit(_sweep_job, job) for job in jobs]
      for job, future in zip(jobs, tqdm(futures, desc=f"Sweep {axis}",
          disable=not progress)):
        entries.append(_sweep_entry(job, future.result))
  else:
    for job in tqdm(jobs, desc=f"Sweep {axis}", disable=not progress):
      entries.append(_sweep_entry(job, lambda: _sweep_job(job)))
  result = SweepResult(axis, values, entries)
  if result.failures:
    logger.warning('%d of %d sweep runs failed', len(result.failures), len(entries))
  return result

def _sweep_entry(job, run):
  value, seed = job[4], job[5]
  try:
    return SweepEntry(value, seed, run())
  except Exception as e:
    logger.error('sweep run %s=%s seed %s failed: %s', job[3], value, seed, e)
    return SweepEntry(value, seed, None, 'failed', f"{type(e).__name__}: {e}")

def _method_rank(method):
  if method in METHOD_ORDER:
    return (METHOD_ORDER.index(method), method)
  return (len(METHOD_ORDER), method)

def render_table(reports):
  """
  Renders reports as a fixed-width text table with Nat., one column per
  further attack, Adv. (PGD-100) and Sum.  Rows are ordered by method, then
  dataset, then seed.
  """
  reports = sorted(reports, key=lambda r: (_method_rank(r.method), r.dataset, r.seed))
  extra = sorted({a for r in reports for a in r.robust_acc} -
    {ATTACK_NONE, PRIMARY_ATTACK})
  header = ['Method', 'Dataset', 'Seed', 'N', 'Nat.'] + extra + ['Adv.', 'Sum']
  rows = [header]
  for r in reports:
    cells = [r.method, r.dataset, str(r.seed), str(r.test_examples),
      f"{r.natural_acc:.1f}"]
    cells += [f"{r.robust_acc[a]:.1f}" if a in r.robust_acc else '-' for a in extra]
    cells += [f"{r.robust_acc.get(PRIMARY_ATTACK, 0.0):.1f}", f"{r.sum_metric:.1f}"]
    rows.append(cells)
  widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
  lines = []
  for n, row in enumerate(rows):
    lines.append('  '.join(cell.ljust(w) if i < 2 else cell.rjust(w)
      for i, (cell, w) in enumerate(zip(row, widths))).rstrip())
    if n == 0:
      lines.append('  '.join('-' * w for w in widths))
  return '\n'.join(lines) + '\n'

def write_reports(reports, path):
  """
  Writes one JSON record per report to \p path.
  """
  with open(path, 'w') as f:
    for report in reports:
      f.write(json.dumps(report.to_dict(), sort_keys=True) + '\n')
  return path

def read_reports(path):
  reports = []
  with open(path) as f:
    for number, line in enumerate(f, 1):
      if not line.strip():
        continue
      try:
        reports.append(EvalReport.from_dict(json.loads(line)))
      except (ValueError, TypeError) as e:
        raise EvaluationError(f"Malformed report on line {number} of {path!r}: {e}") from e
  return reports

def plot_sweep(result, path, attack=PRIMARY_ATTACK):
  """
  Saves a PNG line plot of natural and robust accuracy (mean and standard
  deviation over seeds) against the sweep values.
  """
  import matplotlib
  matplotlib.use('Agg')
  import matplotlib.pyplot as plt

  rows = result.summary(attack)
  labels = [str(r[0]) for r in rows]
  fig, ax = plt.subplots(figsize=(6, 4))
  ax.errorbar(labels, [r[1] for r in rows], yerr=[r[2] for r in rows],
    marker='o', capsize=3, label='Natural')
  ax.errorbar(labels, [r[3] for r in rows], yerr=[r[4] for r in rows],
    marker='s', capsize=3, label=f"Robust ({attack})")
  ax.set_xlabel(result.axis.replace('_', ' '))
  ax.set_ylabel('Accuracy (%)')
  ax.set_ylim(0, 100)
  ax.grid(True, alpha=0.3)
  ax.legend()
  fig.tight_layout()
  fig.savefig(path, dpi=150)
  plt.close(fig)
  return path
