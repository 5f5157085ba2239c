#!/usr/bin/env python3
# See LICENSE.txt for details.

import argparse
import dataclasses
import datetime
import difflib
import json
import logging
import os
import sys

import yaml

from apd_protocol import *
from apd_errors import ApdError, ConfigurationError, EvaluationError
from attack_engine import AttackBudget, parse_epsilon
from bimodal_core import BackboneConfig, backbone_preset
from data_pipeline import (SYNTHETIC_SHAPES, SyntheticShapesConfig,
  load_dataset, sample_few_shot)
from distill_trainer import (DistillConfig, Method, ModelFactory,
  canonical_digest, derive_seed, load_defense, read_manifest, save_defense,
  train_defense)
from eval_harness import (attack_budget, evaluate, evaluate_adaptive,
  plot_sweep, read_reports, render_table, sweep, write_reports)

## \file experiment_cli.py
##
## Command-line entry point: reads an experiment configuration, trains
## defenses, evaluates checkpoints, runs sweeps and renders report tables.
## Every command writes a run_manifest.json listing what it produced.

logger = logging.getLogger(__name__)

@dataclasses.dataclass(frozen=True)
class DatasetConfig:
  name: str = SYNTHETIC_SHAPES
  ## Root directory of a directory dataset; unused for synthetic-shapes.
  root: str = None
  classes: int = 8
  train_per_class: int = 100
  test_per_class: int = 100
  noise: float = 0.15
  seed: int = 7

@dataclasses.dataclass(frozen=True)
class PromptConfig:
  depth: int = DEFAULT_PROMPT_DEPTH
  length: int = DEFAULT_PROMPT_LENGTH
  template: str = DEFAULT_TEMPLATE

  def __post_init__(self):
    if self.depth < 1 or self.length < 1:
      raise ConfigurationError('prompts.depth and prompts.length must be at least 1.')
    if self.template.count(CLASS_PLACEHOLDER) != 1:
      raise ConfigurationError("prompts.template must contain exactly one '{}'.")

@dataclasses.dataclass(frozen=True)
class AttackConfig:
  epsilon: float = DEFAULT_EPSILON
  train_steps: int = TRAIN_ATTACK_STEPS
  attacks: tuple = (ATTACK_NONE, ATTACK_PGD100)
  ## Also run the KL and joint attacks on distilled defenses.
  adaptive: bool = False
  kl_weight: float = DEFAULT_KL_WEIGHT
  ja_weights: tuple = DEFAULT_JA_WEIGHTS
  ## Test subset size; null evaluates the whole test split.
  eval_examples: int = DEFAULT_EVAL_EXAMPLES
  eval_batch_size: int = DEFAULT_EVAL_BATCH_SIZE
  attack_seed: int = 0
  ## Threads per evaluation.
  workers: int = 1

  def __post_init__(self):
    object.__setattr__(self, 'epsilon', parse_epsilon(self.epsilon))
    object.__setattr__(self, 'attacks', tuple(self.attacks))
    object.__setattr__(self, 'ja_weights', tuple(float(w) for w in self.ja_weights))
    for name in self.attacks:
      if name != ATTACK_NONE:
        attack_budget(name, self.epsilon)
    missing = {ATTACK_NONE, ATTACK_PGD100} - set(self.attacks)
    if missing:
      raise ConfigurationError(f"attack.attacks must include {sorted(missing)}.")
    if len(self.ja_weights) != 2:
      raise ConfigurationError('attack.ja_weights must have two entries.')
    if self.eval_examples is not None and self.eval_examples < 1:
      raise ConfigurationError('attack.eval_examples must be positive or null.')
    if self.eval_batch_size < 1 or self.workers < 1:
      raise ConfigurationError('attack.eval_batch_size and attack.workers must be positive.')

  def train_budget(self):
    return AttackBudget(epsilon=self.epsilon, steps=self.train_steps,
      step_size=self.epsilon * TRAIN_ATTACK_STEP_RATIO, random_start=False)

@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
  """
  Everything one experiment depends on.  to_dict() is the canonical form;
  its digest is the config_hash recorded in checkpoints and reports.
  """
  method: str = Method.APD.value
  dataset: DatasetConfig = dataclasses.field(default_factory=DatasetConfig)
  backbone: BackboneConfig = dataclasses.field(default_factory=BackboneConfig)
  prompts: PromptConfig = dataclasses.field(default_factory=PromptConfig)
  distill: DistillConfig = dataclasses.field(default_factory=DistillConfig)
  attack: AttackConfig = dataclasses.field(default_factory=AttackConfig)
  seeds: tuple = (0,)
  ## Output directory; null derives one from APD_OUTPUT_ROOT, the method
  ## and the config hash.
  output_dir: str = None

  def __post_init__(self):
    try:
      object.__setattr__(self, 'method', Method(self.method).value)
    except ValueError:
      raise ConfigurationError(f"Unknown method {self.method!r}; expected one of "
        f"{[m.value for m in Method]}.") from None
    object.__setattr__(self, 'seeds', tuple(self.seeds))
    if not self.seeds:
      raise ConfigurationError('seeds must not be empty.')
    layers = min(self.backbone.image_layers, self.backbone.text_layers)
    if self.prompts.depth > layers:
      raise ConfigurationError(f"prompts.depth {self.prompts.depth} exceeds the "
        f"{layers} layers of the backbone.")
    if self.distill.train_budget != self.attack.train_budget():
      object.__setattr__(self, 'distill', dataclasses.replace(self.distill,
        train_budget=self.attack.train_budget()))

  def to_dict(self):
    distill = dataclasses.asdict(self.distill)
    del distill['seed'], distill['train_budget']
    attack = dataclasses.asdict(self.attack)
    attack['attacks'] = list(attack['attacks'])
    attack['ja_weights'] = list(attack['ja_weights'])
    return {
      'method': self.method,
      'dataset': dataclasses.asdict(self.dataset),
      'backbone': dataclasses.asdict(self.backbone),
      'prompts': dataclasses.asdict(self.prompts),
      'distill': distill,
      'attack': attack,
      'seeds': list(self.seeds),
      'output_dir': self.output_dir,
    }

  @property
  def config_hash(self):
    return canonical_digest(self.to_dict())

  def distill_config(self, seed):
    return dataclasses.replace(self.distill, seed=seed)

  def resolved_output_dir(self):
    if self.output_dir:
      return self.output_dir
    root = os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)
    return os.path.join(root, f"{self.method.lower()}-{self.config_hash[:12]}")

def _check_keys(data, allowed, section, nested=None):
  # nested: leaf name -> dotted path of keys in subsections, also offered
  # as suggestions.
  if data is None:
    return {}
  if not isinstance(data, dict):
    raise ConfigurationError(f"Section {section or 'top level'!r} must be a mapping.")
  prefix = f"{section}." if section else ''
  for key in data:
    if key not in allowed:
      message = f"Unknown configuration key '{prefix}{key}'."
      candidates = {name: prefix + name for name in allowed}
      candidates.update(nested or {})
      close = difflib.get_close_matches(str(key), list(candidates), n=1)
      if close:
        message += f" Did you mean '{candidates[close[0]]}'?"
      raise ConfigurationError(message)
  return dict(data)

def _fields(cls, exclude=()):
  return [f.name for f in dataclasses.fields(cls) if f.name not in exclude]

def _build(cls, data, section, exclude=()):
  data = _check_keys(data, _fields(cls, exclude), section)
  try:
    return cls(**data)
  except (TypeError, ValueError) as e:
    raise ConfigurationError(f"Invalid {section} section: {e}") from None

def parse_config(data):
  """
  Validates a configuration mapping (as read from YAML) into an
  ExperimentConfig.  Unknown keys are rejected with a suggestion.
  """
  nested = {}
  for section, cls in (('dataset', DatasetConfig), ('backbone', BackboneConfig),
      ('prompts', PromptConfig), ('distill', DistillConfig), ('attack', AttackConfig)):
    for name in _fields(cls, ('seed', 'train_budget') if cls is DistillConfig else ()):
      nested.setdefault(name, f"{section}.{name}")
  data = _check_keys(data, _fields(ExperimentConfig), '', nested)
  backbone = _check_keys(data.get('backbone'),
    ['preset'] + _fields(BackboneConfig), 'backbone')
  try:
    backbone_cfg = backbone_preset(backbone.pop('preset', 'toy'), **backbone)
  except TypeError as e:
    raise ConfigurationError(f"Invalid backbone section: {e}") from None
  attack = _build(AttackConfig, data.get('attack'), 'attack')
  distill = _check_keys(data.get('distill'),
    _fields(DistillConfig, ('seed', 'train_budget')), 'distill')
  try:
    distill_cfg = DistillConfig(train_budget=attack.train_budget(), **distill)
  except TypeError as e:
    raise ConfigurationError(f"Invalid distill section: {e}") from None
  top = {k: v for k, v in data.items()
    if k in ('method', 'seeds', 'output_dir') and v is not None}
  if 'seeds' in top and isinstance(top['seeds'], int):
    top['seeds'] = [top['seeds']]
  return ExperimentConfig(
    dataset=_build(DatasetConfig, data.get('dataset'), 'dataset'),
    backbone=backbone_cfg,
    prompts=_build(PromptConfig, data.get('prompts'), 'prompts'),
    distill=distill_cfg, attack=attack, **top)

def _set_path(data, path, value):
  keys = path.split('.')
  node = data
  for key in keys[:-1]:
    child = node.get(key)
    if child is None:
      child = node[key] = {}
    if not isinstance(child, dict):
      raise ConfigurationError(f"Cannot set {path!r}: {key!r} is not a section.")
    node = child
  node[keys[-1]] = value

def parse_override(text):
  """
  Splits "a.b=value" into ('a.b', value), parsing value as YAML so numbers,
  booleans, null and lists get their natural types.
  """
  path, sep, raw = text.partition('=')
  if not sep or not path.strip():
    raise ConfigurationError(f"Override {text!r} is not of the form key.path=value.")
  try:
    return path.strip(), yaml.safe_load(raw)
  except yaml.YAMLError as e:
    raise ConfigurationError(f"Cannot parse the value of override {text!r}.") from e

def apply_override(config, path, value):
  """
  Returns a copy of the ExperimentConfig \p config with the dotted \p path
  set to \p value, validated like a freshly loaded configuration.
  """
  data = config.to_dict()
  _set_path(data, path, value)
  return parse_config(data)

def load_config(path=None, overrides=()):
  """
  Reads a YAML configuration file (or the defaults when \p path is None) and
  applies "key.path=value" \p overrides on top.
  """
  data = {}
  if path is not None:
    try:
      with open(path) as f:
        data = yaml.safe_load(f) or {}
    except OSError as e:
      raise ConfigurationError(f"Cannot read configuration {path!r}: {e.strerror}.") from e
    except yaml.YAMLError as e:
      raise ConfigurationError(f"Configuration {path!r} is not valid YAML: {e}") from e
  if not isinstance(data, dict):
    raise ConfigurationError(f"Configuration {path!r} must be a mapping.")
  for text in overrides:
    _set_path(data, *parse_override(text))
  return parse_config(data)

def dump_config(config, path=None):
  """
  Serializes \p config in canonical form; writes it to \p path if given.
  """
  text = yaml.safe_dump(config.to_dict(), sort_keys=True)
  if path is not None:
    with open(path, 'w') as f:
      f.write(text)
  return text

@dataclasses.dataclass
class RunManifest:
  """
  Record of one command invocation and every artifact it wrote.
  """
  command: str
  config_hash: str
  started: str
  finished: str = ''
  ## Artifact kind -> list of paths.
  artifacts: dict = dataclasses.field(default_factory=dict)
  ## 'ok', 'partial' or 'failed'.
  status: str = 'ok'
  failures: list = dataclasses.field(default_factory=list)

  def add(self, kind, path):
    self.artifacts.setdefault(kind, []).append(path)

  def write(self, directory):
    """
    Writes the manifest atomically to directory/run_manifest.json.
    """
    self.finished = _now()
    path = os.path.join(directory, RUN_MANIFEST_FILE)
    tmp = path + '.tmp'
    with open(tmp, 'w') as f:
      json.dump(dataclasses.asdict(self), f, indent=2, sort_keys=True)
      f.write('\n')
    os.replace(tmp, path)
    return path

  @classmethod
  def read(cls, directory):
    path = os.path.join(directory, RUN_MANIFEST_FILE)
    if not os.path.exists(path):
      return None
    with open(path) as f:
      return cls(**json.load(f))

def _now():
  return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec='seconds')

class Experiment():
  """
  The datasets and model factory of one configuration.
  """

  def __init__(self, config, progress=False):
    self.config = config
    ds = config.dataset
    synthetic = None
    if ds.name == SYNTHETIC_SHAPES:
      synthetic = SyntheticShapesConfig(ds.classes, ds.train_per_class,
        ds.test_per_class, config.backbone.image_resolution, ds.noise, ds.seed)
    self.train_set, self.test_set = load_dataset(ds.name, ds.root,
      config.backbone.image_resolution, synthetic)
    self.factory = ModelFactory(config.backbone, self.train_set,
      config.prompts.template, config.prompts.depth, config.prompts.length,
      progress)
    self.progress = progress

  def train(self, seed):
    cfg = self.config.distill_config(seed)
    shots = sample_few_shot(self.train_set, cfg.shots, derive_seed(seed, 'few_shot'))
    logger.info('training %s seed %d on %d images', self.config.method, seed, len(shots))
    return train_defense(self.config.method, shots, self.factory, cfg,
      self.progress, self.config.config_hash)

  def evaluate(self, defense):
    a = self.config.attack
    reports = [evaluate(defense, self.test_set, a.attacks, self.factory,
      a.epsilon, a.eval_examples, a.attack_seed, a.eval_batch_size, a.workers,
      self.progress)]
    if a.adaptive and defense.teacher_prompts is not None:
      reports.append(evaluate_adaptive(defense, self.test_set, self.factory,
        attack_budget(ATTACK_PGD100, a.epsilon), a.kl_weight, a.ja_weights,
        a.eval_examples, a.attack_seed, a.eval_batch_size, a.workers,
        self.progress))
    return reports

def run_experiment(config, seed):
  """
  Trains and evaluates one defense; the unit of work of a sweep.
  """
  experiment = Experiment(config)
  return experiment.evaluate(experiment.train(seed))[0]

def _checkpoint_dir(out, seed):
  return os.path.join(out, f"seed-{seed}")

def cmd_train(config, force=False, progress=False):
  """
  Trains one defense per configured seed and saves each as a checkpoint
  directory under the output directory.

  If the output directory already holds a successful run of the same
  configuration, nothing is retrained unless \p force is set.

  \return The RunManifest.
  """
  out = config.resolved_output_dir()
  previous = RunManifest.read(out)
  if (previous is not None and previous.status == 'ok' and not force and
      previous.command == 'train' and previous.config_hash == config.config_hash):
    logger.info('%s already holds this run; use --force to retrain', out)
    return previous
  os.makedirs(out, exist_ok=True)
  manifest = RunManifest('train', config.config_hash, _now())
  config_path = os.path.join(out, CHECKPOINT_CONFIG_FILE)
  dump_config(config, config_path)
  manifest.add('config', config_path)
  experiment = Experiment(config, progress)
  for seed in config.seeds:
    defense = experiment.train(seed)
    path = save_defense(defense, _checkpoint_dir(out, seed))
    dump_config(config, os.path.join(path, CHECKPOINT_CONFIG_FILE))
    manifest.add('checkpoint', path)
  manifest.write(out)
  return manifest

def _checkpoint_config(path, overrides=()):
  config_path = os.path.join(path, CHECKPOINT_CONFIG_FILE)
  if not os.path.exists(config_path):
    raise EvaluationError(f"Checkpoint {path!r} has no {CHECKPOINT_CONFIG_FILE}.")
  return load_config(config_path), load_config(config_path, overrides)

def cmd_eval(checkpoint_paths, overrides=(), output_dir=None, progress=False):
  """
  Evaluates every checkpoint with the attacks of its configuration (after
  \p overrides, e.g. "attack.attacks=[none,pgd100,strong]") and writes the
  reports and a table.

  A checkpoint whose manifest does not match its configuration is refused.
  """
  if not checkpoint_paths:
    raise ConfigurationError('cmd_eval needs at least one checkpoint.')
  reports = []
  hashes = []
  for path in checkpoint_paths:
    trained_config, config = _checkpoint_config(path, overrides)
    fields = read_manifest(path)
    if fields.get('config_hash') != trained_config.config_hash:
      raise EvaluationError(f"Checkpoint {path!r} was trained with config "
        f"{fields.get('config_hash', '?')[:12]}, but its {CHECKPOINT_CONFIG_FILE} "
        f"hashes to {trained_config.config_hash[:12]}.")
    reports += Experiment(config, progress).evaluate(load_defense(path))
    hashes.append(config.config_hash)

  out = output_dir or os.path.join(os.environ.get(OUTPUT_ROOT_ENV,
    DEFAULT_OUTPUT_ROOT), f"eval-{canonical_digest(hashes)[:12]}")
  os.makedirs(out, exist_ok=True)
  manifest = RunManifest('eval', canonical_digest(hashes), _now())
  for path in checkpoint_paths:
    manifest.add('checkpoint_inputs', path)
  manifest.add('reports', write_reports(reports, os.path.join(out, REPORTS_FILE)))
  table = render_table(reports)
  with open(os.path.join(out, TABLE_FILE), 'w') as f:
    f.write(table)
  manifest.add('table', os.path.join(out, TABLE_FILE))
  manifest.write(out)
  print(table, end='')
  return manifest

def cmd_sweep(config, axis, values, workers=1, progress=False):
  """
  Trains and evaluates one defense per (value, seed), then writes the
  reports, a table and a plot of accuracy against the swept value.
  """
  result = sweep(axis, values, config, config.seeds, run_experiment,
    apply_override, workers, progress)
  out = os.path.join(config.resolved_output_dir(), f"sweep-{axis}")
  os.makedirs(out, exist_ok=True)
  reports = [e.report for e in result.reports if e.report is not None]
  manifest = RunManifest('sweep', config.config_hash, _now())
  manifest.add('reports', write_reports(reports, os.path.join(out, REPORTS_FILE)))
  with open(os.path.join(out, TABLE_FILE), 'w') as f:
    f.write(render_table(reports))
  manifest.add('table', os.path.join(out, TABLE_FILE))
  manifest.add('plot', plot_sweep(result, os.path.join(out, f"{axis}.png")))
  manifest.failures = [{'value': e.value, 'seed': e.seed, 'error': e.error}
    for e in result.failures]
  if manifest.failures:
    manifest.status = 'partial' if reports else 'failed'
  manifest.write(out)
  for row in result.summary():
    print(f"{axis}={row[0]}: natural {row[1]:.1f} +/- {row[2]:.1f}, "
      f"robust {row[3]:.1f} +/- {row[4]:.1f} ({row[5]} runs)")
  return manifest

def cmd_report(report_paths):
  """
  Renders the reports of one or more reports.jsonl files as one table.
  """
  reports = []
  for path in report_paths:
    try:
      reports += read_reports(path)
    except OSError as e:
      raise EvaluationError(f"Cannot read reports {path!r}: {e.strerror}.") from e
  table = render_table(reports)
  print(table, end='')
  return table

def _parse_values(text):
  values = []
  for item in text.split(','):
    if item.strip():
      try:
        values.append(yaml.safe_load(item.strip()))
      except yaml.YAMLError as e:
        raise ConfigurationError(f"Invalid sweep value {item.strip()!r}: {e}") from None
  if not values:
    raise ConfigurationError('--values must list at least one value.')
  return values

def build_parser():
  parser = argparse.ArgumentParser(prog='apd',
    description='Adversarial prompt distillation experiments.')
  parser.add_argument('-v', '--verbose', action='store_true',
    help='log debug messages')
  parser.add_argument('--progress', action='store_true', help='show progress bars')
  sub = parser.add_subparsers(dest='command', required=True)

  train = sub.add_parser('train', help='train a defense')
  train.add_argument('config', nargs='?', help='YAML configuration file')
  train.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
    help='override a configuration key, e.g. distill.beta=0.4')
  train.add_argument('--force', action='store_true',
    help='retrain even if the output directory holds this run')

  ev = sub.add_parser('eval', help='evaluate checkpoints')
  ev.add_argument('checkpoints', nargs='+', help='checkpoint directories')
  ev.add_argument('--set', action='append', default=[], metavar='KEY=VALUE')
  ev.add_argument('--attacks', help='comma-separated attacks, e.g. none,pgd100,strong')
  ev.add_argument('--adaptive', action='store_true',
    help='also run the KL and joint attacks on distilled defenses')
  ev.add_argument('--full-test-set', action='store_true',
    help='evaluate every test image instead of a subset')
  ev.add_argument('--output', help='output directory')

  sw = sub.add_parser('sweep', help='sweep one hyperparameter')
  sw.add_argument('config', nargs='?')
  sw.add_argument('--set', action='append', default=[], metavar='KEY=VALUE')
  sw.add_argument('--axis', required=True, choices=sorted(SWEEP_AXES))
  sw.add_argument('--values', required=True,
    help='comma-separated values, e.g. 0,0.1,0.2')
  sw.add_argument('--workers', type=int, default=1,
    help='number of runs to execute in parallel processes')

  report = sub.add_parser('report', help='render reports as a table')
  report.add_argument('reports', nargs='+', help='reports.jsonl files')
  return parser

def main(argv=None):
  """
  Runs the command line and returns the process exit code.
  """
  args = build_parser().parse_args(argv)
  logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
    format='%(asctime)s %(levelname)s %(name)s: %(message)s')
  try:
    if args.command == 'train':
      cmd_train(load_config(args.config, args.set), args.force, args.progress)
    elif args.command == 'eval':
      overrides = list(args.set)
      if args.attacks:
        overrides.append(f"attack.attacks=[{args.attacks}]")
      if args.adaptive:
        overrides.append('attack.adaptive=true')
      if args.full_test_set:
        overrides.append('attack.eval_examples=null')
      cmd_eval(args.checkpoints, overrides, args.output, args.progress)
    elif args.command == 'sweep':
      manifest = cmd_sweep(load_config(args.config, args.set), args.axis,
        _parse_values(args.values), args.workers, args.progress)
      if manifest.status != 'ok':
        return EXIT_FAILURE
    elif args.command == 'report':
      cmd_report(args.reports)
  except ApdError as e:
    logger.debug('command failed', exc_info=True)
    sys.stderr.write(f"Error: {e}\n")
    return e.exit_code
  except (OSError, RuntimeError) as e:
    sys.stderr.write(f"Error: {e}\n")
    return EXIT_FAILURE
  return EXIT_SUCCESS

def cli():
  sys.exit(main())

if __name__ == '__main__':
  cli()
