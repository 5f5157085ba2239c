# See LICENSE.txt for details.

import dataclasses
import hashlib
import logging
import os

import numpy as np
import torch
from torch.utils.data import DataLoader, TensorDataset
from torchvision import datasets, transforms

from apd_protocol import *
from apd_errors import ConfigurationError, DataLoadError, SamplingError

## \file data_pipeline.py
##
## Dataset loading (a procedurally generated shape dataset and
## directory-of-class-folders image sets), few-shot subsampling and seeded
## batch iteration.

logger = logging.getLogger(__name__)

SYNTHETIC_SHAPES = 'synthetic-shapes'

SHAPE_NAMES = ('circle', 'square', 'triangle', 'cross', 'ring', 'diamond')
COLOR_VALUES = {
  'red': (0.9, 0.15, 0.15),
  'green': (0.15, 0.8, 0.2),
  'blue': (0.15, 0.3, 0.95),
  'yellow': (0.95, 0.9, 0.15),
}

@dataclasses.dataclass
class Dataset:
  """
  An image classification split.  Images are float32 tensors in [0, 1] of
  shape (N x 3 x R x R), labels are class indices into class_names.
  """
  name: str
  images: torch.Tensor
  labels: torch.Tensor
  class_names: list
  split: str

  def __post_init__(self):
    if self.split not in ('train', 'test'):
      raise ConfigurationError(f"Unknown split {self.split!r}.")
    if len(self.labels) != len(self.images):
      raise DataLoadError(f"Dataset {self.name!r} has {len(self.images)} images "
        f"but {len(self.labels)} labels.")
    if len(self.labels) and (self.labels.min() < 0 or
        self.labels.max() >= len(self.class_names)):
      raise DataLoadError(f"Dataset {self.name!r} has labels outside "
        f"[0, {len(self.class_names)}).")
    if len(self.images) and (self.images.min() < 0 or self.images.max() > 1):
      raise DataLoadError(f"Dataset {self.name!r} has pixels outside [0, 1].")

  def __len__(self):
    return len(self.labels)

  @property
  def num_classes(self):
    return len(self.class_names)

  def class_indices(self, c):
    return torch.nonzero(self.labels == c).flatten().tolist()

@dataclasses.dataclass
class FewShotSubset:
  """
  Indices into \p parent with at most \p shots examples per class.
  """
  parent: Dataset
  indices: list
  shots: int
  seed: int

  def __len__(self):
    return len(self.indices)

  @property
  def images(self):
    return self.parent.images[self.indices]

  @property
  def labels(self):
    return self.parent.labels[self.indices]

@dataclasses.dataclass(frozen=True)
class SyntheticShapesConfig:
  classes: int = 8
  train_per_class: int = 100
  test_per_class: int = 100
  resolution: int = 32
  noise: float = 0.15
  seed: int = 7

  def __post_init__(self):
    limit = len(SHAPE_NAMES) * len(COLOR_VALUES)
    if not 1 <= self.classes <= limit:
      raise ConfigurationError(f"synthetic-shapes supports 1 to {limit} classes, "
        f"got {self.classes}.")
    for name in ('train_per_class', 'test_per_class', 'resolution'):
      if getattr(self, name) < 1:
        raise ConfigurationError(f"dataset.{name} must be positive.")
    if not 0 <= self.noise <= 1:
      raise ConfigurationError('dataset.noise must be in [0, 1].')

def synthetic_class_names(classes):
  """
  Class names of the first \p classes shape/color combinations, ordered so
  that consecutive classes differ in shape first.
  """
  names = []
  for color in COLOR_VALUES:
    for shape in SHAPE_NAMES:
      names.append(f"{color}_{shape}")
  return names[:classes]

def _shape_mask(shape, res, cx, cy, size, angle):
  yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) + 0.5
  dx, dy = xx - cx, yy - cy
  c, s = np.cos(angle), np.sin(angle)
  u, v = c * dx + s * dy, -s * dx + c * dy
  if shape == 'circle':
    return u * u + v * v <= size * size
  if shape == 'square':
    return (np.abs(u) <= size * 0.85) & (np.abs(v) <= size * 0.85)
  if shape == 'triangle':
    return (v <= size * 0.7) & (v >= 1.8 * np.abs(u) - size)
  if shape == 'cross':
    arm = size * 0.35
    return (((np.abs(u) <= arm) & (np.abs(v) <= size)) |
      ((np.abs(v) <= arm) & (np.abs(u) <= size)))
  if shape == 'ring':
    r2 = u * u + v * v
    return (r2 <= size * size) & (r2 >= (0.55 * size) ** 2)
  if shape == 'diamond':
    return np.abs(u) + np.abs(v) <= size
  raise ConfigurationError(f"Unknown shape {shape!r}.")

def _render_shapes(cfg, per_class, rng):
  names = synthetic_class_names(cfg.classes)
  res = cfg.resolution
  images = np.empty((cfg.classes * per_class, 3, res, res), dtype=np.float32)
  labels = np.repeat(np.arange(cfg.classes), per_class)
  for i, label in enumerate(labels):
    color_name, shape = names[label].split('_')
    background = rng.uniform(0.3, 0.7, size=3)
    img = background[:, None, None] + cfg.noise * rng.standard_normal((3, res, res))
    size = rng.uniform(0.22, 0.34) * res
    cx, cy = rng.uniform(size, res - size, size=2)
    angle = rng.uniform(-0.4, 0.4)
    mask = _shape_mask(shape, res, cx, cy, size, angle)
    color = np.array(COLOR_VALUES[color_name]) + rng.uniform(-0.08, 0.08, size=3)
    img[:, mask] = color[:, None] + 0.5 * cfg.noise * rng.standard_normal((3, mask.sum()))
    images[i] = np.clip(img, 0, 1)
  return torch.from_numpy(images), torch.from_numpy(labels).long(), names

def make_synthetic_shapes(cfg=SyntheticShapesConfig()):
  """
  Generates the synthetic-shapes train and test splits: colored geometric
  shapes on noisy backgrounds, balanced per class, fully determined by
  cfg.seed.
  """
  rng = np.random.default_rng(cfg.seed)
  train_images, train_labels, names = _render_shapes(cfg, cfg.train_per_class, rng)
  test_images, test_labels, _ = _render_shapes(cfg, cfg.test_per_class, rng)
  return (Dataset(SYNTHETIC_SHAPES, train_images, train_labels, names, 'train'),
    Dataset(SYNTHETIC_SHAPES, test_images, test_labels, names, 'test'))

def _class_folders(path):
  if not os.path.isdir(path):
    raise DataLoadError(f"Dataset directory {path!r} does not exist.")
  try:
    folders, _ = datasets.folder.find_classes(path)
  except FileNotFoundError:
    raise DataLoadError(f"Dataset directory {path!r} contains no class folders.") from None
  return folders

def _load_split(root, split, class_names, name, resolution):
  path = os.path.join(root, split)
  if _class_folders(path) != class_names:
    raise DataLoadError(f"Class folders of {path!r} do not match those of the "
      'train split.')
  preprocess = transforms.Compose([
    transforms.Resize((resolution, resolution),
      interpolation=transforms.InterpolationMode.BILINEAR),
    transforms.ToTensor(),
  ])
  try:
    folder = datasets.ImageFolder(path, transform=preprocess)
  except FileNotFoundError as e:
    raise DataLoadError(f"No images found under {path!r}: {e}") from None
  images = []
  for index, (file_path, _) in enumerate(folder.samples):
    try:
      images.append(folder[index][0])
    except OSError as e:
      raise DataLoadError(f"Could not read image {file_path!r}: {e}") from e
  readable = [c.replace('_', ' ') for c in folder.classes]
  return Dataset(name, torch.stack(images), torch.tensor(folder.targets), readable, split)

def load_dataset(name, root=None, resolution=32, synthetic=None):
  """
  Loads the train and test splits of a dataset.

  \param name Either 'synthetic-shapes' (generated, no files needed) or a
    name for a directory dataset.
  \param root For directory datasets: a directory with 'train' and 'test'
    subdirectories, each holding one folder of images per class.  Class
    folders are ordered lexicographically; underscores in folder names
    become spaces in class names.
  \param resolution Images are resized to resolution x resolution with
    bilinear interpolation.
  \param synthetic A SyntheticShapesConfig for the generated dataset.
  \return A (train, test) pair of Dataset objects.
  """
  if name == SYNTHETIC_SHAPES:
    cfg = synthetic or SyntheticShapesConfig(resolution=resolution)
    return make_synthetic_shapes(cfg)
  if root is None:
    raise DataLoadError(f"Dataset {name!r} needs a root directory.")
  if not os.path.isdir(root):
    raise DataLoadError(f"Dataset root {root!r} does not exist.")
  class_names = _class_folders(os.path.join(root, 'train'))
  train = _load_split(root, 'train', class_names, name, resolution)
  test = _load_split(root, 'test', class_names, name, resolution)
  logger.info('loaded %s: %d train / %d test images, %d classes', name,
    len(train), len(test), len(class_names))
  return train, test

def sample_few_shot(dataset, shots, seed):
  """
  Samples min(shots, class size) examples of every class uniformly without
  replacement.  The same (dataset, shots, seed) always gives the same
  indices.
  """
  if shots < 1:
    raise ConfigurationError(f"shots must be at least 1, got {shots}.")
  rng = np.random.default_rng(seed)
  indices = []
  for c, name in enumerate(dataset.class_names):
    members = dataset.class_indices(c)
    if not members:
      raise SamplingError(f"Class {name!r} has no examples to sample.")
    chosen = rng.permutation(len(members))[:shots]
    indices += sorted(members[i] for i in chosen)
  return FewShotSubset(dataset, indices, shots, seed)

def sample_eval_subset(dataset, size, seed):
  """
  Returns a class-stratified, seeded, ordered list of at most \p size test
  indices (all indices if \p size is None or not smaller than the dataset).
  Every method in a comparison is evaluated on the same list.
  """
  n = len(dataset)
  if size is None or size >= n:
    return list(range(n))
  rng = np.random.default_rng(seed)
  per_class = [rng.permutation(dataset.class_indices(c)).tolist()
    for c in range(dataset.num_classes)]
  chosen = []
  # Round-robin over classes keeps the subset balanced.
  while len(chosen) < size:
    for members in per_class:
      if members and len(chosen) < size:
        chosen.append(members.pop(0))
  return sorted(chosen)

def batches(subset, batch_size, epoch_seed):
  """
  Yields (images, labels) batches covering every example of \p subset
  exactly once, in an order shuffled by \p epoch_seed.  The last batch may be
  smaller than \p batch_size.

  \sa epoch_seed()
  """
  if batch_size < 1:
    raise ConfigurationError(f"batch_size must be at least 1, got {batch_size}.")
  loader = DataLoader(TensorDataset(subset.images, subset.labels),
    batch_size=batch_size, shuffle=True,
    generator=torch.Generator().manual_seed(epoch_seed))
  yield from loader

def epoch_seed(seed, epoch):
  """
  The shuffle seed of \p epoch for a subset sampled with \p seed.
  """
  return (seed * 1000003 + epoch) % (2 ** 63)

def dataset_digest(dataset):
  """
  SHA-256 over the class names, labels and exact pixel bytes of \p dataset.
  """
  h = hashlib.sha256()
  h.update('\n'.join(dataset.class_names).encode())
  h.update(dataset.labels.cpu().numpy().astype(np.int64).tobytes())
  h.update(dataset.images.detach().cpu().contiguous().numpy().tobytes())
  return h.hexdigest()
