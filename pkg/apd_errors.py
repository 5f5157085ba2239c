## \file apd_errors.py
##
## Exceptions raised by the adversarial prompt distillation library.  Every
## exception is a RuntimeError so callers that already catch RuntimeError
## keep working; the exit_code attribute is what the command-line interface
## returns when the exception reaches it.

from apd_protocol import *

class ApdError(RuntimeError):
  """
  Base class for every error raised by this library.
  """
  exit_code = EXIT_FAILURE

class ConfigurationError(ApdError):
  """
  An invalid configuration value or an inconsistency between configured
  components (for example a prompt width that does not match the encoder).
  """
  exit_code = EXIT_CONFIG_ERROR

class InputError(ApdError):
  """
  Input data that cannot be processed: non-finite pixels or logits, unknown
  token ids, class names outside the vocabulary.
  """
  exit_code = EXIT_DATA_ERROR

class AttackError(ApdError):
  """
  An attack produced a non-finite objective.
  """
  exit_code = EXIT_FAILURE

class TrainingError(ApdError):
  """
  Training diverged (non-finite loss or logits).
  """
  exit_code = EXIT_TRAINING_DIVERGENCE

class EvaluationError(ApdError):
  """
  A checkpoint cannot be evaluated as requested, e.g. because its
  architecture digest does not match the model it is loaded into.
  """
  exit_code = EXIT_EVALUATION_MISMATCH

class DataLoadError(ApdError):
  """
  A dataset root is missing or its layout is malformed.
  """
  exit_code = EXIT_DATA_ERROR

class SamplingError(ApdError):
  """
  Few-shot sampling is impossible, e.g. because a class has no images.
  """
  exit_code = EXIT_DATA_ERROR
