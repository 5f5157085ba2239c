## \file apd_protocol.py
##
## This file defines the arbitrary constants used throughout the adversarial
## prompt distillation library: protocol defaults, token ids, normalization
## statistics and exit codes.  We do not recommend importing this module
## directly because all of the constants defined in it are available through
## the library modules that star-import it.
##
## \cond

# Pixel normalization applied inside the image encoder.  Attacks operate in
# raw [0, 1] pixel space.
IMAGE_MEAN = (0.48145466, 0.4578275, 0.40821073)
IMAGE_STD = (0.26862954, 0.26130258, 0.27577711)

TOKEN_PAD = 0
TOKEN_START = 1
TOKEN_END = 2
FIRST_WORD_TOKEN = 3

DEFAULT_TEMPLATE = 'a photo of a {}.'
CLASS_PLACEHOLDER = '{}'

DEFAULT_LOGIT_SCALE = 100.0
PROMPT_INIT_STD = 0.02

DEFAULT_PROMPT_DEPTH = 4
DEFAULT_PROMPT_LENGTH = 16

# Training attack: 3 steps of 2*eps/3 inside eps = 1/255.
DEFAULT_EPSILON = 1 / 255
TRAIN_ATTACK_STEPS = 3
TRAIN_ATTACK_STEP_RATIO = 2 / 3

# Evaluation attack: 100 steps of eps/4.
EVAL_ATTACK_STEPS = 100
EVAL_ATTACK_STEP_RATIO = 1 / 4
STRONG_ATTACK_RESTARTS = 5

DEFAULT_KL_WEIGHT = 1.0
DEFAULT_JA_WEIGHTS = (1.0, 1.0)

DEFAULT_BETA = 0.2
DEFAULT_EPOCHS = 50
DEFAULT_BATCH_SIZE = 4
DEFAULT_LEARNING_RATE = 0.0035
DEFAULT_MOMENTUM = 0.9
DEFAULT_WARMUP_LR = 1e-5
DEFAULT_SHOTS = 16
DEFAULT_DISTILL_TEMPERATURE = 1.0

DEFAULT_EVAL_EXAMPLES = 512
DEFAULT_EVAL_BATCH_SIZE = 64

LOSS_CROSS_ENTROPY = 'cross_entropy'
LOSS_CW_MARGIN = 'cw_margin'

KL_STUDENT_FIRST = 'student_first'
KL_TEACHER_FIRST = 'teacher_first'

ATTACK_NONE = 'none'
ATTACK_PGD100 = 'pgd100'
ATTACK_STRONG = 'strong'
ATTACK_KL = 'kl_attack'
ATTACK_JA = 'ja_attack'

SWEEP_AXES = {
  'prompt_depth': 'prompts.depth',
  'prompt_length': 'prompts.length',
  'beta': 'distill.beta',
}

CHECKPOINT_FORMAT_VERSION = 1
CHECKPOINT_PROMPTS_FILE = 'prompts.pt'
CHECKPOINT_MANIFEST_FILE = 'manifest.txt'
CHECKPOINT_CONFIG_FILE = 'config.yaml'
RUN_MANIFEST_FILE = 'run_manifest.json'
REPORTS_FILE = 'reports.jsonl'
TABLE_FILE = 'table.txt'

OUTPUT_ROOT_ENV = 'APD_OUTPUT_ROOT'
DEFAULT_OUTPUT_ROOT = 'runs'

EXIT_SUCCESS = 0
EXIT_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_TRAINING_DIVERGENCE = 3
EXIT_EVALUATION_MISMATCH = 4
EXIT_DATA_ERROR = 5

## \endcond
