#!/usr/bin/env python3

# This example shows how to evaluate checkpoints if you want to stop as soon
# as anything looks wrong.
#
# This program will print an error and terminate if:
# - A checkpoint manifest is missing or malformed
# - A checkpoint was trained with a different configuration than the one
#   stored next to it
# - The configured encoder does not match the one the checkpoint was
#   trained against
# - An attack objective becomes non-finite
#
# Usage: eval_careful_example.py CHECKPOINT_DIR [CHECKPOINT_DIR ...]
#
# Each checkpoint directory must contain the config.yaml written by
# "apd train".  Every checkpoint is evaluated on the same 512 test images
# with the natural, PGD-100 and strong attacks; distilled checkpoints also
# face the two attacks that use the teacher.

import sys
import apd_errors
import experiment_cli

if len(sys.argv) < 2:
  print('Usage: eval_careful_example.py CHECKPOINT_DIR ...', file=sys.stderr)
  sys.exit(2)

overrides = [
  'attack.attacks=[none, pgd100, strong]',
  'attack.adaptive=true',
  'attack.attack_seed=0',
]

try:
  manifest = experiment_cli.cmd_eval(sys.argv[1:], overrides)
except apd_errors.ApdError as e:
  print("Error:", e, file=sys.stderr)
  sys.exit(e.exit_code)
except (OSError, RuntimeError) as e:
  print("Error:", e, file=sys.stderr)
  sys.exit(1)

print("Reports written to", manifest.artifacts['reports'][0])
