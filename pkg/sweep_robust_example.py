#!/usr/bin/env python3

# This example shows how to run a beta sweep that keeps going when
# individual runs fail.
#
# Each (beta, seed) run trains an APD defense and evaluates it.  A run that
# raises (for example because training diverged) is recorded as failed in
# the run manifest and the sweep continues with the next one.  The plot and
# the table are written from whatever runs succeeded.
#
# Errors reported while writing the outputs are caught and printed so they
# do not hide the results already computed.

import sys
import experiment_cli

betas = [0, 0.1, 0.2, 0.4, 1.0]

config = experiment_cli.load_config(overrides=[
  'method=APD',
  'backbone.preset=toy-small',
  'prompts.depth=3',
  'prompts.length=8',
  'distill.epochs=5',
  'attack.eval_examples=128',
  'seeds=[0, 1, 2]',
])

try:
  manifest = experiment_cli.cmd_sweep(config, 'beta', betas)
except (OSError, RuntimeError) as e:
  print("Error: sweep:", e, file=sys.stderr)
  sys.exit(1)

for failure in manifest.failures:
  print("Failed run: beta={value} seed={seed}: {error}".format(**failure),
    file=sys.stderr)
print("Sweep status:", manifest.status)
