#!/usr/bin/env python3

# This example shows a simple way to train an adversarially robust set of
# prompts with online adversarial prompt distillation and measure its
# natural and robust accuracy.
#
# It uses the generated synthetic-shapes dataset, so no files are needed.
# The backbone is the small 'toy-small' model and training runs for only a
# few epochs, so it finishes in a few minutes on a laptop CPU.  The numbers
# it prints are far below what the full defaults reach.
#
# This program will terminate if any exception is thrown.

import logging
import bimodal_core
import data_pipeline
import distill_trainer
import eval_harness

logging.basicConfig(level=logging.INFO)

train_set, test_set = data_pipeline.load_dataset('synthetic-shapes')
backbone = bimodal_core.backbone_preset('toy-small')

# The factory pretrains the frozen encoder once and hands out fresh prompts
# to the teacher and the student.
factory = distill_trainer.ModelFactory(backbone, train_set, depth=3, length=8)

# Defaults match the full protocol (50 epochs, batch size 4, lr 0.0035,
# beta 0.2, 16 shots); fewer epochs keep this example short.
cfg = distill_trainer.DistillConfig(epochs=5, seed=0)
shots = data_pipeline.sample_few_shot(train_set, cfg.shots, seed=0)

defense = distill_trainer.train_apd(shots, factory, cfg, progress=True)
distill_trainer.save_defense(defense, 'apd_simple_checkpoint')

report = eval_harness.evaluate(defense, test_set, ['none', 'pgd100'], factory,
  eval_examples=128, progress=True)
print(eval_harness.render_table([report]), end='')
