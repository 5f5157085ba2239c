from setuptools import setup
setup(name='apd-prompts',
  version='1.0.0',
  description=(
    'Adversarial prompt tuning and adversarial prompt distillation '
    'for small image-text classifiers'
  ),
  python_requires='>=3.9',
  py_modules=['apd_protocol', 'apd_errors', 'bimodal_core', 'attack_engine',
    'distill_trainer', 'data_pipeline', 'eval_harness', 'experiment_cli'],
  install_requires=['torch>=2.0', 'torchvision>=0.15', 'numpy', 'pyyaml', 'tqdm',
    'matplotlib', 'Pillow'],
  extras_require={'test': ['pytest']},
  entry_points={'console_scripts': ['apd=experiment_cli:cli']},
  )
