"""Meta-learning for multi-task instructional learning at desk scale.

Subpackages and modules:

- ``gradcore``: numpy reverse-mode autodiff, optimizers, checkpoints
- ``seq2seq``: small encoder-decoder transformer with addressable layers
- ``hypernet``: instruction-conditioned low-rank weight deltas
- ``taskdata`` / ``synth``: NIV2-style task data and a synthetic suite
- ``metatrain``: standard, MAML, HNet and HNet-MAML training
- ``evalkit``: ROUGE scoring, zero-shot evaluation, difficulty tables
- ``cli``: command line entry points
"""

__version__ = "0.1.0"
