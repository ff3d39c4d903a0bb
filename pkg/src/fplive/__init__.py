"""Fingerprint liveness detection on a from-scratch numpy autodiff stack.

Modules: ``tensor`` (autodiff, RNG, SGD), ``nn`` (SE-CNN models and
checkpoints), ``augment``, ``styleswap``, ``train`` (recipes, mutual
learning, distillation, ensembles), ``metrics``, ``recognizer`` (integrated
match + liveness), ``synthdata`` and ``cli``.
"""

__version__ = "0.1.0"
