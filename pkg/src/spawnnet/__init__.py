"""Dense pretrained-feature adapters for visuomotor imitation policies.

Subpackages: ``backbone`` (frozen ViT feature extractor), ``encoders``
(SpawnNet / learning-from-scratch / frozen-CLS encoders), ``policy``,
``imitation`` (augmentation, BC, DAgger), ``bench`` (procedural pick-and-place
benchmark) and ``experiment`` (configs, runs, tables, heatmaps, CLI).
"""
__version__ = "0.1.0"
