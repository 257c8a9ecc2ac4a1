"""Chest X-ray classification and similar-case retrieval pipeline.

Library layout:

- ``manifest``      scan manifests, exclusion rules, patient-level splits
- ``preprocess``    image canonicalization (crop, brightness, resize, CLAHE)
- ``augment``       stochastic label-preserving augmentation
- ``segmentation``  lung-probability masks and 3-channel input composition
- ``model``         classifier backbones, training loop, prediction, ensembling
- ``metrics``       confusion/ROC/PR statistics and bootstrap confidence intervals
- ``retrieval``     embedding index, exact KNN, distance stats, 2-D projection
- ``tsne``          the projection optimizer itself
- ``experiments``   model-comparison harness and report emission
- ``service``       HTTP inference and similar-case API
- ``cli``           command-line orchestrator
"""

__version__ = "0.1.0"
