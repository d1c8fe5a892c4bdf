"""Memory-propagation video matting at desk scale.

Library layout:
  core       shared data model and region operations
  clipio     image-sequence layout and manifests
  memory     alpha memory bank, affinity read-out, region-adaptive fusion
  network    encoder / change head / fusion / decoder / value encoder
  losses     matting, segmentation, change-mask and core-supervision losses
  synthdata  deterministic synthetic corpus generator and augmentations
  training   three-stage training driver
  inference  sequential propagation and first-frame warm-up
  metrics    MAD / MSE / Grad / Conn / dtSSD and core-region variants
  report     benchmark CSVs and companion figures
  cli        batch entry point (datagen | train | infer | eval)
"""

__version__ = "0.1.0"
