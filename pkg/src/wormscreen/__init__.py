"""Automated screening of worms on agar plates.

Three detectors run per well: a boosted oriented-segment worm detector on the
brightfield image, a fluorescent stripe detector on the dye image, and a
per-plate phenotype classifier that combines the two. A synthetic plate
generator provides ground truth for training and verification.
"""

__version__ = "0.1.0"
