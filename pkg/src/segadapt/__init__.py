"""Self-training domain adaptation for semantic segmentation.

Augmentation-consistent pseudo labels from a momentum network, with moving
class priors, sample-based thresholds, focal confidence-weighted loss, and
class-prior importance sampling, trained end-to-end on a procedural
two-domain benchmark.
"""

__version__ = "0.1.0"
