"""Interactive volumetric segmentation refinement engine.

Per-voxel policies iteratively adjust a segmentation probability map under
expert hint points; an action-confidence network calibrates rewards,
suggests interaction regions and generates simulated labels for unlabeled
volumes.
"""

__version__ = "0.1.0"
