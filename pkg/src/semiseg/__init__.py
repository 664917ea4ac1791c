"""Semi-supervised instance segmentation on synthetic scenes with a promptable
oracle: structural distillation for the teacher, point-prompt refinement of
pseudo-labels and copy-paste augmentation with refined labels."""

__version__ = "0.1.0"
