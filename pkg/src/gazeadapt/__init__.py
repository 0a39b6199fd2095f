"""Gaze-assisted teacher-student domain adaptation for binary segmentation."""

__version__ = "0.1.0"
