"""Desk-scale adversarial patches against a miniature grid object detector."""

from .scenegen import Box, SceneConfig, generate_scene, make_dataset
from .detector import DetectorConfig, MiniYOLO
from .eot import TransformRanges, TransformSample

__version__ = "0.1.0"
