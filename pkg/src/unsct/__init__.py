"""Landmark detection with part-affinity-field uncertainty on pelvic radiographs."""

__version__ = "0.1.0"
