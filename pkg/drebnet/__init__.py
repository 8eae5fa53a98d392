"""Dual-stream blur-robust object detection on a small differentiable tensor engine."""

__version__ = '0.1.0'
