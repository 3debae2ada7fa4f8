"""Keypoint-based relative navigation with an adaptive UKF and online
supervised training of the keypoint predictor."""

__version__ = "0.1.0"
