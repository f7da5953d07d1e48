"""Codec and packet-loss robustness benchmark for audio deepfake detectors."""

__version__ = "0.1.0"
