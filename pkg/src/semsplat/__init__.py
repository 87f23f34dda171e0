"""Semantic Gaussian-splatting SLAM on CPU with oracle vision inputs."""
__version__ = "0.1.0"
