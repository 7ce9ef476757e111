"""Mesh-bound Gaussian splatting on the CPU."""
