"""Diffusion-based tactile insertion policies with a dynamical-system output filter, in simulation."""
