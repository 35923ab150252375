"""Desk-scale neural implicit 3D reconstruction from single posed images.

A small numpy pipeline that learns, per object category, a deformation of
object space into a shared canonical signed distance field, supervised only
by single-view silhouettes and colors through a recurrent differentiable
ray marcher. Includes its own reverse-mode autodiff engine, a procedural
synthetic dataset with analytic ground truth, mesh extraction, and
point-cloud reconstruction metrics.
"""

from . import autodiff, extraction, losses, metrics, nets, renderer, \
    synthdata, trainer

__all__ = ["autodiff", "extraction", "losses", "metrics", "nets",
           "renderer", "synthdata", "trainer"]

__version__ = "0.1.0"
