"""Articulated body fitting with a pose-conditioned offset surface.

Fits a rigged template body plus a learned per-vertex offset field to
monocular depth / silhouette / 2D-landmark sequences by global
analysis-by-synthesis over all frames.
"""

__version__ = "0.1.0"
