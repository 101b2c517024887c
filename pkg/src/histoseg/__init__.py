"""Interactive class-conditioned tissue segmentation toolkit.

Subpackages cover the differentiable tensor kernels, raster geometry,
corpus management, spatial-omics label conversion, the segmentation model,
human-in-the-loop refinement, evaluation metrics, survival statistics, and
the CLI/HTTP operational surface.
"""

__version__ = "0.1.0"
