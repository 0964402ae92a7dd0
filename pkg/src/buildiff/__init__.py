"""Image-conditional two-stage point cloud diffusion for buildings."""

__version__ = "0.1.0"
