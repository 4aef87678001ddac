"""Transfer frozen 1D/2D transformers to 3D point cloud classification."""

__version__ = "0.1.0"
