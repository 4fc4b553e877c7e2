"""Joint intensity synthesis and deformable registration of multimodal 3D volumes."""

__version__ = "0.1.0"
