"""Multi-animal 3D reconstruction toolkit: body model, matching, losses, metrics, scene synthesis, toy decoder."""

__version__ = "0.1.0"
