"""Strictly rotation-invariant point cloud features, classification and
segmentation at desk scale."""

__version__ = "0.1.0"

from . import data, geom, graph, keypoint, net  # noqa: F401
