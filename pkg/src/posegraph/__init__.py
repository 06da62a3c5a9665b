"""Convolutional part detectors with a learned spatial model for 2D human pose.

The pipeline has five stages, each usable on its own:

* :mod:`posegraph.dataset` reads annotations, normalises training frames and
  samples patches (plus a synthetic stick-figure generator);
* :mod:`posegraph.convnet` and :mod:`posegraph.trainer` hold the detector
  network and its optimiser;
* :mod:`posegraph.spatial` learns offset priors and filters response maps;
* :mod:`posegraph.inference` runs the scale pyramid and picks detections;
* :mod:`posegraph.evaluation` computes accuracy-within-radius curves.
"""
__version__ = "0.1.0"

from .convnet import Architecture, NetworkParams, ResponseMap, forward_full, init_params  # noqa: E402
from .detector import PartDetector  # noqa: E402
from .inference import PoseDetector, detect  # noqa: E402
from .spatial import SpatialModel  # noqa: E402

__all__ = [
    "Architecture",
    "NetworkParams",
    "PartDetector",
    "PoseDetector",
    "ResponseMap",
    "SpatialModel",
    "detect",
    "forward_full",
    "init_params",
    "__version__",
]
