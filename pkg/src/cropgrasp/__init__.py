"""Two-stage crop detection and vacuum grasp-point regression on synthetic scenes."""

from .detgeom import BBox, Detection, GridTarget, decode_predictions, encode_grid, iou, nms
from .errors import CropGraspError
from .tensor import Tensor, backward, grad_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "CropGraspError",
    "Detection",
    "GridTarget",
    "Tensor",
    "backward",
    "decode_predictions",
    "encode_grid",
    "grad_check",
    "iou",
    "nms",
    "no_grad",
]
