"""ViT encoder + anchor-box detector for metal surface defects, on a small numpy autodiff engine."""

from .anchors import BBox, build_anchor_grid
from .config import RunConfig, load_config
from .model import Detector, predict
from .tensor import Tensor

__all__ = ["BBox", "Detector", "RunConfig", "Tensor", "build_anchor_grid", "load_config", "predict"]
__version__ = "0.1.0"
