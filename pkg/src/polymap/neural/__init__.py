"""Desk-scale gradient-verified reference of the polygon head."""

from .gradcheck import finite_difference_check
from .head import ENCODER_VARIANTS, PolygonHeadConfig, init_model
from .params import ParamStore
from .tensor import Tensor, corrupt_gradient

__all__ = [
    "ENCODER_VARIANTS",
    "ParamStore",
    "PolygonHeadConfig",
    "Tensor",
    "corrupt_gradient",
    "finite_difference_check",
    "init_model",
]
