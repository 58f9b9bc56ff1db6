from .dense import DTYPE, DenseMap, dense_forward, dense_jacobian
from .flows import (
    ContentFlow,
    FlowNumericError,
    SplineParameterError,
    StyleFlow,
    content_flow_forward,
    rq_spline,
    rq_spline_knots,
    style_flow_forward,
    style_flow_inverse,
)
from .gradcheck import GradCheckReport, grad_check, rel_err
from .tensorio import load_named_tensors, save_named_tensors

__all__ = [
    "DTYPE",
    "DenseMap",
    "dense_forward",
    "dense_jacobian",
    "ContentFlow",
    "StyleFlow",
    "FlowNumericError",
    "SplineParameterError",
    "content_flow_forward",
    "style_flow_forward",
    "style_flow_inverse",
    "rq_spline",
    "rq_spline_knots",
    "GradCheckReport",
    "grad_check",
    "rel_err",
    "save_named_tensors",
    "load_named_tensors",
]
