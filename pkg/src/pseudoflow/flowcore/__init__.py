"""Optical-flow domain utilities: metrics, warping, color coding, file I/O."""

from .io import (
    FLOW_RAW_MAGIC,
    FlowFormatError,
    read_flow_raw,
    read_image,
    read_kitti_png,
    read_mask,
    write_flow_raw,
    write_image,
    write_kitti_png,
    write_mask,
)
from .metrics import EmptyMaskError, endpoint_errors, epe, f1_all, outlier_counts
from .viz import flow_to_color
from .warp import warp_backward

__all__ = [
    "FLOW_RAW_MAGIC",
    "FlowFormatError",
    "EmptyMaskError",
    "endpoint_errors",
    "epe",
    "f1_all",
    "outlier_counts",
    "flow_to_color",
    "warp_backward",
    "read_flow_raw",
    "read_image",
    "read_kitti_png",
    "read_mask",
    "write_flow_raw",
    "write_image",
    "write_kitti_png",
    "write_mask",
]
