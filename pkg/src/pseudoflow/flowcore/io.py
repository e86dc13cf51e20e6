"""Flow and image file formats.

Two flow formats:

* KITTI-style 16-bit PNG: channels (R, G, B) = (u, v, valid) with
  enc = round(f * 64 + 2**15); lossy (1/64 px quantization, |f| < 512).
* Raw ".flowraw" container: 8-byte magic, little-endian uint32 width and
  height, then float32 LE (H, W, 2) data. Lossless, used for pseudo labels.

Images are ordinary 8-bit PNGs, masks 8-bit PNGs with 0/255 values.
"""

from __future__ import annotations

import struct

import cv2
import numpy as np

FLOW_RAW_MAGIC = b"FLOWRAW1"


class FlowFormatError(ValueError):
    """Malformed or out-of-contract flow file content."""


def write_kitti_png(flow: np.ndarray, mask: np.ndarray, path: str) -> None:
    flow = np.asarray(flow, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FlowFormatError(f"expected (H, W, 2) flow, got {flow.shape}")
    if mask.shape != flow.shape[:2]:
        raise FlowFormatError(f"mask shape {mask.shape} != {flow.shape[:2]}")
    if np.abs(flow[mask]).max(initial=0.0) >= 512.0:
        raise FlowFormatError("flow magnitude out of KITTI range (|f| < 512)")
    enc = np.round(flow * 64.0 + 2 ** 15)
    enc = np.clip(enc, 0, 65535).astype(np.uint16)
    out = np.zeros(flow.shape[:2] + (3,), dtype=np.uint16)
    # cv2 writes channels in BGR order; file channels must be (u, v, valid).
    out[..., 2] = enc[..., 0]
    out[..., 1] = enc[..., 1]
    out[..., 0] = mask.astype(np.uint16)
    if not cv2.imwrite(path, out):
        raise IOError(f"failed to write {path}")


def read_kitti_png(path: str):
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FlowFormatError(f"cannot read PNG: {path}")
    if raw.ndim != 3 or raw.shape[2] != 3 or raw.dtype != np.uint16:
        raise FlowFormatError(f"not a 16-bit 3-channel flow PNG: {path}")
    flow = np.empty(raw.shape[:2] + (2,), dtype=np.float64)
    flow[..., 0] = (raw[..., 2].astype(np.float64) - 2 ** 15) / 64.0
    flow[..., 1] = (raw[..., 1].astype(np.float64) - 2 ** 15) / 64.0
    mask = raw[..., 0] > 0
    return flow, mask


def write_flow_raw(flow: np.ndarray, path: str) -> None:
    flow = np.ascontiguousarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FlowFormatError(f"expected (H, W, 2) flow, got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLOW_RAW_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(flow.astype("<f4").tobytes())


def read_flow_raw(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != FLOW_RAW_MAGIC:
            raise FlowFormatError(f"bad magic in {path}: {magic!r}")
        w, h = struct.unpack("<II", fh.read(8))
        data = fh.read(4 * w * h * 2)
        if len(data) != 4 * w * h * 2:
            raise FlowFormatError(f"truncated flow file: {path}")
        extra = fh.read(1)
        if extra:
            raise FlowFormatError(f"trailing bytes in flow file: {path}")
    return np.frombuffer(data, dtype="<f4").reshape(h, w, 2).astype(np.float32)


def write_image(img: np.ndarray, path: str) -> None:
    """Write a (H, W) or (H, W, 3) array as an 8-bit PNG.

    Float inputs are assumed in [0, 1] and scaled; integer inputs are
    written as-is.
    """
    img = np.asarray(img)
    if np.issubdtype(img.dtype, np.floating):
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    else:
        img = img.astype(np.uint8)
    if img.ndim == 3:
        img = img[..., ::-1]  # RGB -> BGR for cv2
    if not cv2.imwrite(path, img):
        raise IOError(f"failed to write {path}")


def read_image(path: str, gray: bool = True) -> np.ndarray:
    """Read a PNG; grayscale returns (H, W) floats in [0, 1]."""
    flag = cv2.IMREAD_GRAYSCALE if gray else cv2.IMREAD_COLOR
    raw = cv2.imread(path, flag)
    if raw is None:
        raise IOError(f"cannot read image: {path}")
    if not gray:
        raw = raw[..., ::-1]
    return raw.astype(np.float64) / 255.0


def write_mask(mask: np.ndarray, path: str) -> None:
    write_image(np.asarray(mask, dtype=bool).astype(np.uint8) * 255, path)


def read_mask(path: str) -> np.ndarray:
    raw = cv2.imread(path, cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise IOError(f"cannot read mask: {path}")
    return raw > 127


__all__ = [
    "FLOW_RAW_MAGIC",
    "FlowFormatError",
    "write_kitti_png",
    "read_kitti_png",
    "write_flow_raw",
    "read_flow_raw",
    "write_image",
    "read_image",
    "write_mask",
    "read_mask",
]
