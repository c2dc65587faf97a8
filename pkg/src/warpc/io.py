"""File formats: Middlebury ``.flo``, 8-bit PNG, keypoint CSV."""

import csv
import struct

import numpy as np
from PIL import Image

FLO_MAGIC = 202021.25


class FormatError(ValueError):
    """Raised when a file does not match its declared format."""


def write_flo(path, flow):
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FormatError(f"flow must have shape (h, w, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        fh.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flo(path):
    """Read a ``.flo`` file into a float32 ``(h, w, 2)`` array."""
    with open(path, "rb") as fh:
        header = fh.read(12)
        if len(header) < 12:
            raise FormatError(f"{path}: truncated .flo header")
        magic, w, h = struct.unpack("<fii", header)
        if magic != np.float32(FLO_MAGIC):
            raise FormatError(f"{path}: bad .flo magic {magic!r}")
        if w <= 0 or h <= 0:
            raise FormatError(f"{path}: invalid .flo size {w}x{h}")
        payload = fh.read()
    expected = 4 * 2 * w * h
    if len(payload) != expected:
        raise FormatError(
            f"{path}: expected {expected} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, 2).astype(np.float32)


def read_png(path):
    """Read an 8-bit image as floats in ``[0, 1]``, shape (h, w) or (h, w, 3)."""
    try:
        img = Image.open(path)
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: not a readable image ({exc})") from exc
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_png(path, image):
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def write_mask_png(path, mask):
    Image.fromarray(np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)).save(path)


def read_mask_png(path):
    return np.asarray(Image.open(path).convert("L")) > 127


def flow_preview(flow, max_mag=None):
    """HSV colour coding of a flow as an RGB float image."""
    import cv2

    flow = np.asarray(flow, dtype=np.float64)
    mag = np.hypot(flow[..., 0], flow[..., 1])
    ang = np.arctan2(flow[..., 1], flow[..., 0])
    scale = max_mag if max_mag else max(mag.max(), 1e-9)
    hsv = np.zeros(flow.shape[:2] + (3,), dtype=np.float32)
    hsv[..., 0] = ((ang + np.pi) / (2 * np.pi) * 360.0).astype(np.float32)
    hsv[..., 1] = np.clip(mag / scale, 0, 1)
    hsv[..., 2] = 1.0
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB).astype(np.float64)


def read_keypoints_csv(path):
    """Read ``x,y,x',y'`` rows; returns ``(source, target)`` arrays of shape (n, 2)."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if len(row) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise FormatError(f"{path}:{lineno}: non-numeric value") from None
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 4)
    return arr[:, :2], arr[:, 2:]


def write_keypoints_csv(path, source, target):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for (x, y), (xp, yp) in zip(np.asarray(source), np.asarray(target)):
            writer.writerow([repr(float(x)), repr(float(y)), repr(float(xp)), repr(float(yp))])
