"""Dense flow fields, mappings, bilinear warping and flow composition.

Conventions used throughout the package:

* a flow is an ``(h, w, 2)`` float array of ``(u, v)`` displacements, ``u``
  along columns and ``v`` along rows;
* pixel centres sit at integer coordinates with the origin at the centre of
  the top-left pixel;
* warping samples bilinearly and zero-fills outside the source grid, reporting
  a boolean validity mask instead of clamping.
"""

import numpy as np

from . import kernels


class FieldError(ValueError):
    """Raised for malformed or mismatched dense fields."""


def pixel_grid(h, w):
    """Return ``(X, Y)`` integer pixel coordinates as float arrays."""
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64), ys.astype(np.float64)


def as_flow(F, name="flow"):
    """Validate and return ``F`` as a float64 ``(h, w, 2)`` array."""
    arr = np.asarray(F, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise FieldError(f"{name} must have shape (h, w, 2), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise FieldError(f"{name} has an empty grid {arr.shape[:2]}")
    if not np.all(np.isfinite(arr)):
        raise FieldError(f"{name} contains non-finite values")
    return arr


def check_same_grid(*fields, names=None):
    shapes = [np.shape(f)[:2] for f in fields]
    if len(set(shapes)) > 1:
        label = ", ".join(names) if names else "fields"
        raise FieldError(f"grid mismatch between {label}: {shapes}")


class FlowField:
    """A dense displacement field.

    Thin immutable wrapper around an ``(h, w, 2)`` array. It converts to a
    numpy array via ``np.asarray`` so it can be passed to any operation in the
    package. When produced by :func:`mapping_to_flow` it remembers the mapping
    it came from, which makes the round trip back to a mapping lossless.
    """

    __slots__ = ("data", "_mapping")

    def __init__(self, data, _mapping=None):
        arr = as_flow(data).copy()
        arr.setflags(write=False)
        self.data = arr
        self._mapping = _mapping

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def u(self):
        return self.data[..., 0]

    @property
    def v(self):
        return self.data[..., 1]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self):
        return f"FlowField({self.height}x{self.width})"


class MappingField:
    """A dense field of absolute target coordinates ``(x, y)``."""

    __slots__ = ("data", "_flow")

    def __init__(self, data, _flow=None):
        arr = as_flow(data, name="mapping").copy()
        arr.setflags(write=False)
        self.data = arr
        self._flow = _flow

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self):
        return f"MappingField({self.height}x{self.width})"


def flow_to_mapping(F):
    """``M(x) = x + F(x)``."""
    if isinstance(F, FlowField) and F._mapping is not None:
        return F._mapping
    flow = F if isinstance(F, FlowField) else FlowField(F)
    X, Y = pixel_grid(flow.height, flow.width)
    coords = flow.data + np.stack([X, Y], axis=-1)
    return MappingField(coords, _flow=flow)


def mapping_to_flow(M):
    """Inverse of :func:`flow_to_mapping`: ``F(x) = M(x) - x``."""
    if isinstance(M, MappingField) and M._flow is not None:
        return M._flow
    mapping = M if isinstance(M, MappingField) else MappingField(M)
    X, Y = pixel_grid(mapping.height, mapping.width)
    disp = mapping.data - np.stack([X, Y], axis=-1)
    return FlowField(disp, _mapping=mapping)


def _as_channels(T):
    arr = np.asarray(T, dtype=np.float64)
    if arr.ndim == 2:
        return arr[..., None], True
    if arr.ndim == 3:
        return arr, False
    raise FieldError(f"field must be (h, w) or (h, w, c), got {arr.shape}")


def sample_at(T, x, y):
    """Bilinearly sample ``T`` at absolute coordinates; returns ``(out, valid)``."""
    src, squeeze = _as_channels(T)
    out, valid = kernels.bilinear_sample(src, x, y)
    return (out[..., 0] if squeeze else out), valid


def warp(T, F):
    """Warp ``T`` by ``F``: ``out(x) = T(x + F(x))``.

    Parameters
    ----------
    T : array_like, shape (h, w) or (h, w, c)
        Image, flow or any dense field on the same grid as ``F``.
    F : array_like, shape (h, w, 2)

    Returns
    -------
    out : ndarray
        Same shape as ``T``; zero where the sample falls outside the grid.
    valid : ndarray of bool, shape (h, w)
    """
    flow = as_flow(F)
    src, squeeze = _as_channels(T)
    check_same_grid(src, flow, names=("T", "F"))
    X, Y = pixel_grid(*flow.shape[:2])
    out, valid = kernels.bilinear_sample(src, X + flow[..., 0], Y + flow[..., 1])
    return (out[..., 0] if squeeze else out), valid


def compose_flows(F_12, F_23):
    """Chain two flows: ``F_13 = F_12 + warp(F_23, F_12)``."""
    a = as_flow(F_12, "F_12")
    b = as_flow(F_23, "F_23")
    check_same_grid(a, b, names=("F_12", "F_23"))
    warped, valid = warp(b, a)
    return a + warped, valid


def central_crop(T, s):
    """Centred ``s x s`` window; odd margins drop the extra row/column at the bottom/right."""
    arr = np.asarray(T)
    h, w = arr.shape[:2]
    if s < 1 or s > min(h, w):
        raise FieldError(f"crop size {s} does not fit a {h}x{w} field")
    top = (h - s) // 2
    left = (w - s) // 2
    return arr[top:top + s, left:left + s].copy()


def crop_offset(h, w, s):
    """Top-left corner ``(top, left)`` used by :func:`central_crop`."""
    return (h - s) // 2, (w - s) // 2


def _resample_coords(h, w, new_h, new_w):
    ys, xs = np.mgrid[0:new_h, 0:new_w].astype(np.float64)
    sx = (xs + 0.5) * (w / new_w) - 0.5
    sy = (ys + 0.5) * (h / new_h) - 0.5
    return np.clip(sx, 0.0, w - 1), np.clip(sy, 0.0, h - 1)


def resize_field(T, new_h, new_w):
    """Bilinear resample of any field to ``new_h x new_w`` (border-clamped)."""
    if new_h < 1 or new_w < 1:
        raise FieldError(f"target size must be positive, got {new_h}x{new_w}")
    src, squeeze = _as_channels(T)
    h, w = src.shape[:2]
    if (h, w) == (new_h, new_w):
        out = src.copy()
    else:
        sx, sy = _resample_coords(h, w, new_h, new_w)
        out, _ = kernels.bilinear_sample(src, sx, sy)
    return out[..., 0] if squeeze else out


def resize_flow(F, new_h, new_w):
    """Resample a flow and rescale its components to the new pixel units."""
    flow = as_flow(F)
    h, w = flow.shape[:2]
    out = resize_field(flow, new_h, new_w)
    if (h, w) != (new_h, new_w):
        out[..., 0] *= new_w / w
        out[..., 1] *= new_h / h
    return out
