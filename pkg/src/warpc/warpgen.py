"""Random synthetic warps and training-triplet construction.

Parametric transforms act on normalised coordinates in ``[-1, 1]^2`` where the
image borders (not the outer pixel centres) sit at -1 and 1, so pixel ``x``
maps to ``(2x + 1) / w - 1``. Every transform maps a location of the warped
image ``I'`` to a location of the source image ``I``; rasterising it yields
the flow ``W`` with ``I'(x) = I(x + W(x))``.
"""

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .flowcore import FieldError, central_crop, compose_flows, crop_offset, resize_field, warp

FAMILIES = ("homography", "tps", "affine_tps")
SCHEMES = ("uniform", "gaussian")

_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
_TPS_GRID = np.array([[x, y] for y in (-1.0, 0.0, 1.0) for x in (-1.0, 0.0, 1.0)])
TPS_RIDGE = 1e-9
MAX_DEGENERATE_DRAWS = 10


class ConfigError(ValueError):
    """Invalid warp distribution configuration; the message names the field."""


class WarpSamplingError(RuntimeError):
    """Raised when a sampler keeps drawing degenerate transforms."""


# --------------------------------------------------------------------------
# parameter types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class HomographyParams:
    matrix: np.ndarray
    src: np.ndarray = field(default_factory=lambda: _CORNERS.copy())
    dst: np.ndarray = field(default_factory=lambda: _CORNERS.copy())

    @classmethod
    def identity(cls):
        return cls(np.eye(3))

    def displacement(self, pts):
        H = self.matrix
        x, y = pts[:, 0], pts[:, 1]
        den = H[2, 0] * x + H[2, 1] * y + H[2, 2]
        qx = (H[0, 0] * x + H[0, 1] * y + H[0, 2]) / den
        qy = (H[1, 0] * x + H[1, 1] * y + H[1, 2]) / den
        return np.stack([qx - x, qy - y], axis=1)


@dataclass(frozen=True)
class TpsParams:
    src: np.ndarray
    dst: np.ndarray
    weights: np.ndarray  # (n, 2) kernel weights
    affine: np.ndarray  # (3, 2) coefficients of [1, x, y]

    @classmethod
    def fit(cls, src, dst, ridge=TPS_RIDGE):
        """Fit the displacement ``dst - src`` with a thin-plate spline."""
        src = np.asarray(src, dtype=np.float64)
        dst = np.asarray(dst, dtype=np.float64)
        n = len(src)
        K = _tps_kernel(src, src) + ridge * np.eye(n)
        P = np.hstack([np.ones((n, 1)), src])
        L = np.zeros((n + 3, n + 3))
        L[:n, :n] = K
        L[:n, n:] = P
        L[n:, :n] = P.T
        rhs = np.zeros((n + 3, 2))
        rhs[:n] = dst - src
        sol = np.linalg.solve(L, rhs)
        return cls(src, dst, sol[:n], sol[n:])

    @classmethod
    def identity(cls):
        return cls.fit(_TPS_GRID, _TPS_GRID)

    def displacement(self, pts):
        P = np.hstack([np.ones((len(pts), 1)), pts])
        return P @ self.affine + _tps_kernel(pts, self.src) @ self.weights


@dataclass(frozen=True)
class AffineParams:
    scale: float = 1.0
    rotation: float = 0.0
    shear: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError(f"affine scale must be positive, got {self.scale}")

    @property
    def matrix(self):
        """2x3 matrix: ``scale * rotation * shear`` followed by translation."""
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        R = np.array([[c, -s], [s, c]])
        Sh = np.array([[1.0, math.tan(self.shear)], [0.0, 1.0]])
        A = self.scale * R @ Sh
        return np.hstack([A, [[self.tx], [self.ty]]])

    def displacement(self, pts):
        M = self.matrix
        D = M[:, :2] - np.eye(2)
        return pts @ D.T + M[:, 2]


@dataclass(frozen=True)
class CompositeParams:
    """``second`` applied after ``first`` (mapping ``second o first``)."""

    first: object
    second: object

    def displacement(self, pts):
        d1 = self.first.displacement(pts)
        return d1 + self.second.displacement(pts + d1)


@dataclass(frozen=True)
class ElasticParams:
    sigma: float = 25.0
    magnitude: float = 15.0
    centers: tuple = ()  # ((x, y), ...) in pixels
    spreads: tuple = ()  # pixels, one per region

    def __post_init__(self):
        if self.magnitude < 0:
            raise ConfigError("elastic magnitude must be >= 0")
        if len(self.centers) != len(self.spreads):
            raise ConfigError("elastic centers and spreads differ in length")

    @property
    def regions(self):
        return len(self.centers)


@dataclass
class WarpDistributionConfig:
    sigma_h: float = 0.33
    tau: float = 0.45
    t: float = 0.25
    alpha: float = math.pi / 12
    sigma_tps: float = 0.08
    scheme: str = "uniform"
    elastic: bool = False
    elastic_sigma: float = 25.0
    elastic_magnitude: float = 15.0
    elastic_max_regions: int = 5
    elastic_min_spread: float = 10.0
    elastic_max_spread: float | None = None  # None: frame size / 8
    family_probs: dict = field(
        default_factory=lambda: {"homography": 1 / 3, "tps": 1 / 3, "affine_tps": 1 / 3})
    seed: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("sigma_h", "tau", "t", "alpha", "sigma_tps", "elastic_sigma",
                     "elastic_magnitude", "elastic_min_spread"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name}: expected a number, got {value!r}")
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"{name}: must be finite and >= 0, got {value!r}")
        for name in ("sigma_h", "sigma_tps"):
            if getattr(self, name) > 1:
                raise ConfigError(f"{name}: must lie in [0, 1] (normalised units)")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme: expected one of {SCHEMES}, got {self.scheme!r}")
        if not isinstance(self.elastic, bool):
            raise ConfigError(f"elastic: expected a boolean, got {self.elastic!r}")
        if (isinstance(self.elastic_max_regions, bool)
                or not isinstance(self.elastic_max_regions, int)
                or self.elastic_max_regions < 0):
            raise ConfigError("elastic_max_regions: expected an integer >= 0")
        if self.elastic_max_spread is not None and self.elastic_max_spread < self.elastic_min_spread:
            raise ConfigError("elastic_max_spread: must be >= elastic_min_spread")
        if not isinstance(self.family_probs, dict) or set(self.family_probs) - set(FAMILIES):
            raise ConfigError(f"family_probs: keys must be among {FAMILIES}")
        probs = [self.family_probs.get(f, 0.0) for f in FAMILIES]
        if any((not isinstance(p, (int, float))) or p < 0 for p in probs):
            raise ConfigError("family_probs: probabilities must be numbers >= 0")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigError(f"family_probs: must sum to 1, got {sum(probs)}")
        if self.seed is not None and (isinstance(self.seed, bool) or not isinstance(self.seed, int)):
            raise ConfigError(f"seed: expected an integer, got {self.seed!r}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config: expected a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown field")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def stage1_config(**overrides):
    """Uniform homography/TPS/affine-TPS warps of the first training stage."""
    return WarpDistributionConfig(**overrides)


def stage2_config(**overrides):
    """Stronger warps with elastic perturbations (second training stage)."""
    params = dict(sigma_h=0.4, sigma_tps=0.26, elastic=True)
    params.update(overrides)
    return WarpDistributionConfig(**params)


# --------------------------------------------------------------------------
# samplers
# --------------------------------------------------------------------------

def _tps_kernel(a, b):
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = d2 * np.log(d2)
    out[d2 == 0] = 0.0
    return out


def _draw(rng, scheme, spread, size):
    if scheme == "uniform":
        return rng.uniform(-spread, spread, size)
    return rng.normal(0.0, spread, size)


def homography_from_points(src, dst):
    """Four-point direct linear solve with ``H[2, 2] = 1``."""
    A = np.zeros((8, 8))
    b = np.zeros(8)
    for k, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        A[2 * k] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        A[2 * k + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * k] = u
        b[2 * k + 1] = v
    h = np.linalg.solve(A, b)
    return np.append(h, 1.0).reshape(3, 3)


def _convex_quad(q):
    cross = []
    for k in range(4):
        a, b, c = q[k], q[(k + 1) % 4], q[(k + 2) % 4]
        cross.append((b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]))
    cross = np.array(cross)
    return bool(np.all(cross > 1e-9) or np.all(cross < -1e-9))


def sample_homography(cfg, rng):
    rng = np.random.default_rng(rng)
    if cfg.sigma_h == 0:
        return HomographyParams.identity()
    for _ in range(MAX_DEGENERATE_DRAWS):
        dst = _CORNERS + _draw(rng, cfg.scheme, cfg.sigma_h, (4, 2))
        if not _convex_quad(dst):
            continue
        try:
            H = homography_from_points(_CORNERS, dst)
        except np.linalg.LinAlgError:
            continue
        den = H[2, :2] @ _CORNERS.T + H[2, 2]
        if abs(np.linalg.det(H)) > 1e-8 and np.all(den > 0):
            return HomographyParams(H, _CORNERS.copy(), dst)
    raise WarpSamplingError(
        f"{MAX_DEGENERATE_DRAWS} degenerate homography draws with sigma_h={cfg.sigma_h}")


def sample_tps(sigma, rng, scheme="uniform"):
    if not 0 <= sigma <= 1:
        raise ConfigError(f"sigma: TPS range must lie in [0, 1], got {sigma}")
    rng = np.random.default_rng(rng)
    dst = _TPS_GRID + _draw(rng, scheme, sigma, _TPS_GRID.shape)
    return TpsParams.fit(_TPS_GRID, dst)


def sample_affine(cfg, rng):
    rng = np.random.default_rng(rng)
    if cfg.scheme == "uniform":
        scale = rng.uniform(1 - cfg.tau, 1 + cfg.tau)
    else:
        scale = rng.normal(1.0, cfg.tau)
        for _ in range(MAX_DEGENERATE_DRAWS):
            if scale > 0:
                break
            scale = rng.normal(1.0, cfg.tau)
        else:
            raise WarpSamplingError("could not draw a positive affine scale")
    if scale <= 0:
        raise WarpSamplingError(f"affine scale range tau={cfg.tau} admits non-positive scales")
    rotation, shear = _draw(rng, cfg.scheme, cfg.alpha, 2)
    tx, ty = _draw(rng, cfg.scheme, cfg.t, 2)
    return AffineParams(float(scale), float(rotation), float(shear), float(tx), float(ty))


def sample_transform(cfg, rng):
    """Draw a family according to ``cfg.family_probs`` and its parameters.

    Returns ``(family, params)``.
    """
    rng = np.random.default_rng(rng)
    probs = np.array([cfg.family_probs.get(f, 0.0) for f in FAMILIES], dtype=np.float64)
    family = FAMILIES[int(rng.choice(len(FAMILIES), p=probs / probs.sum()))]
    if family == "homography":
        params = sample_homography(cfg, rng)
    elif family == "tps":
        params = sample_tps(cfg.sigma_h, rng, cfg.scheme)
    else:
        affine = sample_affine(cfg, rng)
        tps = sample_tps(cfg.sigma_tps, rng, cfg.scheme)
        params = CompositeParams(affine, tps)
    return family, params


def normalized_coords(h, w, offset=(0, 0), frame=None):
    """Normalised coordinates of an ``h x w`` window at ``offset`` inside ``frame``."""
    fh, fw = frame if frame is not None else (h, w)
    top, left = offset
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    nx = (2.0 * (xs + left) + 1.0) / fw - 1.0
    ny = (2.0 * (ys + top) + 1.0) / fh - 1.0
    return np.stack([nx.ravel(), ny.ravel()], axis=1)


def rasterize(params, h, w, offset=(0, 0), frame=None):
    """Dense pixel flow of a parametric transform on an ``h x w`` grid.

    ``offset`` and ``frame`` evaluate a sub-window of a larger frame, which is
    what central cropping of a rasterised flow produces.
    """
    if h < 1 or w < 1:
        raise FieldError(f"raster size must be positive, got {h}x{w}")
    fh, fw = frame if frame is not None else (h, w)
    pts = normalized_coords(h, w, offset, (fh, fw))
    disp = params.displacement(pts)
    flow = np.empty((h, w, 2))
    flow[..., 0] = disp[:, 0].reshape(h, w) * (fw / 2.0)
    flow[..., 1] = disp[:, 1].reshape(h, w) * (fh / 2.0)
    return flow


def sample_elastic_params(cfg, h, w, rng):
    rng = np.random.default_rng(rng)
    n = int(rng.integers(1, cfg.elastic_max_regions + 1)) if cfg.elastic_max_regions > 0 else 0
    max_spread = cfg.elastic_max_spread
    if max_spread is None:
        max_spread = max(cfg.elastic_min_spread, max(h, w) / 8.0)
    centers = tuple((float(rng.uniform(0, w - 1)), float(rng.uniform(0, h - 1))) for _ in range(n))
    spreads = tuple(float(rng.uniform(cfg.elastic_min_spread, max_spread)) for _ in range(n))
    return ElasticParams(cfg.elastic_sigma, cfg.elastic_magnitude, centers, spreads)


def elastic_masks(params, h, w):
    """Smooth region masks: Gaussians scaled by 2 and clipped to 1."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    masks = []
    for (cx, cy), spread in zip(params.centers, params.spreads):
        g = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * spread ** 2))
        masks.append(np.minimum(2.0 * g, 1.0))
    return masks


def sample_elastic(params, h, w, rng):
    """Residual flow ``sum_i E * S_i`` from a Gaussian-smoothed random field ``E``.

    ``E`` is rescaled so its largest vector has length ``magnitude``; the summed
    masks are clipped to 1 so overlapping regions never exceed it.
    """
    if params.regions == 0 or params.magnitude == 0:
        return np.zeros((h, w, 2))
    rng = np.random.default_rng(rng)
    raw = rng.uniform(-1.0, 1.0, (2, h, w))
    E = np.stack([ndimage.gaussian_filter(raw[k], params.sigma, mode="constant")
                  for k in range(2)], axis=-1)
    peak = np.max(np.hypot(E[..., 0], E[..., 1]))
    if peak > 0:
        E *= params.magnitude / peak
    mask = np.minimum(np.sum(elastic_masks(params, h, w), axis=0), 1.0)
    return E * mask[..., None]


def sample_warp(cfg, h, w, rng, return_params=False):
    """Sample a dense synthetic flow ``W`` of size ``h x w``."""
    rng = np.random.default_rng(rng)
    family, params = sample_transform(cfg, rng)
    flow = rasterize(params, h, w)
    if cfg.elastic:
        eparams = sample_elastic_params(cfg, h, w, rng)
        residual = sample_elastic(eparams, h, w, rng)
        flow, _ = compose_flows(flow, residual)
    if return_params:
        return flow, family, params
    return flow


# --------------------------------------------------------------------------
# triplets
# --------------------------------------------------------------------------

@dataclass
class JitterConfig:
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05
    blur_prob: float = 0.2
    blur_kernels: tuple = (3, 5, 7)
    blur_sigma: tuple = (0.2, 2.0)


@dataclass
class Triplet:
    I: np.ndarray
    I_prime: np.ndarray
    J: np.ndarray
    W: np.ndarray  # ground-truth flow I' -> I on the crop
    valid: np.ndarray


def _check_image(img, name):
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] not in (1, 3)):
        raise FieldError(f"{name}: expected a grey or RGB image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FieldError(f"{name}: contains non-finite values")
    return arr


def appearance_jitter(img, rng, cfg=None):
    """Brightness, contrast, saturation and hue changes plus an occasional blur."""
    import cv2

    cfg = cfg or JitterConfig()
    rng = np.random.default_rng(rng)
    out = np.array(img, dtype=np.float64)
    rgb = out.ndim == 3 and out.shape[2] == 3
    out = out + rng.uniform(-cfg.brightness, cfg.brightness)
    grey = out.mean(axis=-1, keepdims=True) if rgb else out
    c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
    out = grey.mean() + c * (out - grey.mean())
    s = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
    dh = rng.uniform(-cfg.hue, cfg.hue)
    if rgb:
        grey = out.mean(axis=-1, keepdims=True)
        out = grey + s * (out - grey)
        hsv = cv2.cvtColor(np.clip(out, 0, 1).astype(np.float32), cv2.COLOR_RGB2HSV)
        hsv[..., 0] = np.mod(hsv[..., 0] + 360.0 * dh, 360.0)
        out = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB).astype(np.float64)
    if rng.uniform() < cfg.blur_prob:
        k = int(rng.choice(cfg.blur_kernels))
        sigma = rng.uniform(*cfg.blur_sigma)
        out = cv2.GaussianBlur(out, (k, k), sigma, borderType=cv2.BORDER_REFLECT)
    return np.clip(out, 0.0, 1.0)


def build_triplet(I, J, cfg, s_r, s, rng, jitter=True, W=None):
    """Build ``(I, I', J)`` at ``s x s`` from an image pair.

    Both images are resized to ``s_r x s_r``, ``I' = warp(I, W)`` with ``W``
    sampled at ``s_r`` (or given), then everything is centrally cropped to ``s``.
    Appearance jitter touches ``I'`` only.
    """
    if s > s_r:
        raise FieldError(f"crop size s={s} exceeds resize size s_r={s_r}")
    I = _check_image(I, "I")
    J = _check_image(J, "J")
    rng = np.random.default_rng(rng)
    I_r = resize_field(I, s_r, s_r)
    J_r = resize_field(J, s_r, s_r)
    if W is None:
        W = sample_warp(cfg, s_r, s_r, rng)
    I_p, valid = warp(I_r, W)
    I_c, Ip_c, J_c = (central_crop(x, s) for x in (I_r, I_p, J_r))
    W_c = central_crop(W, s)
    valid_c = central_crop(valid, s)
    if jitter:
        Ip_c = appearance_jitter(Ip_c, rng)
    return Triplet(I_c, Ip_c, J_c, W_c, valid_c)


__all__ = [
    "AffineParams", "CompositeParams", "ConfigError", "ElasticParams", "HomographyParams",
    "JitterConfig", "TpsParams", "Triplet", "WarpDistributionConfig", "WarpSamplingError",
    "appearance_jitter", "build_triplet", "crop_offset", "elastic_masks",
    "homography_from_points", "normalized_coords", "rasterize", "sample_affine",
    "sample_elastic", "sample_elastic_params", "sample_homography", "sample_tps",
    "sample_transform", "sample_warp", "stage1_config", "stage2_config",
]
