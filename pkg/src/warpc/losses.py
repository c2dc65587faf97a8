"""Warp-consistency losses with analytic gradients.

Every loss reduces a per-pixel residual with a per-pixel norm and averages it
over the pixels where all warps involved sampled inside the grid (and, for
the visibility-masked variant, where the visibility test passes). An empty
valid set gives a loss of 0 with ``count == 0``.

Flow argument names follow the image triplet ``(I, I', J)``:

=========  ==================
``F_ij``   prediction I -> J
``F_ji``   prediction J -> I
``F_ipj``  prediction I' -> J
``F_jip``  prediction J -> I'
``F_ipi``  prediction I' -> I
``W``      known warp I' -> I
=========  ==================
"""

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels
from .flowcore import FieldError, as_flow, check_same_grid, pixel_grid

NORMS = ("l2", "l1")
PHOTOMETRIC_KINDS = ("charbonnier", "ssim")


@dataclass
class LossConfig:
    norm: str = "l2"
    alpha1: float = 0.025
    alpha2: float = 0.5
    stop_gradient: bool = True
    photometric: str = "charbonnier"
    charbonnier_eps: float = 1e-3
    ssim_window: int = 11
    visibility: bool = True

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm: expected one of {NORMS}, got {self.norm!r}")
        if self.photometric not in PHOTOMETRIC_KINDS:
            raise ValueError(f"photometric: expected one of {PHOTOMETRIC_KINDS}")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("alpha1, alpha2: must be >= 0")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window: must be a positive odd integer")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"{unknown[0]}: unknown field")
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class LossValue:
    value: float
    residual: np.ndarray
    mask: np.ndarray
    count: int
    parts: dict = field(default_factory=dict)

    def to_dict(self):
        out = {"value": float(self.value), "count": int(self.count)}
        out.update({k: float(v) for k, v in self.parts.items()})
        return out


@dataclass
class LossGradient:
    loss: LossValue
    grads: dict


# --------------------------------------------------------------------------
# differentiable building blocks
# --------------------------------------------------------------------------

class _Warp:
    """``warp(T, F)`` with enough state kept for the backward pass."""

    def __init__(self, T, F):
        X, Y = pixel_grid(*F.shape[:2])
        self.src = np.ascontiguousarray(T if T.ndim == 3 else T[..., None])
        self.x = X + F[..., 0]
        self.y = Y + F[..., 1]
        self.out, self.valid = kernels.bilinear_sample(self.src, self.x, self.y)

    def backward(self, g):
        gsrc, gx, gy = kernels.bilinear_sample_backward(self.src, self.x, self.y, g)
        return gsrc, np.stack([gx, gy], axis=-1)


class _Compose:
    """``P + warp(Q, P)`` with backward."""

    def __init__(self, P, Q):
        self.w = _Warp(Q, P)
        self.out = P + self.w.out
        self.valid = self.w.valid

    def backward(self, g, stop_gradient):
        gQ, gcoord = self.w.backward(g)
        gP = g if stop_gradient else g + gcoord
        return gP, gQ


def _reduce(r, mask, norm):
    """Mean per-pixel norm over ``mask`` and its gradient wrt ``r``."""
    count = int(mask.sum())
    if count == 0:
        return 0.0, np.zeros_like(r), count
    if norm == "l2":
        mag = np.sqrt(np.sum(r * r, axis=-1))
        value = float(mag[mask].sum() / count)
        with np.errstate(invalid="ignore", divide="ignore"):
            g = np.where((mask & (mag > 0))[..., None], r / mag[..., None], 0.0)
    else:
        mag = np.sum(np.abs(r), axis=-1)
        value = float(mag[mask].sum() / count)
        g = np.where(mask[..., None], np.sign(r), 0.0)
    return value, g / count, count


def _flows(names, arrays):
    out = [as_flow(a, n) for n, a in zip(names, arrays)]
    check_same_grid(*out, names=names)
    return out


# --------------------------------------------------------------------------
# losses: each private function returns (LossValue, grads-or-None)
# --------------------------------------------------------------------------

def _forward_backward(F_ij, F_ji, cfg, grad):
    F_ij, F_ji = _flows(("F_ij", "F_ji"), (F_ij, F_ji))
    c = _Compose(F_ij, F_ji)
    value, g, n = _reduce(c.out, c.valid, cfg.norm)
    loss = LossValue(value, c.out, c.valid, n)
    if not grad:
        return loss, None
    g_ij, g_ji = c.backward(g, cfg.stop_gradient)
    return loss, {"F_ij": g_ij, "F_ji": g_ji}


def _warp_supervision(F_ipi, W, cfg, grad):
    F_ipi, W = _flows(("F_ipi", "W"), (F_ipi, W))
    r = F_ipi - W
    mask = np.ones(r.shape[:2], dtype=bool)
    value, g, n = _reduce(r, mask, cfg.norm)
    loss = LossValue(value, r, mask, n)
    return loss, ({"F_ipi": g} if grad else None)


def _ipj_bipath(F_ipj, F_ij, W, cfg, grad):
    F_ipj, F_ij, W = _flows(("F_ipj", "F_ij", "W"), (F_ipj, F_ij, W))
    w = _Warp(F_ij, W)
    r = F_ipj - W - w.out
    value, g, n = _reduce(r, w.valid, cfg.norm)
    loss = LossValue(value, r, w.valid, n)
    if not grad:
        return loss, None
    g_ij, _ = w.backward(-g)
    return loss, {"F_ipj": g, "F_ij": g_ij}


def _ji_bipath(F_jip, F_ji, W, cfg, grad):
    F_jip, F_ji, W = _flows(("F_jip", "F_ji", "W"), (F_jip, F_ji, W))
    c = _Compose(F_jip, W)
    r = c.out - F_ji
    value, g, n = _reduce(r, c.valid, cfg.norm)
    loss = LossValue(value, r, c.valid, n)
    if not grad:
        return loss, None
    g_jip, _ = c.backward(g, cfg.stop_gradient)
    return loss, {"F_jip": g_jip, "F_ji": -g}


def _w_bipath_parts(F_ipj, F_ji, W):
    F_ipj, F_ji, W = _flows(("F_ipj", "F_ji", "W"), (F_ipj, F_ji, W))
    c = _Compose(F_ipj, F_ji)
    return F_ipj, W, c, c.out - W


def _w_bipath(F_ipj, F_ji, W, cfg, grad, mask=None):
    _, _, c, r = _w_bipath_parts(F_ipj, F_ji, W)
    m = c.valid if mask is None else (mask & c.valid)
    value, g, n = _reduce(r, m, cfg.norm)
    loss = LossValue(value, r, m, n)
    if not grad:
        return loss, None
    g_ipj, g_ji = c.backward(g, cfg.stop_gradient)
    return loss, {"F_ipj": g_ipj, "F_ji": g_ji}


def _visibility(F_ipj, c, W, cfg):
    r = c.out - W
    lhs = np.sum(r * r, axis=-1)
    mags = (np.sum(F_ipj ** 2, axis=-1) + np.sum(c.w.out ** 2, axis=-1)
            + np.sum(W ** 2, axis=-1))
    return (lhs < cfg.alpha2 + cfg.alpha1 * mags) & c.valid


def _w_bipath_visibility(F_ipj, F_ji, W, cfg, grad):
    F_ipj_a, W_a, c, _ = _w_bipath_parts(F_ipj, F_ji, W)
    vis = _visibility(F_ipj_a, c, W_a, cfg)
    return _w_bipath(F_ipj, F_ji, W, cfg, grad, mask=vis)


_CYCLE_ORDER = {
    # start -> the three flows composed in order
    "I": ("F_ij", "F_jip", "W"),
    "I'": ("W", "F_ij", "F_jip"),
    "J": ("F_jip", "W", "F_ij"),
}


def _cycle(start, F_ij, F_jip, W, cfg, grad):
    if start not in _CYCLE_ORDER:
        raise ValueError(f"start: expected one of {tuple(_CYCLE_ORDER)}, got {start!r}")
    F_ij, F_jip, W = _flows(("F_ij", "F_jip", "W"), (F_ij, F_jip, W))
    named = {"F_ij": F_ij, "F_jip": F_jip, "W": W}
    a, b, c = (named[k] for k in _CYCLE_ORDER[start])
    first = _Compose(a, b)
    second = _Compose(first.out, c)
    valid = first.valid & second.valid
    r = second.out
    value, g, n = _reduce(r, valid, cfg.norm)
    loss = LossValue(value, r, valid, n)
    if not grad:
        return loss, None
    gA, gc = second.backward(g, cfg.stop_gradient)
    ga, gb = first.backward(gA, cfg.stop_gradient)
    grads = {"F_ij": 0.0, "F_jip": 0.0}
    for key, gk in zip(_CYCLE_ORDER[start], (ga, gb, gc)):
        if key != "W":
            grads[key] = grads[key] + gk
    return loss, grads


# -- photometric -------------------------------------------------------------

def _box(x, window):
    return ndimage.uniform_filter(x, size=window, mode="constant") * float(window * window)


def _ssim_map(x, y, window):
    """Per-pixel SSIM of two single-channel images and the pieces for backward."""
    C1, C2 = 0.01 ** 2, 0.03 ** 2
    count = _box(np.ones_like(x), window)

    def A(z):
        return _box(z, window) / count

    mx, my = A(x), A(y)
    sxx = A(x * x) - mx * mx
    syy = A(y * y) - my * my
    sxy = A(x * y) - mx * my
    a1 = 2 * mx * my + C1
    a2 = 2 * sxy + C2
    b1 = mx * mx + my * my + C1
    b2 = sxx + syy + C2
    s = a1 * a2 / (b1 * b2)
    return s, (count, mx, my, a1, a2, b1, b2)


def _ssim_backward_y(x, y, g_s, s, cache, window):
    count, mx, my, a1, a2, b1, b2 = cache
    den = b1 * b2
    ds_dmy = (2 * mx * a2 - 2 * mx * a1) / den - s * (2 * my * b2 - 2 * my * b1) / den
    ds_dqxy = 2 * a1 / den
    ds_dqyy = -s / b2

    def At(z):
        return _box(z / count, window)

    return At(g_s * ds_dmy) + 2 * y * At(g_s * ds_dqyy) + x * At(g_s * ds_dqxy)


def _photometric(I, J, F_ij, cfg, grad):
    F_ij = as_flow(F_ij, "F_ij")
    I = np.asarray(I, dtype=np.float64)
    J = np.asarray(J, dtype=np.float64)
    if I.shape != J.shape:
        raise FieldError(f"I and J differ in shape: {I.shape} vs {J.shape}")
    check_same_grid(I, F_ij, names=("I", "F_ij"))
    Ic = I if I.ndim == 3 else I[..., None]
    w = _Warp(J, F_ij)
    Jw = w.out
    nch = Ic.shape[2]
    mask = w.valid
    n = int(mask.sum())
    if cfg.photometric == "charbonnier":
        d = Ic - Jw
        rho = np.sqrt(d * d + cfg.charbonnier_eps ** 2)
        per_pixel = rho.mean(axis=-1)
        residual = d
    else:
        maps = [_ssim_map(Ic[..., k], Jw[..., k], cfg.ssim_window) for k in range(nch)]
        per_pixel = np.mean([(1 - s) / 2 for s, _ in maps], axis=0)
        residual = per_pixel[..., None]
    value = float(per_pixel[mask].sum() / n) if n else 0.0
    loss = LossValue(value, residual, mask, n)
    if not grad:
        return loss, None
    if n == 0:
        return loss, {"F_ij": np.zeros_like(F_ij)}
    if cfg.photometric == "charbonnier":
        g_jw = np.where(mask[..., None], -d / rho, 0.0) / (nch * n)
    else:
        g_s = np.where(mask, -0.5 / (nch * n), 0.0)
        g_jw = np.stack([
            _ssim_backward_y(Ic[..., k], Jw[..., k], g_s, s, cache, cfg.ssim_window)
            for k, (s, cache) in enumerate(maps)], axis=-1)
    _, g_flow = w.backward(g_jw)
    return loss, {"F_ij": g_flow}


# --------------------------------------------------------------------------
# public API
# --------------------------------------------------------------------------

def photometric_loss(I, J, F_ij, cfg=None):
    """``rho(I, warp(J, F_ij))`` averaged over valid pixels."""
    return _photometric(I, J, F_ij, cfg or LossConfig(), False)[0]


def forward_backward_loss(F_ij, F_ji, cfg=None):
    """``|F_ij + warp(F_ji, F_ij)|``."""
    return _forward_backward(F_ij, F_ji, cfg or LossConfig(), False)[0]


def warp_supervision_loss(F_ipi, W, cfg=None):
    """``|F_ipi - W|`` over all pixels."""
    return _warp_supervision(F_ipi, W, cfg or LossConfig(), False)[0]


def ipj_bipath_residual(F_ipj, F_ij, W, cfg=None):
    """``|F_ipj - W - warp(F_ij, W)|``.

    Zero for any pair of constant-mapping predictions, whatever ``W``.
    """
    return _ipj_bipath(F_ipj, F_ij, W, cfg or LossConfig(), False)[0]


def ji_bipath_loss(F_jip, F_ji, W, cfg=None):
    """``|F_jip + warp(W, F_jip) - F_ji|``; blind to a common prediction bias."""
    return _ji_bipath(F_jip, F_ji, W, cfg or LossConfig(), False)[0]


def w_bipath_loss(F_ipj, F_ji, W, cfg=None):
    """``|F_ipj + warp(F_ji, F_ipj) - W|``; forward-backward when ``W = 0``."""
    return _w_bipath(F_ipj, F_ji, W, cfg or LossConfig(), False)[0]


def visibility_mask(F_ipj, F_ji, W, cfg=None):
    """Pixels where the composed residual is small relative to the flow magnitudes.

    True where ``|r|^2 < alpha2 + alpha1 * (|F_ipj|^2 + |warp(F_ji, F_ipj)|^2 + |W|^2)``
    (strict) and the warp sampled in bounds.
    """
    cfg = cfg or LossConfig()
    F_ipj, W, c, _ = _w_bipath_parts(F_ipj, F_ji, W)
    return _visibility(F_ipj, c, W, cfg)


def w_bipath_visibility_loss(F_ipj, F_ji, W, cfg=None):
    return _w_bipath_visibility(F_ipj, F_ji, W, cfg or LossConfig(), False)[0]


def cycle_loss(start, F_ij, F_jip, W, cfg=None):
    """Full-cycle residual starting from ``"I"``, ``"I'"`` or ``"J"``.

    Two chained warps; the valid set is the intersection over both.
    """
    return _cycle(start, F_ij, F_jip, W, cfg or LossConfig(), False)[0]


def _warpc(F_ipj, F_ji, F_ipi, W, cfg, grad):
    if cfg.visibility:
        lw, gw = _w_bipath_visibility(F_ipj, F_ji, W, cfg, grad)
    else:
        lw, gw = _w_bipath(F_ipj, F_ji, W, cfg, grad)
    ls, gs = _warp_supervision(F_ipi, W, cfg, grad)
    lam = lw.value / ls.value if ls.value > 0 else 0.0
    total = lw.value + lam * ls.value
    loss = LossValue(total, lw.residual, lw.mask, lw.count,
                     parts={"w_bipath": lw.value, "warp_supervision": ls.value, "lambda": lam})
    if not grad:
        return loss, lam, None
    # lambda is a constant weight: no gradient flows through it
    grads = {"F_ipj": gw["F_ipj"], "F_ji": gw["F_ji"], "F_ipi": lam * gs["F_ipi"]}
    return loss, lam, grads


def warpc_loss(F_ipj, F_ji, F_ipi, W, cfg=None):
    """``L_W + lambda * L_warp`` with ``lambda = L_W / L_warp`` held constant.

    Returns ``(loss, lambda)``. ``lambda`` is 0 when ``L_warp`` is 0.
    """
    loss, lam, _ = _warpc(F_ipj, F_ji, F_ipi, W, cfg or LossConfig(), False)
    return loss, lam


_LOSSES = {
    "photometric": (("I", "J", "F_ij"), _photometric),
    "forward_backward": (("F_ij", "F_ji"), _forward_backward),
    "warp_supervision": (("F_ipi", "W"), _warp_supervision),
    "ipj_bipath": (("F_ipj", "F_ij", "W"), _ipj_bipath),
    "ji_bipath": (("F_jip", "F_ji", "W"), _ji_bipath),
    "w_bipath": (("F_ipj", "F_ji", "W"), _w_bipath),
    "w_bipath_visibility": (("F_ipj", "F_ji", "W"), _w_bipath_visibility),
    "cycle_i": (("F_ij", "F_jip", "W"), lambda *a: _cycle("I", *a)),
    "cycle_ip": (("F_ij", "F_jip", "W"), lambda *a: _cycle("I'", *a)),
    "cycle_j": (("F_ij", "F_jip", "W"), lambda *a: _cycle("J", *a)),
    "warpc": (("F_ipj", "F_ji", "F_ipi", "W"), None),
}

LOSS_IDS = tuple(_LOSSES)


def loss_inputs(loss_id):
    """Names of the inputs a loss expects, in order."""
    if loss_id not in _LOSSES:
        raise KeyError(f"unknown loss id {loss_id!r}; expected one of {LOSS_IDS}")
    return _LOSSES[loss_id][0]


def evaluate(loss_id, inputs, cfg=None, grad=False):
    """Evaluate a loss by id from a dict of named inputs.

    Returns a :class:`LossValue`, or a :class:`LossGradient` when ``grad`` is set.
    """
    cfg = cfg or LossConfig()
    names = loss_inputs(loss_id)
    missing = [n for n in names if n not in inputs]
    if missing:
        raise KeyError(f"{loss_id}: missing inputs {missing}")
    args = [inputs[n] for n in names]
    if loss_id == "warpc":
        loss, _, grads = _warpc(*args, cfg, grad)
    else:
        loss, grads = _LOSSES[loss_id][1](*args, cfg, grad)
    return LossGradient(loss, grads) if grad else loss


def loss_gradient(loss_id, inputs, cfg=None):
    """Analytic gradient of a loss with respect to each predicted flow."""
    return evaluate(loss_id, inputs, cfg, grad=True)


def ji_bias_bound_check(F_jip, F_ji, W, b, cfg=None):
    """Loss increase of the JI-bipath under a common bias ``b`` and its first-order bound.

    Both predictions are shifted by ``b``. The change is measured on pixels
    valid with and without the bias; the bound is the mean norm of
    ``warp(DW b, F_jip)`` on the same pixels, with ``DW`` from central
    differences (one-sided at the borders).

    Returns ``(measured, bound)``.
    """
    cfg = cfg or LossConfig()
    F_jip, F_ji, W = _flows(("F_jip", "F_ji", "W"), (F_jip, F_ji, W))
    b = np.asarray(b, dtype=np.float64).reshape(2)
    base = _ji_bipath(F_jip, F_ji, W, cfg, False)[0]
    biased = _ji_bipath(F_jip + b, F_ji + b, W, cfg, False)[0]
    shared = base.mask & biased.mask
    n = int(shared.sum())
    if n == 0:
        return 0.0, 0.0

    def mean_norm(r):
        if cfg.norm == "l2":
            mag = np.sqrt(np.sum(r * r, axis=-1))
        else:
            mag = np.sum(np.abs(r), axis=-1)
        return float(mag[shared].sum() / n)

    measured = mean_norm(biased.residual) - mean_norm(base.residual)
    dW_dy, dW_dx = np.gradient(W, axis=(0, 1))
    DWb = dW_dx * b[0] + dW_dy * b[1]
    warped = _Warp(DWb, F_jip).out
    return measured, mean_norm(warped)
