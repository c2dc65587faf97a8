"""Flow and correspondence metrics: AEPE, PCK and mean bias."""

import json
from dataclasses import dataclass, field

import numpy as np

from .flowcore import FieldError, as_flow, check_same_grid, sample_at


class EmptyInputError(ValueError):
    """No valid pixels or correspondences to evaluate."""


@dataclass
class MetricReport:
    aepe: float
    pck: dict = field(default_factory=dict)
    count: int = 0

    def to_dict(self):
        return {"aepe": float(self.aepe),
                "pck": {str(k): float(v) for k, v in self.pck.items()},
                "count": int(self.count)}

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _prepare(F_hat, F_gt, valid):
    a = as_flow(F_hat, "F_hat")
    b = as_flow(F_gt, "F_gt")
    check_same_grid(a, b, names=("F_hat", "F_gt"))
    if valid is None:
        m = np.ones(a.shape[:2], dtype=bool)
    else:
        m = np.asarray(valid, dtype=bool)
        if m.shape != a.shape[:2]:
            raise FieldError(f"valid mask shape {m.shape} does not match grid {a.shape[:2]}")
    if not m.any():
        raise EmptyInputError("no valid pixels to evaluate")
    return a, b, m


def aepe(F_hat, F_gt, valid=None):
    """Mean end-point error over valid pixels."""
    a, b, m = _prepare(F_hat, F_gt, valid)
    d = a[m] - b[m]
    return float(np.mean(np.sqrt(np.sum(d * d, axis=-1))))


def flow_report(F_hat, F_gt, valid=None, thresholds=(1, 3, 5)):
    """AEPE plus per-pixel PCK of a dense flow against ground truth."""
    a, b, m = _prepare(F_hat, F_gt, valid)
    d = a[m] - b[m]
    errors = np.sqrt(np.sum(d * d, axis=-1))
    return MetricReport(aepe=float(errors.mean()), pck=_pck_counts(errors, thresholds),
                        count=int(errors.size))


def mean_bias(F_hat, F_gt, valid=None):
    """Mean of ``F_hat - F_gt`` over valid pixels, as a length-2 array ``(u, v)``."""
    a, b, m = _prepare(F_hat, F_gt, valid)
    return np.mean(a[m] - b[m], axis=0)


def normalized_thresholds(alphas, h, w):
    """Pixel thresholds ``alpha * max(h, w)`` for normalized PCK."""
    return [float(a) * max(h, w) for a in alphas]


def _pck_counts(errors, thresholds):
    n = errors.size
    return {t: 100.0 * np.count_nonzero(errors <= t) / n for t in thresholds}


def pck(predicted, target, thresholds=(1, 3, 5)):
    """PCK for a list of predicted vs ground-truth correspondences.

    ``predicted`` and ``target`` are ``(n, 2)`` arrays of pixel positions.
    A correspondence counts as correct when its error is ``<= T``.
    """
    p = np.asarray(predicted, dtype=np.float64).reshape(-1, 2)
    t = np.asarray(target, dtype=np.float64).reshape(-1, 2)
    if p.shape != t.shape:
        raise FieldError(f"predicted {p.shape} and target {t.shape} differ")
    if p.shape[0] == 0:
        raise EmptyInputError("pck needs at least one correspondence")
    errors = np.sqrt(np.sum((p - t) ** 2, axis=1))
    return MetricReport(aepe=float(errors.mean()), pck=_pck_counts(errors, thresholds),
                        count=int(errors.size))


def pck_dense(F_hat, source, target, thresholds=(1, 3, 5)):
    """PCK of a dense flow at keypoints.

    The flow is bilinearly sampled at each ``source`` keypoint and the
    displaced point is compared against ``target``. Keypoints outside the
    grid are rejected.
    """
    flow = as_flow(F_hat, "F_hat")
    src = np.asarray(source, dtype=np.float64).reshape(-1, 2)
    if src.shape[0] == 0:
        raise EmptyInputError("pck needs at least one correspondence")
    vec, valid = sample_at(flow, src[:, 0][None, :], src[:, 1][None, :])
    if not valid.all():
        bad = int(np.argmin(valid[0]))
        raise FieldError(f"keypoint {bad} at {tuple(src[bad])} lies outside the flow grid")
    return pck(src + vec[0], target, thresholds)
