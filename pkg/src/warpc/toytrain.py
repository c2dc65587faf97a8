"""Desk-scale experiments comparing the consistency objectives.

Each scene is a textured image ``I`` and a mild homography ``G`` with
``J = warp(I, flow(G))``, so ground-truth flows are known exactly in both
directions. A predictor produces one flow per directed image pair::

    F_role = alpha * cue(A, B) + upsample(grid_role)

``cue`` is a classical dense optical flow (OpenCV DIS) between the two
images, ``alpha`` is a learned scalar shared by every role, and each role
owns a ``g x g`` grid of control vectors bilinearly upsampled to the image
size. All grids start at the same random bias, which lets the experiments
expose which objectives can remove a bias shared by both directions.
Gradients are exact: loss gradients come from :mod:`warpc.losses` and pass
through the linear predictor by its adjoint.
"""

import dataclasses
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import losses, metrics, warpgen
from .flowcore import FieldError, pixel_grid, warp

OBJECTIVES = (
    "warp_supervision", "ipj_bipath", "ji_bipath", "w_bipath", "cycle_i", "cycle_ip",
    "cycle_j", "warpc", "forward_backward", "photometric",
)

# objective -> (loss id, roles it trains, role evaluated against ground truth)
_OBJECTIVE_SPEC = {
    "warp_supervision": ("warp_supervision", ("ipi",), "ipi"),
    "ipj_bipath": ("ipj_bipath", ("ipj", "ij"), "ij"),
    "ji_bipath": ("ji_bipath", ("jip", "ji"), "ji"),
    "w_bipath": ("w_bipath", ("ipj", "ji"), "ji"),
    "cycle_i": ("cycle_i", ("ij", "jip"), "ij"),
    "cycle_ip": ("cycle_ip", ("ij", "jip"), "ij"),
    "cycle_j": ("cycle_j", ("ij", "jip"), "ij"),
    "warpc": ("warpc", ("ipj", "ji", "ipi"), "ji"),
    "forward_backward": ("forward_backward", ("ij", "ji"), "ji"),
    "photometric": ("photometric", ("ij",), "ij"),
}

# role -> (source image, target image) of the cue
_ROLE_IMAGES = {
    "ipj": ("Ip", "J"), "ji": ("J", "I"), "ij": ("I", "J"),
    "jip": ("J", "Ip"), "ipi": ("Ip", "I"),
}
_ROLE_INPUT = {"ipj": "F_ipj", "ji": "F_ji", "ij": "F_ij", "jip": "F_jip", "ipi": "F_ipi"}

# direction of each role's ground truth on the real pair
_ROLE_TRUTH = {"ji": "ji", "ipi": "ji", "ij": "ij", "ipj": "ij", "jip": "ji"}

MAX_INVALID_FRACTION = 0.3


def toy_warp_config(**overrides):
    """Mild synthetic warps suited to 64 x 64 scenes."""
    params = dict(sigma_h=0.1, tau=0.1, t=0.1, alpha=0.1, sigma_tps=0.05)
    params.update(overrides)
    return warpgen.WarpDistributionConfig(**params)


# --------------------------------------------------------------------------
# scenes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticScene:
    I: np.ndarray
    J: np.ndarray
    G: np.ndarray  # 3x3 homography in normalised coordinates, J-location -> I-location
    F_ji: np.ndarray
    F_ij: np.ndarray
    valid_ji: np.ndarray
    valid_ij: np.ndarray
    seed: int


def _texture(rng, h, w, sigma=2.0):
    n = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma, mode="wrap")
    return (n - n.min()) / (n.max() - n.min())


def make_scene(seed, h=64, w=64, strength=0.1):
    """Textured image pair related by a random homography.

    ``strength`` is the corner jitter range in normalised units. The scene is
    a pure function of ``seed``.
    """
    if strength < 0:
        raise ValueError("strength: must be >= 0")
    rng = np.random.default_rng(seed)
    I = _texture(rng, h, w)
    corners = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
    if strength == 0:
        G = np.eye(3)
    else:
        G = warpgen.homography_from_points(
            corners, corners + rng.uniform(-strength, strength, corners.shape))
    F_ji = warpgen.rasterize(warpgen.HomographyParams(G), h, w)
    F_ij = warpgen.rasterize(warpgen.HomographyParams(np.linalg.inv(G)), h, w)
    J, valid_ji = warp(I, F_ji)
    _, valid_ij = warp(I, F_ij)
    for name, v in (("valid_ji", valid_ji), ("valid_ij", valid_ij)):
        if 1.0 - v.mean() > MAX_INVALID_FRACTION:
            raise ValueError(
                f"strength: {strength} leaves {100 * (1 - v.mean()):.0f}% of pixels invalid "
                f"({name}); at most {100 * MAX_INVALID_FRACTION:.0f}% allowed")
    for arr in (I, J, G, F_ji, F_ij, valid_ji, valid_ij):
        arr.setflags(write=False)
    return SyntheticScene(I, J, G, F_ji, F_ij, valid_ji, valid_ij, int(seed))


# --------------------------------------------------------------------------
# predictor
# --------------------------------------------------------------------------

def _interp_matrix(n, g):
    """``(n, g)`` linear interpolation weights from ``g`` nodes spanning ``[0, n-1]``."""
    R = np.zeros((n, g))
    if g == 1:
        R[:, 0] = 1.0
        return R
    pos = np.arange(n) * (g - 1) / max(n - 1, 1)
    i0 = np.minimum(np.floor(pos).astype(int), g - 2)
    f = pos - i0
    R[np.arange(n), i0] = 1.0 - f
    R[np.arange(n), i0 + 1] = f
    return R


class ControlGridPredictor:
    """Per-role control grids plus a shared cue weight ``alpha``.

    ``upsample`` is linear in the grid, and :meth:`grid_gradient` is its
    exact adjoint.
    """

    def __init__(self, h, w, g=8, roles=(), init_bias=(0.0, 0.0), alpha=0.0):
        self.h, self.w, self.g = h, w, g
        self.Ry = _interp_matrix(h, g)
        self.Rx = _interp_matrix(w, g)
        b = np.asarray(init_bias, dtype=np.float64).reshape(2)
        self.grids = {r: np.broadcast_to(b, (g, g, 2)).copy() for r in roles}
        self.alpha = float(alpha)

    def upsample(self, grid):
        return np.stack([self.Ry @ grid[..., c] @ self.Rx.T for c in range(2)], axis=-1)

    def grid_gradient(self, g_flow):
        return np.stack([self.Ry.T @ g_flow[..., c] @ self.Rx for c in range(2)], axis=-1)

    def flow(self, role, cue):
        return self.alpha * cue + self.upsample(self.grids[role])

    def alpha_gradient(self, g_flow, cue):
        return float(np.sum(g_flow * cue))

    def parameters(self):
        return {"alpha": np.array([self.alpha]), **self.grids}

    def set_parameters(self, params):
        self.alpha = float(params["alpha"][0])
        for r in self.grids:
            self.grids[r] = params[r]


class _Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        self.t += 1
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            mh = m / (1 - self.b1 ** self.t)
            vh = v / (1 - self.b2 ** self.t)
            out[k] = p - self.lr * mh / (np.sqrt(vh) + self.eps)
        return out


# --------------------------------------------------------------------------
# cues
# --------------------------------------------------------------------------

def _u8(img):
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def dense_cue(A, B):
    """Classical optical flow ``A -> B`` (``A(x) ~ B(x + F(x))``) from OpenCV DIS."""
    import cv2

    dis = cv2.DISOpticalFlow_create(cv2.DISOPTICAL_FLOW_PRESET_MEDIUM)
    dis.setFinestScale(0)
    dis.setGradientDescentIterations(25)
    dis.setPatchSize(8)
    dis.setPatchStride(4)
    dis.setVariationalRefinementIterations(5)
    return dis.calc(_u8(A), _u8(B), None).astype(np.float64)


class CueBank:
    """Per-step synthetic warps and cues for one scene, shared across runs.

    Step ``t`` always yields the same ``W`` and cues, so every objective and
    learning rate sees identical training data.
    """

    def __init__(self, scene, warp_cfg, seed, fixed_w=False, jitter=True):
        self.scene = scene
        self.jitter = jitter
        self.cfg = warp_cfg
        self.seed = [int(v) for v in np.atleast_1d(seed)]
        self.fixed_w = fixed_w
        self._steps = {}
        self.real = {"ij": dense_cue(scene.I, scene.J), "ji": dense_cue(scene.J, scene.I)}
        for arr in self.real.values():
            arr.setflags(write=False)

    def step(self, t):
        key = 0 if self.fixed_w else t
        if key not in self._steps:
            h, w = self.scene.I.shape
            rng = np.random.default_rng([*self.seed, key])
            W = warpgen.sample_warp(self.cfg, h, w, rng)
            Ip, _ = warp(self.scene.I, W)
            if self.jitter:
                Ip = warpgen.appearance_jitter(Ip, rng)
            imgs = {"I": self.scene.I, "J": self.scene.J, "Ip": Ip}
            cues = dict(self.real)
            for role in ("ipj", "jip", "ipi"):
                a, b = _ROLE_IMAGES[role]
                cues[role] = dense_cue(imgs[a], imgs[b])
            for arr in (W, Ip, *cues.values()):
                arr.setflags(write=False)
            self._steps[key] = (W, Ip, cues)
        return self._steps[key]


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class RunResult:
    """Outcome of training one objective on one scene."""

    objective: str
    seed: int
    lr: float
    aepe: float
    mapping_variance: float
    init_mapping_variance: float
    mean_bias: list
    magnitude_ratio: float
    alpha: float
    curve: list
    diverged: bool = False
    flow: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def collapsed(self):
        return collapse_detected(self)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "flow"}
        d["collapsed"] = self.collapsed
        return d


@dataclass
class ExperimentReport:
    objective: str
    lr: float
    runs: list = field(default_factory=list)

    @property
    def aepe(self):
        return float(np.mean([r.aepe for r in self.runs]))

    @property
    def mean_bias(self):
        return np.mean([r.mean_bias for r in self.runs], axis=0)

    @property
    def bias_norm(self):
        """Mean over runs of the length of each run's mean bias vector."""
        return float(np.mean([np.linalg.norm(r.mean_bias) for r in self.runs]))

    def to_dict(self):
        return {"objective": self.objective, "lr": self.lr, "aepe": self.aepe,
                "mean_bias": [float(v) for v in self.mean_bias], "bias_norm": self.bias_norm,
                "runs": [r.to_dict() for r in self.runs]}


def collapse_detected(run, variance_ratio=0.05, aepe_floor=10.0):
    """Constant-mapping collapse: mapping variance below 5% of its initial value, or AEPE above 10 px."""
    return (run.mapping_variance < variance_ratio * run.init_mapping_variance
            or run.aepe > aepe_floor)


def _mapping_variance(F, valid):
    X, Y = pixel_grid(*F.shape[:2])
    mx = (X + F[..., 0])[valid]
    my = (Y + F[..., 1])[valid]
    return float(np.var(mx) + np.var(my))


def _evaluate(pred, scene, bank, role):
    truth = _ROLE_TRUTH[role]
    gt = scene.F_ji if truth == "ji" else scene.F_ij
    valid = scene.valid_ji if truth == "ji" else scene.valid_ij
    F = pred.flow(role, bank.real[truth])
    gt_mag = float(np.mean(np.hypot(gt[..., 0], gt[..., 1])[valid]))
    mag = float(np.mean(np.hypot(F[..., 0], F[..., 1])[valid]))
    return {
        "flow": F,
        "aepe": metrics.aepe(F, gt, valid),
        "mapping_variance": _mapping_variance(F, valid),
        "mean_bias": [float(v) for v in metrics.mean_bias(F, gt, valid)],
        "magnitude_ratio": mag / gt_mag if gt_mag > 0 else float("inf"),
    }


def evaluation_direction(objective):
    """``"ji"`` or ``"ij"``: which real-pair flow an objective is scored on."""
    return _ROLE_TRUTH[_OBJECTIVE_SPEC[objective][2]]


def _bias_vector(seed, magnitude):
    angle = np.random.default_rng([int(seed), 977]).uniform(0, 2 * np.pi)
    return magnitude * np.array([np.cos(angle), np.sin(angle)])


def train_scene(objective, scene, bank, steps=400, lr=0.05, seed=0, grid=8,
                bias=3.0, loss_cfg=None, return_predictor=False):
    """Train one predictor on one scene; returns a :class:`RunResult`.

    With ``return_predictor`` the trained :class:`ControlGridPredictor` is
    returned as well.
    """
    if objective not in _OBJECTIVE_SPEC:
        raise ValueError(f"objective: unknown {objective!r}; expected one of {OBJECTIVES}")
    loss_id, roles, eval_role = _OBJECTIVE_SPEC[objective]
    cfg = loss_cfg or losses.LossConfig()
    h, w = scene.I.shape
    pred = ControlGridPredictor(h, w, grid, roles, init_bias=_bias_vector(seed, bias))
    init = _evaluate(pred, scene, bank, eval_role)
    opt = _Adam(lr)
    curve = []
    diverged = False
    for t in range(steps):
        W, Ip, cues = bank.step(t)
        flows = {r: pred.flow(r, cues[r]) for r in roles}
        inputs = {_ROLE_INPUT[r]: flows[r] for r in roles}
        inputs.update({"W": W, "I": scene.I, "J": scene.J})
        res = losses.loss_gradient(loss_id, inputs, cfg)
        value = res.loss.value
        if not np.isfinite(value):
            diverged = True
            curve.append(float(value))
            break
        curve.append(float(value))
        grads = {"alpha": np.zeros(1)}
        for r in roles:
            g = res.grads.get(_ROLE_INPUT[r])
            if g is None or np.isscalar(g):
                g = np.zeros((h, w, 2))
            grads[r] = pred.grid_gradient(g)
            grads["alpha"] += pred.alpha_gradient(g, cues[r])
        pred.set_parameters(opt.step(pred.parameters(), grads))
    final = _evaluate(pred, scene, bank, eval_role)
    result = RunResult(objective, int(scene.seed), float(lr), final["aepe"],
                       final["mapping_variance"], init["mapping_variance"], final["mean_bias"],
                       final["magnitude_ratio"], pred.alpha, curve, diverged, final["flow"])
    return (result, pred) if return_predictor else result


def _final_loss(run, window=20):
    tail = run.curve[-window:]
    if run.diverged or not tail:
        return float("inf")
    return float(np.mean(tail))


def train(objective, scenes, warp_cfg=None, steps=400, lr=(0.01, 0.03, 0.1), seed=0,
          grid=8, bias=3.0, fixed_w=False, loss_cfg=None, banks=None):
    """Train ``objective`` on every scene; ``lr`` may be a value or a grid to search.

    With a grid, the learning rate with the lowest mean final training loss
    is kept. Returns an :class:`ExperimentReport`.
    """
    warp_cfg = warp_cfg or toy_warp_config()
    if banks is None:
        banks = [CueBank(s, warp_cfg, [seed, s.seed], fixed_w) for s in scenes]
    lrs = [lr] if np.isscalar(lr) else list(lr)
    best = None
    for rate in lrs:
        runs = [train_scene(objective, s, b, steps, rate, seed=s.seed, grid=grid,
                            bias=bias, loss_cfg=loss_cfg)
                for s, b in zip(scenes, banks)]
        score = np.mean([_final_loss(r) for r in runs])
        if best is None or score < best[0]:
            best = (score, rate, runs)
    return ExperimentReport(objective, float(best[1]), best[2])


# --------------------------------------------------------------------------
# comparison
# --------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    seed: int
    scene_seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    objectives: list = field(default_factory=lambda: list(OBJECTIVES))
    steps: int = 400
    lr_grid: list = field(default_factory=lambda: [0.01, 0.03, 0.1])
    height: int = 64
    width: int = 64
    grid: int = 8
    strength: float = 0.1
    bias: float = 3.0
    fixed_w: bool = False
    warp: dict = field(default_factory=lambda: toy_warp_config().to_dict())
    loss: dict = field(default_factory=lambda: losses.LossConfig(visibility=False).to_dict())

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("seed: required")
        unknown = [o for o in self.objectives if o not in OBJECTIVES]
        if unknown:
            raise ValueError(f"objectives: unknown objective {unknown[0]!r}")
        if self.steps < 1:
            raise ValueError("steps: must be >= 1")
        if not self.lr_grid or any(v <= 0 for v in self.lr_grid):
            raise ValueError("lr_grid: must be a non-empty list of positive rates")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"{unknown[0]}: unknown field")
        if "seed" not in data:
            raise ValueError("seed: required")
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class ComparisonTable:
    config: ExperimentConfig
    reports: dict
    checks: dict

    def to_dict(self):
        return {"config": self.config.to_dict(),
                "reports": {k: r.to_dict() for k, r in self.reports.items()},
                "checks": self.checks}

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def ranked(self):
        return sorted(self.reports.values(), key=lambda r: r.aepe)

    def to_text(self):
        lines = [f"{'objective':<18}{'lr':>7}{'AEPE':>9}{'|bias|':>9}{'mag':>7}  collapsed",
                 "-" * 60]
        for r in self.ranked():
            bias = r.bias_norm
            mag = np.mean([x.magnitude_ratio for x in r.runs])
            coll = sum(x.collapsed for x in r.runs)
            lines.append(f"{r.objective:<18}{r.lr:>7.3g}{r.aepe:>9.3f}{bias:>9.3f}"
                         f"{mag:>7.2f}  {coll}/{len(r.runs)}")
        lines.append("")
        for name, ok in self.checks.items():
            lines.append(f"{'PASS' if ok else 'FAIL'}  {name}")
        return "\n".join(lines)


def _group_mean(reports, names):
    vals = [reports[n].aepe for n in names if n in reports]
    return float(np.mean(vals)) if vals else None


def failure_signatures(reports):
    """Qualitative checks on a set of reports; missing objectives are skipped."""
    checks = {}
    r = reports
    if "warpc" in r and "w_bipath" in r:
        checks["warpc_and_w_bipath_below_1px"] = bool(r["warpc"].aepe < 1.0
                                                       and r["w_bipath"].aepe < 1.0)
        wins = sum(a.aepe <= b.aepe for a, b in zip(r["warpc"].runs, r["w_bipath"].runs))
        checks["warpc_beats_w_bipath_on_4_of_5"] = bool(wins >= min(4, len(r["warpc"].runs)))
    if "ipj_bipath" in r:
        checks["ipj_bipath_collapses"] = bool(all(x.collapsed for x in r["ipj_bipath"].runs))
    if "ji_bipath" in r and "w_bipath" in r:
        checks["ji_bias_above_1px_w_bias_below_0.3px"] = bool(
            r["ji_bipath"].bias_norm > 1.0 and r["w_bipath"].bias_norm < 0.3)
    if "forward_backward" in r:
        checks["forward_backward_shrinks_to_zero"] = bool(
            np.mean([x.magnitude_ratio for x in r["forward_backward"].runs]) < 0.1)
    top = _group_mean(r, ("warpc", "w_bipath"))
    mid = _group_mean(r, ("cycle_ip",))
    low = [r[n].aepe for n in ("ji_bipath", "ipj_bipath", "cycle_i") if n in r]
    if top is not None and mid is not None and low:
        checks["ordering_w_then_cycle_ip_then_rest"] = bool(
            max(r[n].aepe for n in ("warpc", "w_bipath") if n in r) < mid < min(low))
    return checks


def _threads():
    try:
        return max(1, int(os.environ.get("WARPC_THREADS", "1")))
    except ValueError:
        return 1


def compare_objectives(config):
    """Train every configured objective on shared scenes and warps.

    Results are merged by objective name, so the table does not depend on
    the number of worker threads.
    """
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    warp_cfg = warpgen.WarpDistributionConfig.from_dict(config.warp)
    loss_cfg = losses.LossConfig.from_dict(config.loss)
    scenes = [make_scene(s, config.height, config.width, config.strength)
              for s in config.scene_seeds]
    banks = [CueBank(s, warp_cfg, [config.seed, s.seed], config.fixed_w) for s in scenes]
    # fill the banks up front so worker threads only read them
    for b in banks:
        for t in range(1 if config.fixed_w else config.steps):
            b.step(t)

    def run(obj):
        return obj, train(obj, scenes, warp_cfg, config.steps, config.lr_grid,
                          config.seed, config.grid, config.bias, config.fixed_w,
                          loss_cfg, banks)

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = dict(pool.map(run, config.objectives))
    reports = {o: results[o] for o in config.objectives}
    return ComparisonTable(config, reports, failure_signatures(reports))
