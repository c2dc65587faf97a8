import json

import numpy as np
import pytest

from warpc import flowcore as fc
from warpc import losses, metrics
from warpc import toytrain as tt


@pytest.fixture(scope="module")
def scene():
    return tt.make_scene(0)


# -- scenes ---------------------------------------------------------------------

def test_zero_strength_scene_is_identity():
    s = tt.make_scene(3, strength=0.0)
    assert np.array_equal(s.I, s.J)
    assert not s.F_ji.any() and not s.F_ij.any()


def test_scene_is_deterministic():
    a, b = tt.make_scene(5), tt.make_scene(5)
    for name in ("I", "J", "G", "F_ji", "F_ij"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_scene_construction_consistency(scene):
    Jw, valid = fc.warp(scene.I, scene.F_ji)
    assert np.abs(Jw - scene.J).max() < 1e-5
    assert metrics.aepe(scene.F_ji, scene.F_ji, scene.valid_ji) == 0.0


def test_scene_inverse_flows_consistent(scene):
    comp, valid = fc.compose_flows(scene.F_ij, scene.F_ji)
    assert np.linalg.norm(comp, axis=-1)[valid].mean() < 0.05


def test_scene_arrays_read_only(scene):
    with pytest.raises(ValueError):
        scene.I[0, 0] = 1.0


def test_excessive_strength_rejected():
    with pytest.raises(ValueError, match="strength"):
        tt.make_scene(0, strength=0.9)


# -- predictor ---------------------------------------------------------------------

def test_upsampling_adjoint(rng):
    p = tt.ControlGridPredictor(40, 56, 8, roles=("ij",))
    g = rng.normal(size=(8, 8, 2))
    G = rng.normal(size=(40, 56, 2))
    assert np.sum(p.upsample(g) * G) == pytest.approx(np.sum(g * p.grid_gradient(G)), rel=1e-12)


def test_upsampling_hits_corners_and_is_linear(rng):
    p = tt.ControlGridPredictor(33, 33, 5)
    g = rng.normal(size=(5, 5, 2))
    up = p.upsample(g)
    assert np.allclose(up[0, 0], g[0, 0]) and np.allclose(up[-1, -1], g[-1, -1])
    assert np.allclose(up[16, 16], g[2, 2])
    assert np.allclose(p.upsample(2 * g + 1), 2 * up + 1)


def test_parameter_gradient_matches_finite_differences(rng, scene):
    p = tt.ControlGridPredictor(64, 64, 8, roles=("ipi",), alpha=0.3)
    p.grids["ipi"] = rng.normal(size=(8, 8, 2))
    cue = rng.normal(size=(64, 64, 2))
    W = rng.normal(size=(64, 64, 2))

    def value(params):
        q = tt.ControlGridPredictor(64, 64, 8, roles=("ipi",))
        q.set_parameters(params)
        return losses.warp_supervision_loss(q.flow("ipi", cue), W).value

    g_flow = losses.loss_gradient("warp_supervision",
                                  {"F_ipi": p.flow("ipi", cue), "W": W}).grads["F_ipi"]
    an_grid = p.grid_gradient(g_flow)
    an_alpha = p.alpha_gradient(g_flow, cue)
    base = p.parameters()
    h = 1e-5
    for idx in [(0, 0, 0), (3, 4, 1), (7, 7, 0)]:
        plus = {k: v.copy() for k, v in base.items()}
        minus = {k: v.copy() for k, v in base.items()}
        plus["ipi"][idx] += h
        minus["ipi"][idx] -= h
        fd = (value(plus) - value(minus)) / (2 * h)
        assert fd == pytest.approx(an_grid[idx], rel=1e-5, abs=1e-9)
    plus = {k: v.copy() for k, v in base.items()}
    minus = {k: v.copy() for k, v in base.items()}
    plus["alpha"][0] += h
    minus["alpha"][0] -= h
    assert (value(plus) - value(minus)) / (2 * h) == pytest.approx(an_alpha, rel=1e-5)


def test_dense_cue_recovers_scene_flow(scene):
    cue = tt.dense_cue(scene.J, scene.I)
    assert metrics.aepe(cue, scene.F_ji, scene.valid_ji) < 1.0


# -- cue bank ---------------------------------------------------------------------

def test_cue_bank_is_deterministic_and_read_only(scene):
    a = tt.CueBank(scene, tt.toy_warp_config(), [1, 0])
    b = tt.CueBank(scene, tt.toy_warp_config(), [1, 0])
    Wa, Ia, ca = a.step(3)
    Wb, Ib, cb = b.step(3)
    assert Wa.tobytes() == Wb.tobytes() and Ia.tobytes() == Ib.tobytes()
    assert all(ca[k].tobytes() == cb[k].tobytes() for k in ca)
    assert not Wa.flags.writeable
    assert a.step(3)[0] is Wa
    assert not np.array_equal(a.step(4)[0], Wa)


def test_fixed_w_bank_repeats(scene):
    bank = tt.CueBank(scene, tt.toy_warp_config(), [0, 0], fixed_w=True)
    assert bank.step(0)[0] is bank.step(9)[0]


# -- training ------------------------------------------------------------------------

def test_warp_supervision_converges_to_fixed_w(scene):
    bank = tt.CueBank(scene, tt.toy_warp_config(), [0, 0], fixed_w=True, jitter=False)
    _, pred = tt.train_scene("warp_supervision", scene, bank, steps=400, lr=0.05,
                             return_predictor=True)
    W, _, cues = bank.step(0)
    assert metrics.aepe(pred.flow("ipi", cues["ipi"]), W) < 0.5


def test_training_does_not_mutate_scene(scene):
    before = scene.I.tobytes(), scene.F_ji.tobytes()
    bank = tt.CueBank(scene, tt.toy_warp_config(), [0, 0])
    tt.train_scene("w_bipath", scene, bank, steps=5)
    assert (scene.I.tobytes(), scene.F_ji.tobytes()) == before


def test_train_scene_is_reproducible(scene):
    bank = tt.CueBank(scene, tt.toy_warp_config(), [2, 0])
    a = tt.train_scene("warpc", scene, bank, steps=15, lr=0.03)
    b = tt.train_scene("warpc", scene, bank, steps=15, lr=0.03)
    assert a.to_dict() == b.to_dict()
    assert np.array_equal(a.flow, b.flow)


def test_divergence_is_reported(scene, monkeypatch):
    real = losses.loss_gradient

    def poisoned(loss_id, inputs, cfg=None):
        out = real(loss_id, inputs, cfg)
        out.loss.value = float("nan")
        return out

    monkeypatch.setattr(tt.losses, "loss_gradient", poisoned)
    bank = tt.CueBank(scene, tt.toy_warp_config(), [0, 0])
    run = tt.train_scene("w_bipath", scene, bank, steps=10)
    assert run.diverged and len(run.curve) == 1 and np.isnan(run.curve[0])


def test_unknown_objective(scene):
    bank = tt.CueBank(scene, tt.toy_warp_config(), [0, 0])
    with pytest.raises(ValueError, match="objective"):
        tt.train_scene("census", scene, bank)


def test_collapse_detector():
    run = tt.RunResult("x", 0, 0.1, aepe=2.0, mapping_variance=1.0, init_mapping_variance=100.0,
                       mean_bias=[0, 0], magnitude_ratio=1.0, alpha=0.0, curve=[])
    assert run.collapsed
    run.mapping_variance = 50.0
    assert not run.collapsed
    run.aepe = 11.0
    assert run.collapsed


def test_evaluation_directions():
    assert tt.evaluation_direction("w_bipath") == "ji"
    assert tt.evaluation_direction("ipj_bipath") == "ij"
    assert set(tt.OBJECTIVES) == set(tt._OBJECTIVE_SPEC)


# -- comparison ------------------------------------------------------------------------

SMALL = dict(seed=1, scene_seeds=[0, 1], objectives=["w_bipath", "warpc", "ji_bipath"],
             steps=20, lr_grid=[0.03, 0.1])


def test_compare_is_deterministic_across_threads(monkeypatch):
    monkeypatch.setenv("WARPC_THREADS", "1")
    a = tt.compare_objectives(SMALL)
    monkeypatch.setenv("WARPC_THREADS", "3")
    b = tt.compare_objectives(dict(SMALL))
    assert a.to_json() == b.to_json()
    assert list(a.reports) == SMALL["objectives"]
    assert "warpc_beats_w_bipath_on_4_of_5" in a.checks
    text = a.to_text()
    assert "w_bipath" in text and ("PASS" in text or "FAIL" in text)


def test_report_json_is_finite():
    table = tt.compare_objectives(dict(SMALL, objectives=["forward_backward"], steps=5,
                                       lr_grid=[0.1]))
    data = json.loads(table.to_json())
    rep = data["reports"]["forward_backward"]
    assert rep["aepe"] >= 0 and np.isfinite(rep["aepe"])
    assert {"objective", "lr", "aepe", "mean_bias", "bias_norm", "runs"} <= set(rep)


@pytest.mark.parametrize("bad, field", [
    ({}, "seed"),
    ({"seed": 0, "objectives": ["nope"]}, "objectives"),
    ({"seed": 0, "steps": 0}, "steps"),
    ({"seed": 0, "lr_grid": []}, "lr_grid"),
    ({"seed": 0, "colour": 1}, "colour"),
])
def test_experiment_config_errors(bad, field):
    with pytest.raises(ValueError, match=field):
        tt.ExperimentConfig.from_dict(bad)


def test_experiment_config_round_trip(tmp_path):
    cfg = tt.ExperimentConfig(seed=4, steps=10)
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert tt.ExperimentConfig.from_json(tmp_path / "c.json") == cfg
