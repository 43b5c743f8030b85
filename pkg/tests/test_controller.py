import math

import numpy as np
import pytest

from gradcheck import check, kink_margin
import pvn.controller as controller_mod
from pvn.config import load_profile
from pvn.controller import (
    ControlOutput,
    Stage2Model,
    act,
    act_forward,
    clamp_action,
    crop_matrix,
    egocentric_crop,
    init_act,
    resample_matrix,
    splat_matrix,
    stop_decision,
)
from pvn.mapper import MapFrame
from pvn.simworld import Action, Pose
from pvn.tensorcore import DimensionError, Params, Tape, Tensor, leaky_relu, tsum

K = 12
FRAME = MapFrame(25.0, 25.0, 0.0, 32)


def _pose_at(frame, mx, my, heading):
    """World pose whose map coordinates are (mx, my)."""
    x, y = frame.map_to_world([(mx, my)])[0]
    return Pose(float(x), float(y), frame.heading + heading)


def _crop(d2, pose, frame=FRAME, k=K):
    return egocentric_crop(d2, pose, frame, k).reshape(2, k, k)


# -- crop geometry -----------------------------------------------------------------


def test_origin_crop_is_center_submap():
    rng = np.random.default_rng(0)
    d = rng.random((2, 32, 32))
    c = _crop(d, Pose(25.0, 25.0, 0.0))
    assert np.allclose(c, d[:, 10:22, 10:22], atol=1e-6)


def test_corner_out_of_bounds_is_exactly_zero():
    d = np.ones((2, 32, 32))
    c = _crop(d, _pose_at(FRAME, 0.0, 0.0, 0.0))
    # agent at map corner (0, 0) facing +x: crop rows/cols below center lie off the map
    assert np.all(c[:, :, :6] == 0) and np.all(c[:, :6, :] == 0)
    assert np.all(c[:, 6:, 6:] > 0.99)
    assert np.all(c >= 0)


def _centroid(img):
    k = img.shape[0]
    ii = np.arange(k) + 0.5
    m = img.sum()
    return (img.sum(axis=0) @ ii) / m, (img.sum(axis=1) @ ii) / m


@pytest.mark.parametrize("heading", [0.0, math.pi / 2, math.pi, -math.pi / 2, 0.7])
def test_impulse_three_cells_ahead_stays_ahead(heading):
    d = np.zeros((2, 32, 32))
    ax, ay = 15.5, 15.5
    sx, sy = ax + 3 * math.cos(heading), ay + 3 * math.sin(heading)
    pose = _pose_at(FRAME, ax, ay, heading)
    # spike splatted onto the map at the exact point
    spike = (splat_matrix([(sx, sy)], 32) @ np.ones(1)).reshape(32, 32)
    d[0] = spike
    c = _crop(d, pose)[0]
    cx, cy = _centroid(c)
    assert abs(cx - (K / 2 + 3)) < 1e-6 and abs(cy - K / 2) < 1e-6
    assert abs(c.sum() - 1) < 0.05


def test_impulse_mass_conserved_inside_crop():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(500):
        theta = rng.uniform(-math.pi, math.pi)
        ax, ay = rng.uniform(6, 26, 2)
        # spike cell within 3 cells of the agent keeps >= 2 cells inside the 12-cell crop
        ix, iy = int(ax + rng.integers(-3, 4)), int(ay + rng.integers(-3, 4))
        d = np.zeros((2, 32, 32))
        d[1, iy, ix] = 1.0
        c = _crop(d, _pose_at(FRAME, ax, ay, theta))
        worst = max(worst, abs(c[1].sum() - 1))
    assert worst < 0.05


def test_crop_rotation_90_rotates_content():
    rng = np.random.default_rng(2)
    d = np.zeros((2, 32, 32))
    d[:, 12:20, 12:20] = rng.random((2, 8, 8))
    c0 = _crop(d, _pose_at(FRAME, 16.0, 16.0, 0.0))
    c90 = _crop(d, _pose_at(FRAME, 16.0, 16.0, math.pi / 2))
    # facing +y, map content that was to the left (+y) is now ahead (+x in the crop)
    assert np.allclose(c90, np.rot90(c0, k=1, axes=(1, 2)), atol=1e-6)


def test_tensor_crop_matches_numpy_and_backprops():
    rng = np.random.default_rng(3)
    d = rng.random((2, 32, 32))
    pose = Pose(31.0, 18.0, 1.1)
    x_np = egocentric_crop(d, pose, FRAME, K)
    t = Tensor(d, requires_grad=True)
    w = rng.normal(size=2 * K * K)
    with Tape() as tape:
        x = egocentric_crop(t, pose, FRAME, K)
        loss = tsum(x * Tensor(w))
    tape.backward(loss)
    assert np.allclose(x.data, x_np, atol=1e-6)
    m = crop_matrix(FRAME, pose, K)
    expect = np.stack([m.T @ w[: K * K], m.T @ w[K * K:]]).reshape(2, 32, 32)
    assert np.allclose(t.grad, expect)


def test_resample_matrix_zero_outside():
    m = resample_matrix(np.array([[-3.0, 5.0], [5.5, 5.5], [40.0, 1.0]]), 8)
    assert m[0].sum() == 0 and m[2].sum() == 0
    assert m[1, 5 * 8 + 5] == 1.0


# -- Act -----------------------------------------------------------------------------


def _act_params(seed=0, dtype=np.float64, k=K, hidden=64):
    p = Params(dtype)
    init_act(p, np.random.default_rng(seed), k, hidden)
    return p


def test_zero_weights_give_half_stop():
    p = _act_params()
    for t in p.values():
        t.data[:] = 0
    out = act(p, np.random.default_rng(0).random(2 * K * K))
    assert (out.e_stop, out.v, out.omega) == (0.0, 0.0, 0.0)
    assert out.p_stop == 0.5


def test_act_matches_formula():
    p = _act_params(1)
    x = np.random.default_rng(1).random(2 * K * K)
    out = act_forward(p, x).data
    pre = p["act.w1"].data @ x + p["act.b1"].data
    hid = leaky_relu(Tensor(pre)).data
    expect = p["act.w2"].data @ np.concatenate([x, hid]) + p["act.b2"].data
    assert np.allclose(out, expect)


def test_act_lipschitz_bound():
    rng = np.random.default_rng(4)
    p = _act_params(4)
    for t in p.values():
        t.data[:] = rng.normal(size=t.shape)
    w1, w2 = p["act.w1"].data, p["act.w2"].data
    bound = np.linalg.norm(w2, 2) * (1 + np.linalg.norm(w1, 2))
    for _ in range(200):
        x = rng.random(2 * K * K)
        dx = rng.normal(size=x.shape) * rng.uniform(1e-4, 1)
        diff = np.linalg.norm(act_forward(p, x + dx).data - act_forward(p, x).data)
        assert diff <= bound * np.linalg.norm(dx) * (1 + 1e-9)


def test_act_pure():
    p = _act_params(5)
    x = np.random.default_rng(5).random(2 * K * K)
    assert np.array_equal(act_forward(p, x).data, act_forward(p, x).data)


def test_act_dimension_mismatch():
    with pytest.raises(DimensionError):
        act(_act_params(), np.zeros(10))


def test_act_gradient_fd():
    worst = 0.0
    for inst in range(20):
        rng = np.random.default_rng(400 + inst)
        p = _act_params(inst, k=3, hidden=6)
        for _ in range(50):
            x = Tensor(rng.random(18), requires_grad=True)
            target = rng.normal(size=3)
            loss = lambda: tsum((act_forward(p, x) - Tensor(target)) ** 2)
            if kink_margin(loss, controller_mod) > 1e-3:
                break
        worst = max(worst, check(loss, list(p.values()) + [x]))
    assert worst < 1e-4


# -- stop decision -------------------------------------------------------------------


def test_kappa_boundary_logit():
    kappa = 0.07
    e0 = math.log(kappa / (1 - kappa))
    assert abs(e0 - (-2.5867)) < 1e-4
    assert stop_decision(ControlOutput(0.5, 0.1, e0 + 1e-6), kappa).stop
    assert not stop_decision(ControlOutput(0.5, 0.1, e0 - 1e-6), kappa).stop


def test_p_stop_equal_kappa_continues():
    a = stop_decision(ControlOutput(0.4, -0.2, 0.0), 0.5)
    assert not a.stop and (a.v, a.omega) == (0.4, -0.2)


def test_kappa_range_enforced():
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            stop_decision(ControlOutput(0, 0, 0), bad)


def test_p_stop_stable_for_large_logits():
    assert ControlOutput(0, 0, 800.0).p_stop == 1.0
    assert ControlOutput(0, 0, -800.0).p_stop == 0.0


def test_profiles_use_kappa_007():
    assert load_profile("paper").kappa == 0.07 and load_profile("desk").kappa == 0.07


def test_clamp_at_simulator_boundary():
    a = clamp_action(Action.velocity(3.0, -9.0), 0.88, 2.0)
    assert (a.v, a.omega) == (0.88, -2.0)
    assert clamp_action(Action.velocity(-1.0, 0.5), 0.88, 2.0).v == 0.0
    assert clamp_action(Action(stop=True), 0.88, 2.0).stop


def test_stage2_model_action_path():
    cfg = load_profile("desk")
    m = Stage2Model(cfg, seed=0)
    x = np.zeros(2 * cfg.crop_k ** 2, dtype=np.float32)
    a = m.action(x)
    assert isinstance(a, Action)
