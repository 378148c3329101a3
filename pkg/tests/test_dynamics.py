import math

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from xtune import dynamics as dyn
from xtune.dynamics import (DivergenceError, GeometryError, PlantConfig, PlantState,
                            SingleTrackParams, equilibrium_throttle, linear_tire_forces,
                            plant_step, randomize_plant, rk4_step, saturating_tire_force,
                            single_track_derivatives, throttle_to_forces)
from xtune.nmpc import NmpcController, NmpcWeights, OcpConfig, VehicleModel
from xtune.path import CartesianPose, cart_to_curvilinear, straight_path
from xtune.simulate import LoopState, closed_loop_step, measure, xdt_rollout

P = SingleTrackParams()


# -- single-track model -------------------------------------------------------------

def test_equilibrium_straight_driving():
    tr = equilibrium_throttle(20.0, P)
    d = single_track_derivatives([20, 0, 0, 0, 0, 0], [0.0, tr], P, 0.0)
    np.testing.assert_allclose(d, [0, 0, 0, 20, 0, 0], atol=1e-12)


def test_lateral_offset_does_not_change_heading_rate():
    tr = equilibrium_throttle(20.0, P)
    d0 = single_track_derivatives([20, 0, 0, 0, 0, 0], [0.0, tr], P, 0.0)
    d1 = single_track_derivatives([20, 0, 0, 0, 1, 0], [0.0, tr], P, 0.0)
    assert d1[dyn.S] == 20.0 and d1[dyn.W] == 0.0
    assert d1[dyn.TH] == d0[dyn.TH]


def test_yaw_moment_balance():
    x = np.array([20.0, 0.5, 0.1, 0.0, 0.0, 0.0])
    delta, tr = 0.02, 0.0
    alpha_f = delta - math.atan((0.5 + P.L_f * 0.1) / 20.0)
    alpha_r = -math.atan((0.5 - P.L_r * 0.1) / 20.0)
    fyf, fyr = P.C_af * alpha_f, P.C_ar * alpha_r
    fxf = 0.0
    expected = (P.L_f * fyf * math.cos(delta) + P.L_f * fxf * math.sin(delta) - P.L_r * fyr) / P.I_z
    d = single_track_derivatives(x, [delta, tr], P, 0.0)
    assert d[dyn.R] == pytest.approx(expected, rel=1e-12)


def test_singular_projection():
    with pytest.raises(GeometryError):
        single_track_derivatives([20, 0, 0, 0, 0.5, 0], [0, 0], P, 2.0)


def test_derivatives_broadcast():
    x = np.tile([20.0, 0.1, 0.02, 5.0, 0.3, 0.01], (4, 3, 1))
    u = np.tile([0.01, 0.2], (4, 3, 1))
    d = single_track_derivatives(x, u, P, 0.01)
    assert d.shape == (4, 3, 6)
    np.testing.assert_allclose(d[2, 1], single_track_derivatives(x[0, 0], u[0, 0], P, 0.01))


# -- tires and drive ------------------------------------------------------------------

def test_linear_tires_examples():
    assert linear_tire_forces([20, 0, 0], 0.0, P) == (0.0, 0.0)
    fyf, fyr = linear_tire_forces([20, 0, 0], 0.01, P)
    assert fyf == pytest.approx(1000.0) and fyr == 0.0


def test_front_slip_angle_oracle():
    p = P.replace(L_f=1.2)
    alpha_f, _ = dyn.slip_angles(20.0, 1.0, 0.1, 0.0, p)
    assert alpha_f == pytest.approx(-math.atan2(1.0 + 1.2 * 0.1, 20.0), abs=1e-12)


def test_throttle_examples():
    assert throttle_to_forces(0.0, P) == (0.0, 0.0)
    assert throttle_to_forces(1.0, P.replace(F_max=6000, drive_split=0.0)) == (0.0, 6000.0)
    assert throttle_to_forces(-0.5, P.replace(F_max=6000, drive_split=0.5)) == (-1500.0, -1500.0)


@settings(max_examples=200)
@given(alpha=st.floats(-10.0, 10.0))
def test_saturating_tire_bounded(alpha):
    assert abs(saturating_tire_force(alpha, 10.0, 1.9, 8000.0)) <= 8000.0


def test_saturating_tire_small_slip_limit():
    B, C, D, a = 10.0, 1.9, 8000.0, 1e-4
    assert abs(saturating_tire_force(a, B, C, D) - B * C * D * a) / a < 1e-2 * B * C * D


@pytest.mark.parametrize("bad", [{"M": 0.0}, {"v_eps": -1.0}, {"drive_split": 1.5}, {"c_r0": -1.0}])
def test_param_invariants(bad):
    with pytest.raises(ValueError):
        P.replace(**bad)


# -- RK4 --------------------------------------------------------------------------------

def test_rk4_zero_field():
    x = np.array([1.0, -2.0])
    np.testing.assert_array_equal(rk4_step(lambda x, u: 0 * x, x, None, 0.1), x)


def test_rk4_exponential():
    x1 = rk4_step(lambda x, u: -x, np.array([1.0]), None, 0.04)
    assert x1[0] == pytest.approx(math.exp(-0.04), abs=1e-8)


def rk4_error(A, x0, T, dt):
    x = np.array(x0, dtype=float)
    for _ in range(int(round(T / dt))):
        x = rk4_step(lambda z, u: A @ z, x, None, dt)
    return np.linalg.norm(x - sla.expm(A * T) @ x0)


def test_rk4_order_four():
    A = np.array([[0.0, 1.0], [-4.0, -0.4]])
    x0 = np.array([1.0, 0.0])
    e1 = rk4_error(A, x0, 2.0, 0.1)
    e2 = rk4_error(A, x0, 2.0, 0.05)
    assert 12.0 <= e1 / e2 <= 20.0


def test_rk4_rejects_bad_step_and_divergence():
    with pytest.raises(ValueError):
        rk4_step(lambda x, u: x, np.ones(1), None, 0.0)
    with pytest.raises(DivergenceError), np.errstate(over="ignore"):
        rk4_step(lambda x, u: x * 1e308, np.ones(1), None, 1.0)


# -- plant ------------------------------------------------------------------------------

def identity_plant(params=P):
    return PlantConfig(nominal=params, tire_model="linear", substeps=1)


def test_plant_matches_prediction_on_straight_path():
    # model-identity configuration: on a straight line (X, Y, psi) == (s, w, theta)
    path = straight_path(200.0)
    cfg = identity_plant()
    ps = PlantState(CartesianPose(10.0, 0.3, 0.02), (20.0, 0.1, 0.01), 0.0, 0.0)
    x = np.array([20.0, 0.1, 0.01, 10.0, 0.3, 0.02])
    u = np.array([0.01, 0.1])
    for _ in range(75):
        ps = plant_step(ps, u, 0.04, cfg)
        x = dyn.prediction_step(x, u, P, path, 0.04)
        c = cart_to_curvilinear(ps.cart, path)
        got = np.array([*ps.vel, c.s, c.w, c.theta])
        assert np.abs(got - x).max() < 1e-6


def test_actuator_lag_time_constant():
    cfg = PlantConfig(nominal=P, tau_delta=0.1)
    ps = PlantState(CartesianPose(0, 0, 0), (20.0, 0.0, 0.0), 0.0, 0.0)
    for _ in range(10):
        ps = plant_step(ps, [0.01, 0.0], 0.01, cfg)
    assert ps.act_delta / 0.01 == pytest.approx(1 - math.exp(-1), rel=0.02)


def test_zero_lag_tracks_command():
    ps = plant_step(PlantState(CartesianPose(0, 0, 0), (20, 0, 0), 0.0, 0.0), [0.02, 0.3], 0.04,
                    PlantConfig(nominal=P))
    assert (ps.act_delta, ps.act_tr) == (0.02, 0.3)


def test_coasting_decelerates():
    cfg = PlantConfig(nominal=P, tire_model="nonlinear", tau_tr=0.2)
    ps = PlantState(CartesianPose(0, 0, 0), (25.0, 0.0, 0.0), 0.0, 0.0)
    prev = ps.vel[0]
    for _ in range(200):
        ps = plant_step(ps, [0.0, 0.0], 0.04, cfg)
        assert ps.vel[0] < prev
        prev = ps.vel[0]


def test_process_noise_needs_rng_and_is_seeded():
    cfg = PlantConfig(nominal=P, process_noise_std=(0, 0, 0, 0.01, 0.01, 0.001))
    ps = PlantState(CartesianPose(0, 0, 0), (20, 0, 0), 0.0, 0.0)
    with pytest.raises(ValueError):
        plant_step(ps, [0, 0], 0.04, cfg)
    a = plant_step(ps, [0, 0], 0.04, cfg, np.random.default_rng(3))
    b = plant_step(ps, [0, 0], 0.04, cfg, np.random.default_rng(3))
    assert a.as_array().tolist() == b.as_array().tolist()


def test_plant_config_validation():
    with pytest.raises(ValueError):
        PlantConfig(randomization={"L_f": 0.1})
    with pytest.raises(ValueError):
        PlantConfig(randomization={"M": 0.4})
    with pytest.raises(ValueError):
        PlantConfig(tau_tr=-1.0)


# -- randomization -----------------------------------------------------------------------

def test_zero_randomization_returns_nominal():
    cfg = PlantConfig(nominal=P)
    assert randomize_plant(cfg, np.random.default_rng(0)) is P


def test_randomization_statistics():
    cfg = PlantConfig(nominal=P, randomization={"M": 0.05})
    rng = np.random.default_rng(1)
    m = np.array([randomize_plant(cfg, rng).M for _ in range(100_000)])
    assert abs(m.mean() / P.M - 1.0) < 0.01
    assert abs(m.std() / (0.05 * P.M) - 1.0) < 0.1
    assert np.all(np.abs(m / P.M - 1.0) <= 0.15 + 1e-12)


def test_randomization_deterministic():
    cfg = PlantConfig(nominal=P, randomization={n: 0.1 for n in dyn.RANDOMIZED})
    a = randomize_plant(cfg, np.random.default_rng(7))
    b = randomize_plant(cfg, np.random.default_rng(7))
    assert a == b


# -- rollouts ---------------------------------------------------------------------------------

def short_loop(plant_cfg, steps, seed=0):
    path = straight_path(300.0, v_ref=20.0)
    ocp = OcpConfig(N_H=10)
    ctrl = NmpcController(VehicleModel(P, path, 0.04), NmpcWeights(), ocp)
    ls = LoopState(PlantState(CartesianPose(0.0, 0.5, 0.0), (19.0, 0.0, 0.0), 0.0, 0.0),
                   np.zeros(2), 0.0, 0.0, ctrl)
    snap = ls.snapshot()
    rng = np.random.default_rng(seed)
    rows = [closed_loop_step(ls, path, plant_cfg, plant_cfg.nominal, 0.04, rng) for _ in range(steps)]
    return path, snap, rows, ls


def test_rollout_replays_recorded_window():
    cfg = identity_plant()
    path, snap, rows, _ = short_loop(cfg, 8)
    win = xdt_rollout(snap.plant, NmpcWeights(), path, cfg, 8, 0.04, np.random.default_rng(5),
                      snap.controller, u_prev=snap.u_prev, randomize=False, s_guess=snap.s_guess)
    assert not win.failed
    np.testing.assert_allclose(win.v_err, [r.v_err for r in rows], atol=1e-6)
    np.testing.assert_allclose(win.w_dev, [r.vehicle.w for r in rows], atol=1e-6)
    np.testing.assert_allclose(win.j_opt, [r.j_opt for r in rows], atol=1e-6)


def test_rollout_from_vehicle_state():
    cfg = identity_plant()
    path, snap, rows, _ = short_loop(cfg, 5)
    x0 = measure(snap.plant, path)
    win = xdt_rollout(x0, NmpcWeights(), path, cfg, 5, 0.04, np.random.default_rng(0),
                      snap.controller, randomize=False)
    np.testing.assert_allclose(win.w_dev, [r.vehicle.w for r in rows], atol=1e-6)


def test_rollout_deterministic_with_equal_seeds():
    cfg = PlantConfig(nominal=P, tire_model="nonlinear", randomization={"M": 0.05},
                      process_noise_std=(0, 0, 0, 0.01, 0.01, 0.001))
    path, snap, _, _ = short_loop(cfg, 1)
    runs = [xdt_rollout(snap.plant, NmpcWeights(), path, cfg, 6, 0.04, np.random.default_rng(9),
                        snap.controller, u_prev=snap.u_prev) for _ in range(2)]
    for name in ("v_err", "w_dev", "j_opt"):
        assert getattr(runs[0], name).tobytes() == getattr(runs[1], name).tobytes()


def test_rollout_does_not_mutate_controller():
    cfg = identity_plant()
    path, _, _, ls = short_loop(cfg, 2)
    snap = ls.snapshot()
    before = snap.controller.last.states.copy()
    xdt_rollout(snap.plant, NmpcWeights().scaled(3.0), path, cfg, 3, 0.04,
                np.random.default_rng(0), snap.controller, u_prev=snap.u_prev, randomize=False)
    np.testing.assert_array_equal(snap.controller.last.states, before)
    assert snap.controller.weights == NmpcWeights()


def test_window_length_for_three_seconds():
    assert int(round(3.0 / 0.04)) == 75
