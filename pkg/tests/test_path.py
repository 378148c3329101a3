import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from xtune.path import (CartesianPose, CurvilinearPose, DlcGeometry, OutOfCorridorError,
                        PathError, ReferencePath, build_dlc_path, cart_to_curvilinear,
                        curvature_from_waypoints, curvilinear_to_cart, maneuver_index, query,
                        straight_path, wrap_angle)

DLC = build_dlc_path(DlcGeometry(), 0.25)


def circle_path(radius=50.0, spacing=0.5, ccw=True, arc=np.pi):
    n = int(round(radius * arc / spacing))
    phi = np.linspace(0.0, arc, n + 1)
    sign = 1.0 if ccw else -1.0
    xy = np.stack([radius * np.sin(phi), sign * radius * (1.0 - np.cos(phi))], axis=1)
    psi, kappa = curvature_from_waypoints(xy)
    s = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(xy, axis=0).T))])
    ones = np.ones_like(s)
    return ReferencePath.from_samples(s, xy[:, 0], xy[:, 1], psi, kappa, 3 * ones, 3 * ones,
                                      10 * ones)


# -- build_dlc_path ---------------------------------------------------------------

def test_dlc_reference_speed_constant():
    geom = DlcGeometry(repeats=4, entry_speed=80 / 3.6)
    path = build_dlc_path(geom, 0.25)
    np.testing.assert_allclose(path.v_ref, 22.2222222, rtol=1e-6)


def test_zero_offset_is_straight():
    path = build_dlc_path(DlcGeometry(lane_offset=0.0, repeats=1), 0.25)
    assert np.all(path.kappa == 0.0)
    assert np.abs(path.Y).max() < 1e-12


def test_total_length_two_repeats():
    geom = DlcGeometry(repeats=2)
    path = build_dlc_path(geom, 0.25)
    assert abs(path.total_length - 2 * sum(geom.section_lengths)) <= 0.25


@pytest.mark.parametrize("lengths", [(40, 0, 30, 60, 40), (40, -5, 30, 60, 40), (1, 2, 3, 4)])
def test_invalid_geometry_rejected(lengths):
    with pytest.raises(PathError):
        build_dlc_path(DlcGeometry(section_lengths=lengths), 0.25)


def test_dlc_lane_offset_reached():
    geom = DlcGeometry(repeats=1)
    L = np.cumsum(geom.section_lengths)
    mid_side = 0.5 * (L[1] + L[2])
    assert query(DLC, mid_side).Y_c == pytest.approx(geom.lane_offset, abs=1e-6)
    assert query(DLC, L[-1]).Y_c == pytest.approx(0.0, abs=1e-6)


def test_curvature_integrates_to_heading():
    # trapezoid rule of kappa over each section against the heading change
    geom = DlcGeometry()
    edges = np.cumsum((0.0,) + geom.section_lengths)
    for a, b in zip(edges[:-1], edges[1:]):
        m = (DLC.s >= a - 1e-9) & (DLC.s <= b + 1e-9)
        integral = trapezoid(DLC.kappa[m], DLC.s[m])
        assert integral == pytest.approx(DLC.psi[m][-1] - DLC.psi[m][0], abs=1e-3)


def test_dlc_curvature_matches_positions():
    _, kappa = curvature_from_waypoints(np.stack([DLC.X, DLC.Y], axis=1))
    assert np.abs(kappa[2:-2] - DLC.kappa[2:-2]).max() < 1e-3


def test_iso_preset():
    geom = DlcGeometry.iso_standard()
    assert geom.maneuver_length == 110.0
    build_dlc_path(geom, 0.25)


# -- curvature_from_waypoints -------------------------------------------------------

def test_straight_waypoints_zero_curvature():
    xy = np.stack([np.linspace(0, 10, 21), 0.5 * np.linspace(0, 10, 21)], axis=1)
    psi, kappa = curvature_from_waypoints(xy)
    np.testing.assert_allclose(kappa, 0.0, atol=1e-12)
    np.testing.assert_allclose(psi, math.atan(0.5))


@pytest.mark.parametrize("ccw,sign", [(True, 1.0), (False, -1.0)])
def test_circle_curvature(ccw, sign):
    path = circle_path(ccw=ccw)
    assert np.abs(path.kappa - sign * 0.02).max() < 1e-4


def test_duplicate_waypoints_rejected():
    with pytest.raises(PathError):
        curvature_from_waypoints([[0, 0], [1, 0], [1, 0], [2, 0]])


# -- projections ------------------------------------------------------------------------

def test_straight_projection_example():
    path = straight_path(20.0)
    c = cart_to_curvilinear(CartesianPose(5.0, 1.0, 0.0), path)
    assert c == pytest.approx((5.0, 1.0, 0.0))


def test_on_centerline_zero_offset():
    pt = DLC.query(123.4)
    c = cart_to_curvilinear(CartesianPose(pt.X_c, pt.Y_c, pt.psi_c), DLC)
    assert c.s == pytest.approx(123.4, abs=1e-9)
    assert abs(c.w) < 1e-9 and abs(c.theta) < 1e-9


def test_circle_inward_offset_is_left():
    # left-positive lateral offset: inward on a counter-clockwise circle is +1
    path = circle_path()
    pt = path.query(40.0)
    nx, ny = -math.sin(pt.psi_c), math.cos(pt.psi_c)
    c = cart_to_curvilinear(CartesianPose(pt.X_c + nx, pt.Y_c + ny, pt.psi_c), path)
    assert c.w == pytest.approx(1.0, abs=1e-3)
    # and the point is indeed closer to the circle center
    center = np.array([0.0, 50.0])
    assert np.hypot(pt.X_c + nx - center[0], pt.Y_c + ny - center[1]) == pytest.approx(49.0, abs=1e-2)


def test_origin_maps_to_first_point():
    pose = curvilinear_to_cart(CurvilinearPose(0.0, 0.0, 0.0), DLC)
    assert pose == pytest.approx((DLC.X[0], DLC.Y[0], DLC.psi[0]))


def test_out_of_range_arc_length():
    with pytest.raises(PathError):
        curvilinear_to_cart(CurvilinearPose(DLC.total_length + 1.0, 0.0, 0.0), DLC)
    with pytest.raises(PathError):
        DLC.query(-0.1)


def test_far_pose_out_of_corridor():
    with pytest.raises(OutOfCorridorError):
        cart_to_curvilinear(CartesianPose(50.0, 40.0, 0.0), DLC)


def test_query_ends_and_midpoint():
    path = straight_path(10.0, sample_spacing=1.0)
    assert path.query(0.0).X_c == 0.0
    assert path.query(10.0).X_c == 10.0
    assert path.query(2.5).X_c == pytest.approx(2.5)


@settings(max_examples=200, deadline=None)
@given(s=st.floats(0.0, 20.0), w=st.floats(-1.9, 1.9), th=st.floats(-3.0, 3.0))
def test_straight_round_trip_exact(s, w, th):
    path = straight_path(20.0)
    pose = curvilinear_to_cart(CurvilinearPose(s, w, th), path)
    back = curvilinear_to_cart(cart_to_curvilinear(pose, path), path)
    assert np.hypot(back.X - pose.X, back.Y - pose.Y) < 1e-6


@settings(max_examples=300, deadline=None)
@given(s=st.floats(0.0, DLC.total_length), w=st.floats(-1.5, 1.5), th=st.floats(-1.0, 1.0))
def test_dlc_round_trip(s, w, th):
    pose = curvilinear_to_cart(CurvilinearPose(s, w, th), DLC)
    c = cart_to_curvilinear(pose, DLC, s_guess=s)
    back = curvilinear_to_cart(c, DLC)
    assert np.hypot(back.X - pose.X, back.Y - pose.Y) < 1e-3
    assert abs(wrap_angle(back.psi - pose.psi)) < 1e-6


@settings(max_examples=200, deadline=None)
@given(s=st.floats(0.0, DLC.total_length))
def test_centerline_query_projects_to_zero(s):
    pt = DLC.query(s)
    c = cart_to_curvilinear(CartesianPose(pt.X_c, pt.Y_c, pt.psi_c), DLC)
    assert abs(c.w) < 1e-9 and abs(c.theta) < 1e-9


@settings(max_examples=200, deadline=None)
@given(s=st.floats(1.0, DLC.total_length - 1.0), d=st.floats(-1.4, 1.4))
def test_left_normal_sign_convention(s, d):
    pt = DLC.query(s)
    pose = CartesianPose(pt.X_c - d * math.sin(pt.psi_c), pt.Y_c + d * math.cos(pt.psi_c), pt.psi_c)
    assert cart_to_curvilinear(pose, DLC).w == pytest.approx(d, abs=1e-3)


@settings(max_examples=100, deadline=None)
@given(a=st.floats(0.0, DLC.total_length), b=st.floats(0.0, DLC.total_length))
def test_query_monotone_in_s(a, b):
    lo, hi = sorted((a, b))
    assert DLC.query(lo).s <= DLC.query(hi).s


# -- I/O and helpers ----------------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    f = tmp_path / "path.csv"
    DLC.to_csv(f)
    assert f.read_text().splitlines()[0] == "s,X_c,Y_c,psi_c,kappa_c,w_l,w_r,v_ref"
    back = ReferencePath.from_csv(f)
    for name in ("s", "X", "Y", "psi", "kappa", "w_l", "w_r", "v_ref"):
        np.testing.assert_allclose(getattr(back, name), getattr(DLC, name), rtol=0, atol=1e-12)


def test_maneuver_index():
    geom = DlcGeometry()
    L = geom.maneuver_length
    assert list(maneuver_index([0.0, L - 1, L, 3.5 * L, 4 * L], geom)) == [0, 0, 1, 3, 3]
