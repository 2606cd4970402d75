import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from electricsight.baselines import (
    FlatGroundModel,
    baseline_min_distance,
    depth_error_magnitude,
    depth_error_model,
    depth_from_ground_point,
)
from electricsight.errors import AboveHorizon, SingularDenominator
from electricsight.geometry import project
from electricsight.keypoints import BoundingBox, extract_keypoints
from electricsight.scenesim import CorridorSpec

MODEL = FlatGroundModel(1000.0, 10.0, 500.0)


def test_depth_examples():
    assert depth_from_ground_point(MODEL, 600.0) == pytest.approx(100.0)
    assert depth_from_ground_point(MODEL, 700.0) == pytest.approx(50.0)


def test_above_horizon():
    with pytest.raises(AboveHorizon):
        depth_from_ground_point(MODEL, 500.0)
    with pytest.raises(AboveHorizon):
        depth_from_ground_point(MODEL, 420.0)


@given(st.floats(0.01, 500), st.floats(0.01, 500))
def test_depth_strictly_decreasing(y1, y2):
    if y1 == y2:
        return
    z1 = depth_from_ground_point(MODEL, 500 + y1)
    z2 = depth_from_ground_point(MODEL, 500 + y2)
    assert (z1 > z2) == (y1 < y2)


def test_error_model_example():
    err = depth_error_model(MODEL, 100.0, 1.0)
    assert err == pytest.approx(10000 / 101 - 100, abs=1e-12)
    assert err == pytest.approx(-0.9901, abs=1e-4)
    assert depth_error_magnitude(MODEL, 100.0, 1.0) == pytest.approx(0.9901, abs=1e-4)


def test_error_zero_pixels():
    assert depth_error_model(MODEL, 137.0, 0) == 0.0


def test_error_quadratic_growth():
    small = depth_error_magnitude(MODEL, 20.0, 0.05)
    double = depth_error_magnitude(MODEL, 40.0, 0.05)
    assert double / small == pytest.approx(4.0, rel=0.01)


def test_singular():
    with pytest.raises(SingularDenominator):
        depth_error_model(MODEL, 100.0, -100.0)


def test_closed_forms_agree_on_grid():
    for f, H, Z, n in itertools.product([500.0, 1000.0], [5.0, 10.0], [25, 50, 100, 200],
                                        [-2, -1, 1, 2]):
        m = FlatGroundModel(f, H, 0.0)
        a = abs(depth_error_model(m, Z, n))
        b = depth_error_magnitude(m, Z, n)
        assert abs(a - b) <= 1e-12 * b


@given(st.floats(100, 3000), st.floats(1, 40), st.floats(1, 400), st.floats(-5, 5))
def test_sign_and_forms(f, H, Z, n):
    m = FlatGroundModel(f, H, 0.0)
    y = f * H / Z
    if y + n <= 0 or abs(n) < 1e-6:
        return
    err = depth_error_model(m, Z, n)
    assert np.sign(err) == -np.sign(n)
    mag = depth_error_magnitude(m, Z, n)
    assert abs(abs(err) - mag) <= 1e-10 * max(mag, 1e-300) + 1e-12 * Z


def test_flat_scene_depth_exact():
    spec = CorridorSpec().noiseless()
    cam, ext = spec.camera, spec.extrinsics
    model = FlatGroundModel.from_extrinsics(cam, ext, 0.0)
    for x in (10.0, 40.0, 90.0, 190.0):
        for y in (-12.0, -4.0, 6.0):
            px, z = project(cam, ext, (x, y, 0.0))
            assert abs(depth_from_ground_point(model, px[1]) - z) < 1e-6


def test_sloped_scene_error_grows():
    spec = CorridorSpec(slope_deg=5.0).noiseless()
    cam, ext = spec.camera, spec.extrinsics
    model = FlatGroundModel.from_extrinsics(cam, ext, 0.0)
    errs = []
    for x in (20.0, 40.0, 60.0, 80.0):
        px, z = project(cam, ext, (x, -4.0, spec.ground_z(x)))
        errs.append(abs(depth_from_ground_point(model, px[1]) - z))
    assert all(b > a for a, b in zip(errs, errs[1:]))


def test_baseline_above_horizon():
    spec = CorridorSpec()
    model = FlatGroundModel.from_extrinsics(spec.camera, spec.extrinsics, 0.0)
    box = BoundingBox("aerial_lift", 900, model.horizon_row - 80, 960, model.horizon_row - 5)
    with pytest.raises(AboveHorizon):
        baseline_min_distance(extract_keypoints(box), model, spec.camera, spec.extrinsics,
                              [[50, 0, 18], [51, 0, 18]])


def test_baseline_report_schema():
    spec = CorridorSpec()
    model = FlatGroundModel.from_extrinsics(spec.camera, spec.extrinsics, 0.0)
    box = BoundingBox("aerial_lift", 900, 600, 960, 700)
    rep = baseline_min_distance(extract_keypoints(box), model, spec.camera, spec.extrinsics,
                                [[50, 0, 18], [51, 0, 18]], d_thres=10.0)
    assert rep.method == "mobileye"
    assert rep.alarm == (rep.d_min < 10.0)
    assert set(rep.to_dict()) >= {"d_min", "alarm", "flags", "s_d"}
