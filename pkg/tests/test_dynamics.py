import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uavnav.dynamics import Action, DynamicsConfig, UavState, clamp_norm, step, wrap_angle
from uavnav.geometry import Vec3

CFG = DynamicsConfig()


def hover(x=0.0, y=0.0, z=1.0, yaw=0.0):
    return UavState(Vec3(x, y, z), Vec3(0.0, 0.0, 0.0), yaw, 0.0)


def test_zero_action_is_fixed_point():
    s = hover()
    out = step(s, Action(0, 0, 0, 0), CFG)
    assert out == s


def test_semi_implicit_arithmetic():
    out = step(hover(), Action(1.0, 0.0, 0.0, 0.0), CFG)
    assert out.velocity.x == pytest.approx(0.1, abs=1e-15)
    assert out.position.x == pytest.approx(0.01, abs=1e-15)
    assert out.position.y == 0.0 and out.position.z == 1.0


def test_speed_saturates_exactly_at_cap():
    cfg = DynamicsConfig(v_cap=2.0)
    s = hover()
    for _ in range(100):
        s = step(s, Action(3.0, 0.0, 0.0, 0.0), cfg)
    # Closed form: after ceil(v_cap / (a*dt)) steps the cap is active and the
    # axis-aligned clamp is exact.
    assert s.velocity.x == 2.0
    assert abs(np.linalg.norm(s.velocity.as_array())) == 2.0


def test_action_clamped_before_integration():
    out = step(hover(), Action(100.0, 0.0, 0.0, 100.0), CFG)
    assert out.velocity.x == pytest.approx(CFG.a_max * CFG.dt)
    assert out.yaw_rate == CFG.yaw_rate_max


@settings(max_examples=200, deadline=None)
@given(
    vx=st.floats(-5, 5), vy=st.floats(-5, 5), vz=st.floats(-5, 5),
    ax=st.floats(-10, 10), ay=st.floats(-10, 10), az=st.floats(-10, 10),
)
def test_velocity_norm_capped(vx, vy, vz, ax, ay, az):
    s = UavState(Vec3(0, 0, 0), Vec3(vx, vy, vz), 0.0, 0.0)
    out = step(s, Action(ax, ay, az, 0.0), CFG)
    assert np.linalg.norm(out.velocity.as_array()) <= CFG.v_cap * (1 + 1e-12)


@settings(max_examples=200, deadline=None)
@given(yaw=st.floats(-50, 50), rate=st.floats(-1.5, 1.5))
def test_yaw_always_wrapped(yaw, rate):
    s = UavState(Vec3(0, 0, 0), Vec3(0, 0, 0), wrap_angle(yaw), 0.0)
    out = step(s, Action(0, 0, 0, rate), CFG)
    assert -math.pi < out.yaw <= math.pi


def test_wrap_angle_boundaries():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(0.0) == 0.0
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)


def test_time_reversible_in_unclamped_regime():
    rng = np.random.default_rng(5)
    for _ in range(50):
        v0 = rng.uniform(-1, 1, 3)
        p0 = rng.uniform(-5, 5, 3)
        a = rng.uniform(-2, 2, 3)
        s0 = UavState(Vec3.from_array(p0), Vec3.from_array(v0), 0.0, 0.0)
        s1 = step(s0, Action(a[0], a[1], a[2], 0.0), CFG)
        # Inverse: explicit-Euler back-step with the velocity update swapped
        # to the other side.
        p_back = s1.position.as_array() - s1.velocity.as_array() * CFG.dt
        v_back = s1.velocity.as_array() - a * CFG.dt
        assert np.abs(p_back - p0).max() < 1e-9
        assert np.abs(v_back - v0).max() < 1e-9


def test_body_frame_velocity():
    s = UavState(Vec3(0, 0, 0), Vec3(0.0, 1.0, 0.0), math.pi / 2, 0.0)
    vb = s.velocity_body()
    assert vb[0] == pytest.approx(1.0)
    assert vb[1] == pytest.approx(0.0, abs=1e-12)
    assert np.array_equal(s.euler(), [0.0, 0.0, math.pi / 2])
    assert np.array_equal(s.omega_body(), [0.0, 0.0, 0.0])


def test_clamp_norm_leaves_short_vectors():
    v = np.array([0.3, 0.4, 0.0])
    assert clamp_norm(v, 1.0) is v


def test_config_validation():
    with pytest.raises(ValueError):
        DynamicsConfig(dt=0.0)
    with pytest.raises(ValueError):
        DynamicsConfig(v_cap=-1.0)
