"""Simplified quadrotor: double-integrator translation, first-order yaw."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Vec3


@dataclass(frozen=True)
class Action:
    """Desired world-frame acceleration plus yaw rate."""

    a_x: float
    a_y: float
    a_z: float
    v_yaw: float

    def as_array(self) -> np.ndarray:
        return np.array([self.a_x, self.a_y, self.a_z, self.v_yaw])

    @classmethod
    def from_array(cls, a) -> "Action":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass(frozen=True)
class UavState:
    position: Vec3
    velocity: Vec3
    yaw: float
    yaw_rate: float

    def euler(self) -> np.ndarray:
        """Euler attitude with roll/pitch pinned to zero."""
        return np.array([0.0, 0.0, self.yaw])

    def omega_body(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.yaw_rate])

    def velocity_body(self) -> np.ndarray:
        """World velocity rotated into the body frame (yaw only)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        v = self.velocity
        return np.array([c * v.x + s * v.y, -s * v.x + c * v.y, v.z])


@dataclass(frozen=True)
class DynamicsConfig:
    dt: float = 0.1
    a_max: float = 5.0
    v_cap: float = 3.0
    yaw_rate_max: float = 1.5

    def __post_init__(self):
        for name in ("dt", "a_max", "v_cap", "yaw_rate_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    return math.pi - (math.pi - a) % (2.0 * math.pi)


def clamp_norm(v: np.ndarray, cap: float) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n > cap:
        return (v / n) * cap
    return v


def step(state: UavState, action: Action, cfg: DynamicsConfig) -> UavState:
    """One semi-implicit Euler step at the policy rate.

    Acceleration components and yaw rate are clamped first; the updated
    velocity (norm-capped at v_cap) then advances the position.
    """
    a = np.clip(action.as_array()[:3], -cfg.a_max, cfg.a_max)
    v = clamp_norm(state.velocity.as_array() + a * cfg.dt, cfg.v_cap)
    p = state.position.as_array() + v * cfg.dt
    yaw_rate = float(np.clip(action.v_yaw, -cfg.yaw_rate_max, cfg.yaw_rate_max))
    yaw = wrap_angle(state.yaw + yaw_rate * cfg.dt)
    return UavState(
        position=Vec3.from_array(p),
        velocity=Vec3.from_array(v),
        yaw=yaw,
        yaw_rate=yaw_rate,
    )
