"""Flat INI-style run configuration shared by every CLI subcommand.

Sections group the per-module options; every key has a documented default
and unknown sections or keys are hard errors so typos cannot silently fall
back to defaults.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field

from .camera import CameraIntrinsics
from .collision_aware import CollisionAwareConfig
from .dynamics import DynamicsConfig
from .env import EnvConfig, RewardConfig
from .evaluation import EvalProtocol
from .geometry import Vec3, WorldConfig, get_scale_class
from .policy import PpoConfig
from .representation import TrainConfig


class ConfigError(ValueError):
    pass


_DEFAULTS = {
    "run": {
        "seed": 0,
        "out": "runs/out",
        "workers": 1,
    },
    "world": {
        "scale_class": "Nominal",
        "bounds": "0 0 0 20 20 3",
        "poisson_radius": 2.0,
        "ceiling_height": 3.0,
        "clearance": 0.6,
    },
    "camera": {
        "width": 64,
        "height": 48,
        "hfov_deg": 87.0,
        "max_range": 10.0,
    },
    "preprocess": {
        "d_uav": 0.3,
        "contour_grad_threshold": 0.3,
        "inflation_scale": 0.5,
    },
    "dynamics": {
        "dt": 0.1,
        "a_max": 5.0,
        "v_cap": 3.0,
        "yaw_rate_max": 1.5,
    },
    "reward": {
        "r_arrive": 10.0,
        "r_collision": -10.0,
        "r_exceed": -5.0,
        "lambda_d": -0.5,
        "lambda_z": -0.2,
        "lambda_v": -0.1,
        "lambda_dir": -0.1,
        "lambda_ang": -0.05,
        "lambda_lat": -0.05,
        "d_min": 0.5,
        "v_max": 2.0,
        "signed_dz": False,
    },
    "env": {
        "max_steps": 300,
    },
    "collect": {
        "episodes": 200,
        "max_frames": 10000,
    },
    "vae": {
        "lambda_kl": 1e-3,
        "learning_rate": 1e-3,
        "batch_size": 16,
        "epochs": 30,
    },
    "lstm": {
        "temporal_interval": 10,
        "learning_rate": 1e-3,
        "batch_windows": 4,
        "epochs": 10,
    },
    "ppo": {
        "gamma": 0.99,
        "gae_lambda": 0.95,
        "clip_ratio": 0.2,
        "entropy_coef": 0.003,
        "value_coef": 0.5,
        "epochs": 10,
        "minibatch": 256,
        "rollout": 2048,
        "total_steps": 40960,
        "learning_rate": 3e-4,
        "max_grad_norm": 0.5,
        "init_log_std": -0.5,
        "n_envs": 16,
    },
    "eval": {
        "seeds": 4,
        "runs_per_seed": 25,
        "deterministic": True,
        "speed_all_runs": False,
    },
}


def _convert(raw: str, like, section: str, key: str):
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(
            f"bad value {raw!r} for [{section}] {key} "
            f"(expected {type(like).__name__})"
        ) from None


@dataclass
class RunConfig:
    """Parsed configuration; section dicts mirror the defaults table."""

    sections: dict = field(default_factory=lambda: {
        s: dict(kv) for s, kv in _DEFAULTS.items()
    })

    @classmethod
    def load(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        cfg = cls()
        for section in parser.sections():
            if section not in _DEFAULTS:
                raise ConfigError(
                    f"unknown section [{section}]; known: {sorted(_DEFAULTS)}"
                )
            for key, raw in parser.items(section):
                if key not in _DEFAULTS[section]:
                    raise ConfigError(
                        f"unknown key '{key}' in [{section}]; "
                        f"known: {sorted(_DEFAULTS[section])}"
                    )
                cfg.sections[section][key] = _convert(
                    raw, _DEFAULTS[section][key], section, key
                )
        cfg.validate()
        return cfg

    def validate(self):
        try:
            self.world_config()
            self.intrinsics()
            self.capre_config()
            self.env_config()
            self.ppo_config()
            self.protocol()
            self.vae_train_config()
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def get(self, section: str, key: str):
        return self.sections[section][key]

    def set(self, section: str, key: str, value):
        if section not in _DEFAULTS or key not in _DEFAULTS[section]:
            raise ConfigError(f"unknown config entry [{section}] {key}")
        self.sections[section][key] = value

    @property
    def seed(self) -> int:
        return int(self.sections["run"]["seed"])

    @property
    def out_dir(self) -> str:
        return self.sections["run"]["out"]

    @property
    def workers(self) -> int:
        return int(self.sections["run"]["workers"])

    def world_config(self, seed: int | None = None) -> WorldConfig:
        w = self.sections["world"]
        vals = [float(t) for t in str(w["bounds"]).split()]
        if len(vals) != 6:
            raise ConfigError("[world] bounds needs 6 numbers: min xyz, max xyz")
        return WorldConfig(
            bounds_min=Vec3(vals[0], vals[1], vals[2]),
            bounds_max=Vec3(vals[3], vals[4], vals[5]),
            scale_class=get_scale_class(str(w["scale_class"])),
            poisson_radius=float(w["poisson_radius"]),
            ceiling_height=float(w["ceiling_height"]),
            clearance=float(w["clearance"]),
            seed=self.seed if seed is None else seed,
        )

    def intrinsics(self) -> CameraIntrinsics:
        c = self.sections["camera"]
        return CameraIntrinsics(
            width=int(c["width"]),
            height=int(c["height"]),
            hfov=math.radians(float(c["hfov_deg"])),
            max_range=float(c["max_range"]),
        )

    def capre_config(self) -> CollisionAwareConfig:
        p = self.sections["preprocess"]
        return CollisionAwareConfig(
            d_uav=float(p["d_uav"]),
            contour_grad_threshold=float(p["contour_grad_threshold"]),
            intr=self.intrinsics(),
            inflation_scale=float(p["inflation_scale"]),
        )

    def dynamics_config(self) -> DynamicsConfig:
        d = self.sections["dynamics"]
        return DynamicsConfig(
            dt=float(d["dt"]),
            a_max=float(d["a_max"]),
            v_cap=float(d["v_cap"]),
            yaw_rate_max=float(d["yaw_rate_max"]),
        )

    def reward_config(self) -> RewardConfig:
        r = self.sections["reward"]
        return RewardConfig(**{k: r[k] for k in r})

    def env_config(self) -> EnvConfig:
        return EnvConfig(
            reward=self.reward_config(),
            dynamics=self.dynamics_config(),
            d_uav=float(self.sections["preprocess"]["d_uav"]),
            max_steps=int(self.sections["env"]["max_steps"]),
        )

    def vae_train_config(self) -> TrainConfig:
        v = self.sections["vae"]
        return TrainConfig(
            lambda_kl=float(v["lambda_kl"]),
            learning_rate=float(v["learning_rate"]),
            batch_size=int(v["batch_size"]),
            epochs=int(v["epochs"]),
            seed=self.seed,
        )

    def lstm_train_config(self) -> TrainConfig:
        l = self.sections["lstm"]
        return TrainConfig(
            learning_rate=float(l["learning_rate"]),
            batch_size=int(l["batch_windows"]),
            epochs=int(l["epochs"]),
            seed=self.seed,
        )

    def ppo_config(self) -> PpoConfig:
        p = self.sections["ppo"]
        return PpoConfig(
            gamma=float(p["gamma"]),
            gae_lambda=float(p["gae_lambda"]),
            clip_ratio=float(p["clip_ratio"]),
            entropy_coef=float(p["entropy_coef"]),
            value_coef=float(p["value_coef"]),
            epochs=int(p["epochs"]),
            minibatch=int(p["minibatch"]),
            rollout=int(p["rollout"]),
            total_steps=int(p["total_steps"]),
            learning_rate=float(p["learning_rate"]),
            max_grad_norm=float(p["max_grad_norm"]),
            init_log_std=float(p["init_log_std"]),
            n_envs=int(p["n_envs"]),
            seed=self.seed,
        )

    def protocol(self) -> EvalProtocol:
        e = self.sections["eval"]
        return EvalProtocol(
            seeds=int(e["seeds"]),
            runs_per_seed=int(e["runs_per_seed"]),
            deterministic=bool(e["deterministic"]),
            master_seed=self.seed,
            speed_all_runs=bool(e["speed_all_runs"]),
        )

    def dump(self) -> str:
        """Canonical text of every effective value; manifest material."""
        lines = []
        for section in _DEFAULTS:
            lines.append(f"[{section}]")
            for key in _DEFAULTS[section]:
                lines.append(f"{key} = {self.sections[section][key]}")
            lines.append("")
        return "\n".join(lines)


def default_config_text() -> str:
    """A complete config template with every default spelled out."""
    return RunConfig().dump()
