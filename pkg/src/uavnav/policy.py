"""PPO training of a squashed-Gaussian MLP policy over latent observations.

The policy sees the 14-dim goal/state block concatenated with a memory slot:
either the VAE latent (64) or the LSTM hidden state (256), per ablation mode.
Representation parameters stay frozen during policy optimization; freezing is
checksum-verified.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import CameraIntrinsics
from .env import EnvConfig, NavigationEnv, STATE_DIM, Termination
from .geometry import WorldConfig, generate_world
from .representation import (
    MemoryParams,
    VaeParams,
    encode_batch,
)
from .tensor import (
    AdamState,
    Tensor,
    adam_step,
    affine,
    clip,
    exp,
    lstm_cell,
    minimum,
    mse,
    mul,
    no_grad,
    params_checksum,
    reduce_mean,
    reduce_sum,
    square,
    sub,
    init_uniform,
    tanh,
)
from .util import derived_rng, derived_seed

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG_2PI = math.log(2.0 * math.pi)
ACTION_DIM = 4


class MissingCheckpointError(RuntimeError):
    """Stage-final training started without its trained representations."""


class AblationMode(enum.Enum):
    VANILLA = "VanillaRL"
    CA = "CaRL"
    ME = "MeRL"
    CAME = "CaMeRL"

    @property
    def uses_collision_aware(self) -> bool:
        return self in (AblationMode.CA, AblationMode.CAME)

    @property
    def uses_memory(self) -> bool:
        return self in (AblationMode.ME, AblationMode.CAME)

    def memory_dim(self, n_z: int = 64, hidden: int = 256) -> int:
        return hidden if self.uses_memory else n_z

    @classmethod
    def parse(cls, name: str) -> "AblationMode":
        for m in cls:
            if m.value.lower() == name.lower() or m.name.lower() == name.lower():
                return m
        raise ValueError(f"unknown ablation mode {name!r}")


@dataclass
class PolicyParams:
    """Shared tanh trunk with Gaussian action and value heads."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    mean_w: Tensor
    mean_b: Tensor
    log_std: Tensor
    value_w: Tensor
    value_b: Tensor
    limits: np.ndarray

    @classmethod
    def create(cls, rng: np.random.Generator, obs_dim: int, limits,
               hidden: int = 256, init_log_std: float = -0.5):
        limits = np.asarray(limits, dtype=np.float64)
        if limits.shape != (ACTION_DIM,) or np.any(limits <= 0):
            raise ValueError("limits must be 4 positive magnitudes")
        return cls(
            w1=Tensor(init_uniform(rng, (obs_dim, hidden), obs_dim), True),
            b1=Tensor(np.zeros(hidden), True),
            w2=Tensor(init_uniform(rng, (hidden, hidden), hidden), True),
            b2=Tensor(np.zeros(hidden), True),
            mean_w=Tensor(0.01 * init_uniform(rng, (hidden, ACTION_DIM), hidden), True),
            mean_b=Tensor(np.zeros(ACTION_DIM), True),
            log_std=Tensor(np.full(ACTION_DIM, float(init_log_std)), True),
            value_w=Tensor(init_uniform(rng, (hidden, 1), hidden), True),
            value_b=Tensor(np.zeros(1), True),
            limits=limits,
        )

    @property
    def obs_dim(self) -> int:
        return self.w1.shape[0]

    def tensors(self) -> list:
        return [
            self.w1, self.b1, self.w2, self.b2,
            self.mean_w, self.mean_b, self.log_std,
            self.value_w, self.value_b,
        ]

    def named_arrays(self) -> dict:
        return {
            "w1": self.w1.data, "b1": self.b1.data,
            "w2": self.w2.data, "b2": self.b2.data,
            "mean.w": self.mean_w.data, "mean.b": self.mean_b.data,
            "log_std": self.log_std.data,
            "value.w": self.value_w.data, "value.b": self.value_b.data,
            "limits": self.limits,
        }

    @classmethod
    def from_named_arrays(cls, named: dict) -> "PolicyParams":
        t = lambda k: Tensor(named[k], requires_grad=True)
        return cls(
            w1=t("w1"), b1=t("b1"), w2=t("w2"), b2=t("b2"),
            mean_w=t("mean.w"), mean_b=t("mean.b"), log_std=t("log_std"),
            value_w=t("value.w"), value_b=t("value.b"),
            limits=np.asarray(named["limits"], dtype=np.float64),
        )


def _forward_np(params: PolicyParams, obs: np.ndarray):
    """Numpy fast path for rollouts: (mean, log_std, value)."""
    h = np.tanh(obs @ params.w1.data + params.b1.data)
    h = np.tanh(h @ params.w2.data + params.b2.data)
    mean = h @ params.mean_w.data + params.mean_b.data
    value = (h @ params.value_w.data + params.value_b.data)[:, 0]
    log_std = np.clip(params.log_std.data, LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std, value


def _softplus(x):
    return np.logaddexp(0.0, x)


def _squash_correction(u: np.ndarray, limits: np.ndarray) -> np.ndarray:
    """Sum of log|d squash / du|, numerically stable for large |u|."""
    log_jac = np.log(limits) + 2.0 * (math.log(2.0) - u - _softplus(-2.0 * u))
    return log_jac.sum(axis=-1)


def gaussian_log_prob(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray):
    z = (u - mean) / np.exp(log_std)
    return (-0.5 * z * z - log_std - 0.5 * LOG_2PI).sum(axis=-1)


def act_batch(obs: np.ndarray, params: PolicyParams, rng: np.random.Generator,
              deterministic: bool = False) -> dict:
    """Sample (or take the mean of) the squashed Gaussian for a batch."""
    obs = np.atleast_2d(obs)
    if obs.shape[1] != params.obs_dim:
        raise ValueError(
            f"observation dim {obs.shape[1]} does not match policy {params.obs_dim}"
        )
    mean, log_std, value = _forward_np(params, obs)
    if deterministic:
        u = mean.copy()
    else:
        u = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    action = params.limits * np.tanh(u)
    log_prob = gaussian_log_prob(u, mean, log_std) - _squash_correction(
        u, params.limits
    )
    return {"action": action, "u": u, "log_prob": log_prob, "value": value}


def act(obs_vec: np.ndarray, params: PolicyParams, rng: np.random.Generator,
        deterministic: bool = False):
    """Single-observation convenience wrapper: (action, log_prob, value)."""
    out = act_batch(obs_vec[None, :], params, rng, deterministic)
    return out["action"][0], float(out["log_prob"][0]), float(out["value"][0])


def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
        gamma: float, lam: float, bootstrap_value: float = 0.0):
    """Recursive generalized advantage estimation for one stream.

    dones mark terminal steps and reset the recursion; the bootstrap value
    continues the final partial episode.
    """
    n = len(rewards)
    adv = np.zeros(n)
    running = 0.0
    for t in reversed(range(n)):
        next_value = bootstrap_value if t == n - 1 else values[t + 1]
        mask = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * mask - values[t]
        running = delta + gamma * lam * mask * running
        adv[t] = running
    return adv, adv + values


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    entropy_coef: float = 0.003
    value_coef: float = 0.5
    epochs: int = 10
    minibatch: int = 256
    rollout: int = 2048
    total_steps: int = 40_960
    learning_rate: float = 3e-4
    max_grad_norm: float = 0.5
    init_log_std: float = -0.5
    n_envs: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not self.clip_ratio > 0:
            raise ValueError("clip_ratio must be positive")


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    u: np.ndarray
    log_prob: np.ndarray
    value: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    advantage: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self):
        return len(self.reward)


def _policy_log_prob_graph(params: PolicyParams, obs: np.ndarray, u: np.ndarray):
    """Graph computing Gaussian log-density of stored pre-squash actions.

    The tanh-squash Jacobian depends only on the stored u, so it cancels in
    the PPO ratio and stays out of the graph.
    """
    x = Tensor(obs)
    h = tanh(affine(x, params.w1, params.b1))
    h = tanh(affine(h, params.w2, params.b2))
    mean = affine(h, params.mean_w, params.mean_b)
    log_std = clip(params.log_std, LOG_STD_MIN, LOG_STD_MAX)
    inv_std = exp(mul(log_std, -1.0))
    z = mul(sub(Tensor(u), mean), inv_std)
    per_dim = sub(mul(square(z), -0.5), log_std)
    log_prob = reduce_sum(per_dim, axis=1) + (-0.5 * LOG_2PI * ACTION_DIM)
    value = affine(h, params.value_w, params.value_b)
    return log_prob, value, log_std


def ppo_update(buffer: RolloutBuffer, params: PolicyParams, cfg: PpoConfig,
               adam: AdamState, rng: np.random.Generator) -> dict:
    """Clipped-surrogate epochs over shuffled minibatches; reports metrics."""
    n = len(buffer)
    adv = buffer.advantage
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    clip_events = 0
    clip_total = 0
    kl_sum = 0.0
    pi_loss_sum = v_loss_sum = 0.0
    n_batches = 0
    tensors = params.tensors()
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = order[start : start + cfg.minibatch]
            log_prob, value, log_std = _policy_log_prob_graph(
                params, buffer.obs[idx], buffer.u[idx]
            )
            # Stored log-probs include the squash Jacobian; add it back so
            # both sides of the ratio are plain Gaussian densities of u.
            old = buffer.log_prob[idx] + _squash_correction(
                buffer.u[idx], params.limits
            )
            ratio = exp(sub(log_prob, old))
            a = Tensor(adv[idx])
            surr1 = mul(ratio, a)
            surr2 = mul(clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio), a)
            policy_loss = mul(reduce_mean(minimum(surr1, surr2)), -1.0)
            value_loss = mse(value[:, 0], Tensor(buffer.returns[idx]))
            entropy = reduce_sum(log_std) + 0.5 * ACTION_DIM * (1.0 + LOG_2PI)
            loss = (
                policy_loss
                + mul(value_loss, cfg.value_coef)
                + mul(entropy, -cfg.entropy_coef)
            )
            for t in tensors:
                t.zero_grad()
            loss.backward()
            grads = [t.grad for t in tensors]
            total = math.sqrt(
                sum(float(np.sum(g * g)) for g in grads if g is not None)
            )
            if cfg.max_grad_norm > 0 and total > cfg.max_grad_norm:
                scale = cfg.max_grad_norm / total
                grads = [g * scale if g is not None else None for g in grads]
            adam_step(tensors, grads, adam)

            r = ratio.data
            clip_events += int(np.sum(np.abs(r - 1.0) > cfg.clip_ratio))
            clip_total += len(idx)
            kl_sum += float(np.mean(old - log_prob.data))
            pi_loss_sum += policy_loss.item()
            v_loss_sum += value_loss.item()
            n_batches += 1
    return {
        "clip_fraction": clip_events / max(1, clip_total),
        "approx_kl": kl_sum / max(1, n_batches),
        "policy_loss": pi_loss_sum / max(1, n_batches),
        "value_loss": v_loss_sum / max(1, n_batches),
    }


class RepresentationStack:
    """Frozen VAE (+ optional LSTM) turning raw frames into memory vectors.

    Holds the recurrent state for a batch of parallel episodes; rows reset
    to zero at episode starts.
    """

    def __init__(self, mode: AblationMode, vae: VaeParams,
                 mem: MemoryParams | None):
        self.mode = mode
        self.vae = vae.frozen()
        self.mem = mem
        if mode.uses_memory and mem is None:
            raise MissingCheckpointError(f"mode {mode.value} needs a memory module")
        self.h = None
        self.c = None

    def reset_batch(self, n: int):
        if self.mode.uses_memory:
            self.h = np.zeros((n, self.mem.hidden))
            self.c = np.zeros((n, self.mem.hidden))

    def reset_row(self, i: int):
        if self.mode.uses_memory:
            self.h[i] = 0.0
            self.c[i] = 0.0

    def update(self, frames_norm: np.ndarray) -> np.ndarray:
        """frames_norm: (n, 1, H, W) in [0, 1] -> memory matrix (n, dim)."""
        z = encode_batch(self.vae, frames_norm)
        if not self.mode.uses_memory:
            return z
        with no_grad():
            h, c = lstm_cell(
                Tensor(z), Tensor(self.h), Tensor(self.c), self.mem.lstm
            )
        self.h, self.c = h.data, c.data
        return self.h

    def memory_dim(self) -> int:
        return self.mem.hidden if self.mode.uses_memory else self.vae.n_z

    def checksums(self) -> tuple:
        vs = params_checksum(self.vae.named_arrays())
        ms = params_checksum(self.mem.named_arrays()) if self.mem else ""
        return vs, ms


class StackMemory:
    """Env memory adapter over a single-episode representation stack."""

    def __init__(self, stack: RepresentationStack):
        self.stack = stack

    def reset(self):
        self.stack.reset_batch(1)

    def update(self, raw) -> np.ndarray:
        norm = (raw.data / raw.max_range)[None, None]
        return self.stack.update(norm)[0]


def scripted_goal_policy(noise_scale: float = 0.4, gain: float = 2.5,
                         damping: float = 1.2):
    """Noisy proportional goal seeker; a cheap stage-1 stand-in.

    Steers along the goal direction with velocity damping plus exploration
    noise, which produces temporally correlated frame sequences without any
    learned policy on disk.
    """
    from .dynamics import Action

    def policy(obs, rng: np.random.Generator):
        a = gain * obs.d_norm - damping * obs.v_world
        a = a + rng.normal(0.0, noise_scale, 3)
        return Action(a[0], a[1], a[2], 0.0)

    return policy


def save_policy(prefix, params: PolicyParams, mode: AblationMode) -> None:
    """Policy checkpoint tagged with its ablation mode."""
    from .tensor import save_checkpoint

    named = dict(params.named_arrays())
    named["meta.mode"] = np.float64(list(AblationMode).index(mode))
    save_checkpoint(prefix, named)


def load_policy(prefix):
    from .tensor import load_checkpoint

    named = load_checkpoint(prefix)
    mode = list(AblationMode)[int(named.pop("meta.mode"))]
    return PolicyParams.from_named_arrays(named), mode


@dataclass
class TrainSetup:
    """Everything train_policy needs besides the PPO hyperparameters."""

    world_cfg: WorldConfig
    env_cfg: EnvConfig = field(default_factory=EnvConfig)
    intr: CameraIntrinsics = field(default_factory=CameraIntrinsics)


def action_limits(env_cfg: EnvConfig) -> np.ndarray:
    d = env_cfg.dynamics
    return np.array([d.a_max, d.a_max, d.a_max, d.yaw_rate_max])


class VectorRollouts:
    """Synchronous batch of environments sharing one representation stack."""

    def __init__(self, setup: TrainSetup, stack: RepresentationStack,
                 n_envs: int, seed: int):
        self.setup = setup
        self.stack = stack
        self.n = n_envs
        self.seed = seed
        self.world_counter = 0
        self.envs = []
        self.memories = None
        self.episode_returns = np.zeros(n_envs)
        self.finished_returns = []
        self.finished_terms = []
        stack.reset_batch(n_envs)
        for i in range(n_envs):
            self.envs.append(self._fresh_env())
        self._frames = [None] * n_envs
        outcomes = [env.reset() for env in self.envs]
        self.obs_mat = self._assemble(outcomes)

    def _fresh_env(self) -> NavigationEnv:
        cfg = replace(
            self.setup.world_cfg,
            seed=derived_seed(self.seed, 1000 + self.world_counter),
        )
        self.world_counter += 1
        world = generate_world(cfg)
        return NavigationEnv(world, self.setup.env_cfg, self.setup.intr)

    def _assemble(self, outcomes) -> np.ndarray:
        frames = np.stack(
            [env.last_frame.data / env.last_frame.max_range for env in self.envs]
        )[:, None, :, :]
        memory = self.stack.update(frames)
        rows = [
            np.concatenate([o.observation.state_vector(), memory[i]])
            for i, o in enumerate(outcomes)
        ]
        return np.stack(rows)

    def step(self, actions: np.ndarray):
        """Advance all envs one tick; auto-reset finished episodes."""
        from .dynamics import Action

        outcomes = []
        rewards = np.zeros(self.n)
        dones = np.zeros(self.n, dtype=bool)
        for i, env in enumerate(self.envs):
            out = env.step(Action.from_array(actions[i]))
            rewards[i] = out.reward
            self.episode_returns[i] += out.reward
            if out.termination is not Termination.RUNNING:
                dones[i] = True
                self.finished_returns.append(self.episode_returns[i])
                self.finished_terms.append(out.termination)
                self.episode_returns[i] = 0.0
                self.envs[i] = self._fresh_env()
                out = self.envs[i].reset()
                self.stack.reset_row(i)
            outcomes.append(out)
        self.obs_mat = self._assemble(outcomes)
        return rewards, dones


def collect_rollout(vec: VectorRollouts, params: PolicyParams, cfg: PpoConfig,
                    rng: np.random.Generator) -> RolloutBuffer:
    """Fill one on-policy buffer of cfg.rollout total steps."""
    steps = max(1, cfg.rollout // vec.n)
    n = vec.n
    obs = np.zeros((steps, n, params.obs_dim))
    u = np.zeros((steps, n, ACTION_DIM))
    logp = np.zeros((steps, n))
    value = np.zeros((steps, n))
    reward = np.zeros((steps, n))
    done = np.zeros((steps, n), dtype=bool)
    for t in range(steps):
        obs[t] = vec.obs_mat
        out = act_batch(vec.obs_mat, params, rng)
        u[t] = out["u"]
        logp[t] = out["log_prob"]
        value[t] = out["value"]
        reward[t], done[t] = vec.step(params.limits * np.tanh(out["u"]))
    bootstrap = act_batch(vec.obs_mat, params, rng, deterministic=True)["value"]
    adv = np.zeros((steps, n))
    ret = np.zeros((steps, n))
    for i in range(n):
        adv[:, i], ret[:, i] = gae(
            reward[:, i], value[:, i], done[:, i],
            cfg.gamma, cfg.gae_lambda, bootstrap[i],
        )
    flat = lambda a: a.reshape(steps * n, *a.shape[2:])
    return RolloutBuffer(
        obs=flat(obs), u=flat(u), log_prob=flat(logp), value=flat(value),
        reward=flat(reward), done=flat(done),
        advantage=flat(adv), returns=flat(ret),
    )


def train_policy(stage: str, mode: AblationMode, setup: TrainSetup,
                 cfg: PpoConfig, vae: VaeParams | None = None,
                 mem: MemoryParams | None = None, log=None):
    """Three-stage-aware PPO: random frozen reprs for 'initial', trained
    frozen reprs for 'final'.  Returns (policy, per-update history)."""
    if stage not in ("initial", "final"):
        raise ValueError("stage must be 'initial' or 'final'")
    rng = derived_rng(cfg.seed, 31)
    if stage == "initial":
        if vae is None:
            vae = VaeParams.create(
                derived_rng(cfg.seed, 32), setup.intr.height, setup.intr.width
            )
        if mem is None and mode.uses_memory:
            mem = MemoryParams.create(derived_rng(cfg.seed, 33))
    else:
        if vae is None or (mode.uses_memory and mem is None):
            raise MissingCheckpointError(
                f"stage 'final' for {mode.value} needs trained representation "
                "checkpoints"
            )
    stack = RepresentationStack(mode, vae, mem if mode.uses_memory else None)
    before = stack.checksums()

    obs_dim = STATE_DIM + stack.memory_dim()
    params = PolicyParams.create(
        derived_rng(cfg.seed, 34), obs_dim, action_limits(setup.env_cfg),
        init_log_std=cfg.init_log_std,
    )
    adam = AdamState.create(params.tensors(), lr=cfg.learning_rate)
    vec = VectorRollouts(setup, stack, cfg.n_envs, cfg.seed)

    history = []
    done_steps = 0
    update = 0
    while done_steps < cfg.total_steps:
        buffer = collect_rollout(vec, params, cfg, rng)
        done_steps += len(buffer)
        metrics = ppo_update(buffer, params, cfg, adam, rng)
        recent = vec.finished_returns[-50:]
        recent_terms = vec.finished_terms[-50:]
        metrics.update(
            update=update,
            steps=done_steps,
            mean_return=float(np.mean(recent)) if recent else float("nan"),
            arrive_rate=(
                sum(t is Termination.ARRIVED for t in recent_terms) / len(recent_terms)
                if recent_terms else float("nan")
            ),
        )
        history.append(metrics)
        if log:
            log(metrics)
        update += 1

    after = stack.checksums()
    if before != after:
        raise RuntimeError("representation parameters changed during policy training")
    return params, history
