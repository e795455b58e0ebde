"""Representation learning: a depth-image VAE plus a recurrent memory.

The VAE encodes a raw depth frame into a 64-dim Gaussian latent; depending on
the supervision target (raw or collision-aware) its latent space carries plain
geometry or clearance-aware structure.  The memory module runs the latent
sequence through one LSTM cell and learns, via a dual-frame decoding head, to
retain both the current frame and a frame T steps in the past.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .camera import DepthImage
from .tensor import (
    AdamState,
    LstmParams,
    Tensor,
    adam_step,
    affine,
    clip,
    concat,
    conv2d,
    gaussian_kl,
    init_uniform,
    lstm_cell,
    mse,
    no_grad,
    relu,
    reparameterize,
    reshape,
    sigmoid,
    transposed_conv2d,
)
from .util import derived_rng

N_Z = 64
LSTM_HIDDEN = 256
ENC_CHANNELS = (8, 16, 32, 64, 64, 128)
ENC_STRIDES = (2, 2, 2, 2, 2, 2)


class EmptyDatasetError(ValueError):
    pass


class SequenceTooShortError(ValueError):
    pass


def _spatial_chain(h: int, w: int, strides):
    """Conv output sizes for kernel 3, padding 1: ceil-div per stride."""
    sizes = [(h, w)]
    for s in strides:
        h = (h + s - 1) // s
        w = (w + s - 1) // s
        sizes.append((h, w))
    return sizes


@dataclass
class VaeParams:
    """Six stride-2 convs + two dense heads; mirrored transposed decoder."""

    conv_w: list
    conv_b: list
    fc_mu_w: Tensor
    fc_mu_b: Tensor
    fc_lv_w: Tensor
    fc_lv_b: Tensor
    dec_fc_w: Tensor
    dec_fc_b: Tensor
    deconv_w: list
    deconv_b: list
    spatial: list
    n_z: int

    @classmethod
    def create(cls, rng: np.random.Generator, height: int, width: int, n_z: int = N_Z):
        chans = (1,) + ENC_CHANNELS
        spatial = _spatial_chain(height, width, ENC_STRIDES)
        if min(spatial[-1]) < 1:
            raise ValueError(f"image {height}x{width} too small for the encoder")
        conv_w, conv_b = [], []
        for i in range(len(ENC_CHANNELS)):
            fan = chans[i] * 9
            conv_w.append(
                Tensor(init_uniform(rng, (chans[i + 1], chans[i], 3, 3), fan), True)
            )
            conv_b.append(Tensor(init_uniform(rng, (chans[i + 1],), fan), True))
        flat = ENC_CHANNELS[-1] * spatial[-1][0] * spatial[-1][1]
        fc_mu_w = Tensor(init_uniform(rng, (flat, n_z), flat), True)
        fc_mu_b = Tensor(init_uniform(rng, (n_z,), flat), True)
        fc_lv_w = Tensor(init_uniform(rng, (flat, n_z), flat), True)
        fc_lv_b = Tensor(init_uniform(rng, (n_z,), flat), True)
        dec_fc_w = Tensor(init_uniform(rng, (n_z, flat), n_z), True)
        dec_fc_b = Tensor(init_uniform(rng, (flat,), n_z), True)
        dchans = tuple(reversed(ENC_CHANNELS)) + (1,)
        deconv_w, deconv_b = [], []
        for i in range(len(ENC_CHANNELS)):
            fan = dchans[i] * 9
            deconv_w.append(
                Tensor(init_uniform(rng, (dchans[i], dchans[i + 1], 3, 3), fan), True)
            )
            deconv_b.append(Tensor(init_uniform(rng, (dchans[i + 1],), fan), True))
        return cls(
            conv_w, conv_b, fc_mu_w, fc_mu_b, fc_lv_w, fc_lv_b,
            dec_fc_w, dec_fc_b, deconv_w, deconv_b, spatial, n_z,
        )

    def tensors(self) -> list:
        out = list(self.conv_w) + list(self.conv_b)
        out += [self.fc_mu_w, self.fc_mu_b, self.fc_lv_w, self.fc_lv_b]
        out += [self.dec_fc_w, self.dec_fc_b]
        out += list(self.deconv_w) + list(self.deconv_b)
        return out

    def named_arrays(self) -> dict:
        named = {}
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            named[f"enc.conv{i}.w"] = w.data
            named[f"enc.conv{i}.b"] = b.data
        named["enc.mu.w"] = self.fc_mu_w.data
        named["enc.mu.b"] = self.fc_mu_b.data
        named["enc.lv.w"] = self.fc_lv_w.data
        named["enc.lv.b"] = self.fc_lv_b.data
        named["dec.fc.w"] = self.dec_fc_w.data
        named["dec.fc.b"] = self.dec_fc_b.data
        for i, (w, b) in enumerate(zip(self.deconv_w, self.deconv_b)):
            named[f"dec.deconv{i}.w"] = w.data
            named[f"dec.deconv{i}.b"] = b.data
        named["meta.spatial"] = np.array(self.spatial, dtype=np.float64)
        named["meta.n_z"] = np.float64(self.n_z)
        return named

    @classmethod
    def from_named_arrays(cls, named: dict) -> "VaeParams":
        spatial = [tuple(int(v) for v in row) for row in named["meta.spatial"]]
        n_layers = len(spatial) - 1
        t = lambda k: Tensor(named[k], requires_grad=True)
        return cls(
            conv_w=[t(f"enc.conv{i}.w") for i in range(n_layers)],
            conv_b=[t(f"enc.conv{i}.b") for i in range(n_layers)],
            fc_mu_w=t("enc.mu.w"),
            fc_mu_b=t("enc.mu.b"),
            fc_lv_w=t("enc.lv.w"),
            fc_lv_b=t("enc.lv.b"),
            dec_fc_w=t("dec.fc.w"),
            dec_fc_b=t("dec.fc.b"),
            deconv_w=[t(f"dec.deconv{i}.w") for i in range(n_layers)],
            deconv_b=[t(f"dec.deconv{i}.b") for i in range(n_layers)],
            spatial=spatial,
            n_z=int(named["meta.n_z"]),
        )

    def frozen(self) -> "VaeParams":
        """Grad-free view sharing the same storage; for freeze discipline."""
        out = copy.copy(self)
        out.conv_w = [Tensor(t.data) for t in self.conv_w]
        out.conv_b = [Tensor(t.data) for t in self.conv_b]
        out.fc_mu_w = Tensor(self.fc_mu_w.data)
        out.fc_mu_b = Tensor(self.fc_mu_b.data)
        out.fc_lv_w = Tensor(self.fc_lv_w.data)
        out.fc_lv_b = Tensor(self.fc_lv_b.data)
        out.dec_fc_w = Tensor(self.dec_fc_w.data)
        out.dec_fc_b = Tensor(self.dec_fc_b.data)
        out.deconv_w = [Tensor(t.data) for t in self.deconv_w]
        out.deconv_b = [Tensor(t.data) for t in self.deconv_b]
        return out

    def clone(self) -> "VaeParams":
        named = {k: v.copy() for k, v in self.named_arrays().items()}
        return VaeParams.from_named_arrays(named)


def normalize_depth(img: DepthImage) -> Tensor:
    """Depth in meters -> [0, 1]; inverse is multiplication by max_range."""
    return Tensor(img.data / img.max_range)


def normalize_batch(images) -> np.ndarray:
    """Stack DepthImages into a normalized (N, 1, H, W) array."""
    return np.stack([img.data / img.max_range for img in images])[:, None, :, :]


def encode_graph(params: VaeParams, x: Tensor):
    """x: (N, 1, H, W) in [0, 1] -> (mu, log_var), log_var clamped."""
    h = x
    for w, b, s in zip(params.conv_w, params.conv_b, ENC_STRIDES):
        h = relu(conv2d(h, w, b, stride=s, padding=1))
    n = h.shape[0]
    flat = reshape(h, (n, int(np.prod(h.shape[1:]))))
    mu = affine(flat, params.fc_mu_w, params.fc_mu_b)
    log_var = clip(affine(flat, params.fc_lv_w, params.fc_lv_b), -20.0, 5.0)
    return mu, log_var


def decode_graph(params: VaeParams, z: Tensor) -> Tensor:
    """z: (N, n_z) -> reconstruction (N, 1, H, W) through a sigmoid."""
    n = z.shape[0]
    h = relu(affine(z, params.dec_fc_w, params.dec_fc_b))
    c_last = params.deconv_w[0].shape[0]
    hh, ww = params.spatial[-1]
    h = reshape(h, (n, c_last, hh, ww))
    n_layers = len(params.deconv_w)
    for i, (w, b) in enumerate(zip(params.deconv_w, params.deconv_b)):
        target = params.spatial[n_layers - 1 - i]
        stride = ENC_STRIDES[n_layers - 1 - i]
        h = transposed_conv2d(h, w, b, stride=stride, padding=1, output_shape=target)
        h = sigmoid(h) if i == n_layers - 1 else relu(h)
    return h


@dataclass(frozen=True)
class TrainConfig:
    lambda_kl: float = 1e-3
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.lambda_kl < 0:
            raise ValueError("lambda_kl must be non-negative")


def vae_loss(
    raw: Tensor, ca_target: Tensor, params: VaeParams, cfg: TrainConfig,
    rng: np.random.Generator,
) -> Tensor:
    """Reconstruction-vs-collision-aware MSE plus weighted KL.

    The input is the raw frame, the supervision target the collision-aware
    one; that asymmetry is what pushes clearance cues into the latent.
    """
    if raw.shape != ca_target.shape:
        raise ValueError(f"raw/target shapes differ: {raw.shape} vs {ca_target.shape}")
    mu, log_var = encode_graph(params, raw)
    z = reparameterize(mu, log_var, rng)
    recon = decode_graph(params, z)
    l_coll = mse(ca_target, recon)
    l_kl = gaussian_kl(mu, log_var)
    return l_coll + cfg.lambda_kl * l_kl


@dataclass
class TrainHistory:
    """Per-epoch loss rows; written out as CSV by the CLI."""

    epochs: list = field(default_factory=list)

    def add(self, **row):
        self.epochs.append(row)

    def column(self, key):
        return [row[key] for row in self.epochs]


def train_vae(dataset, cfg: TrainConfig, already_normalized: bool = False):
    """Minibatch Adam over (raw, target) pairs; returns the best checkpoint.

    dataset: list of (raw DepthImage, target DepthImage) pairs, or a pair of
    pre-normalized arrays (raw (N,1,H,W), target (N,1,H,W)) with
    already_normalized=True.  Deterministic for a fixed cfg.seed.
    """
    if already_normalized:
        raw_arr, tgt_arr = dataset
    else:
        if len(dataset) == 0:
            raise EmptyDatasetError("train_vae needs at least one (raw, ca) pair")
        raw_arr = normalize_batch([p[0] for p in dataset])
        tgt_arr = normalize_batch([p[1] for p in dataset])
    n = raw_arr.shape[0]
    if n == 0:
        raise EmptyDatasetError("train_vae needs at least one (raw, ca) pair")
    h, w = raw_arr.shape[2], raw_arr.shape[3]

    init_rng = derived_rng(cfg.seed, 11)
    shuffle_rng = derived_rng(cfg.seed, 12)
    noise_rng = derived_rng(cfg.seed, 13)
    params = VaeParams.create(init_rng, h, w)
    tensors = params.tensors()
    adam = AdamState.create(tensors, lr=cfg.learning_rate)
    history = TrainHistory()
    best = (math.inf, None)

    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        tot = coll = kl = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            raw_b = Tensor(raw_arr[idx])
            tgt_b = Tensor(tgt_arr[idx])
            mu, log_var = encode_graph(params, raw_b)
            z = reparameterize(mu, log_var, noise_rng)
            recon = decode_graph(params, z)
            l_coll = mse(tgt_b, recon)
            l_kl = gaussian_kl(mu, log_var)
            loss = l_coll + cfg.lambda_kl * l_kl
            for t in tensors:
                t.zero_grad()
            loss.backward()
            adam_step(tensors, [t.grad for t in tensors], adam)
            tot += loss.item()
            coll += l_coll.item()
            kl += l_kl.item()
            batches += 1
        row = {
            "epoch": epoch,
            "loss": tot / batches,
            "l_coll": coll / batches,
            "l_kl": kl / batches,
        }
        history.add(**row)
        if row["loss"] < best[0]:
            best = (row["loss"], params.clone())
    return best[1], history


def encode_batch(params: VaeParams, norm: np.ndarray) -> np.ndarray:
    """Posterior means for a normalized (N, 1, H, W) batch; no sampling."""
    with no_grad():
        mu, _ = encode_graph(params, Tensor(norm))
    return mu.data


def encode(raw: DepthImage, params: VaeParams) -> np.ndarray:
    """Inference-time latent for one frame: the posterior mean."""
    return encode_batch(params, normalize_depth(raw).data[None, None, :, :])[0]


def decode_batch(params: VaeParams, z: np.ndarray) -> np.ndarray:
    with no_grad():
        out = decode_graph(params, Tensor(z))
    return out.data


@dataclass
class MemoryParams:
    """Single LSTM cell plus the dual-frame latent prediction head."""

    lstm: LstmParams
    head_w: Tensor
    head_b: Tensor
    interval: int = 10

    @classmethod
    def create(cls, rng: np.random.Generator, n_z: int = N_Z,
               hidden: int = LSTM_HIDDEN, interval: int = 10):
        if interval < 1:
            raise ValueError("temporal interval must be >= 1")
        lstm = LstmParams.create(n_z, hidden, rng)
        head_w = Tensor(init_uniform(rng, (hidden, 2 * n_z), hidden), True)
        head_b = Tensor(init_uniform(rng, (2 * n_z,), hidden), True)
        return cls(lstm, head_w, head_b, interval)

    @property
    def n_z(self) -> int:
        return self.head_w.shape[1] // 2

    @property
    def hidden(self) -> int:
        return self.lstm.hidden_dim

    def tensors(self) -> list:
        return self.lstm.tensors() + [self.head_w, self.head_b]

    def named_arrays(self) -> dict:
        return {
            "lstm.w_ih": self.lstm.w_ih.data,
            "lstm.w_hh": self.lstm.w_hh.data,
            "lstm.bias": self.lstm.bias.data,
            "head.w": self.head_w.data,
            "head.b": self.head_b.data,
            "meta.interval": np.float64(self.interval),
        }

    @classmethod
    def from_named_arrays(cls, named: dict) -> "MemoryParams":
        lstm = LstmParams(
            w_ih=Tensor(named["lstm.w_ih"], True),
            w_hh=Tensor(named["lstm.w_hh"], True),
            bias=Tensor(named["lstm.bias"], True),
        )
        return cls(
            lstm,
            Tensor(named["head.w"], True),
            Tensor(named["head.b"], True),
            int(named["meta.interval"]),
        )

    def clone(self) -> "MemoryParams":
        return MemoryParams.from_named_arrays(
            {k: v.copy() for k, v in self.named_arrays().items()}
        )


def memory_step(z: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray,
                params: MemoryParams):
    """One inference-time LSTM update; episode start uses zero h and c."""
    with no_grad():
        h, c = lstm_cell(
            Tensor(z.reshape(1, -1)),
            Tensor(h_prev.reshape(1, -1)),
            Tensor(c_prev.reshape(1, -1)),
            params.lstm,
        )
    return h.data[0], c.data[0]


def _window_loss(z_windows: np.ndarray, ca_windows: np.ndarray,
                 vae: VaeParams, mem: MemoryParams, interval: int):
    """Eq.-style dual reconstruction over a batch of latent windows.

    z_windows: (B, L, n_z) pre-encoded constants; ca_windows: (B, L, 1, H, W)
    normalized targets.  For every valid t the head predicts the latents of
    frames t and t-T, both decoded by the frozen decoder and scored with MSE.
    """
    b, length, n_z = z_windows.shape
    if length <= interval:
        raise SequenceTooShortError(
            f"need sequence length > {interval}, got {length}"
        )
    h = Tensor(np.zeros((b, mem.hidden)))
    c = Tensor(np.zeros((b, mem.hidden)))
    preds = []
    targets = []
    for t in range(length):
        h, c = lstm_cell(Tensor(z_windows[:, t]), h, c, mem.lstm)
        if t >= interval:
            out = affine(h, mem.head_w, mem.head_b)
            preds.append(out[:, :n_z])   # past latent, frame t - T
            preds.append(out[:, n_z:])   # current latent, frame t
            targets.append(ca_windows[:, t - interval])
            targets.append(ca_windows[:, t])
    # One decode pass over every predicted latent, then a single MSE.  The
    # per-t pair sum with a mean over valid t equals 2x the overall mean.
    recon = decode_graph(vae, concat(preds, axis=0))
    return mse(Tensor(np.concatenate(targets, axis=0)), recon) * 2.0


def lstm_loss(raw_frames, ca_frames, vae: VaeParams, mem: MemoryParams,
              interval: int | None = None) -> Tensor:
    """Dual-frame reconstruction loss for one episode sequence.

    raw_frames/ca_frames: lists of DepthImage or normalized (L, 1, H, W)
    arrays.  The VAE is used frozen: no gradient reaches its parameters.
    """
    T = mem.interval if interval is None else interval
    raw_arr = raw_frames if isinstance(raw_frames, np.ndarray) else normalize_batch(raw_frames)
    ca_arr = ca_frames if isinstance(ca_frames, np.ndarray) else normalize_batch(ca_frames)
    if raw_arr.shape[0] <= T:
        raise SequenceTooShortError(
            f"need sequence length > {T}, got {raw_arr.shape[0]}"
        )
    frozen = vae.frozen()
    z = encode_batch(frozen, raw_arr)
    return _window_loss(z[None], ca_arr[None], frozen, mem, T)


def train_lstm(episodes, vae: VaeParams, cfg: TrainConfig, interval: int = 10,
               window: int | None = None, batch_windows: int = 4):
    """Truncated-backprop training of the memory module over episode windows.

    episodes: list of (raw_frames, ca_frames) sequences.  The window length
    defaults to 2*T + 5 so both reconstruction targets fall inside every
    window.  The VAE stays frozen throughout.
    """
    if len(episodes) == 0:
        raise EmptyDatasetError("train_lstm needs at least one episode")
    T = interval
    win = (2 * T + 5) if window is None else window
    frozen = vae.frozen()

    z_eps, ca_eps = [], []
    for raw_frames, ca_frames in episodes:
        raw_arr = raw_frames if isinstance(raw_frames, np.ndarray) else normalize_batch(raw_frames)
        ca_arr = ca_frames if isinstance(ca_frames, np.ndarray) else normalize_batch(ca_frames)
        z_eps.append(encode_batch(frozen, raw_arr))
        ca_eps.append(ca_arr)

    starts = [
        (i, s)
        for i, z in enumerate(z_eps)
        if len(z) >= win
        for s in range(0, len(z) - win + 1, max(1, T // 2))
    ]
    if not starts:
        raise SequenceTooShortError(
            f"no episode provides a full window of {win} frames"
        )

    init_rng = derived_rng(cfg.seed, 21)
    shuffle_rng = derived_rng(cfg.seed, 22)
    mem = MemoryParams.create(init_rng, n_z=vae.n_z, interval=T)
    tensors = mem.tensors()
    adam = AdamState.create(tensors, lr=cfg.learning_rate)
    history = TrainHistory()
    best = (math.inf, None)

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(starts))
        tot, batches = 0.0, 0
        for b0 in range(0, len(order), batch_windows):
            chunk = [starts[i] for i in order[b0 : b0 + batch_windows]]
            zw = np.stack([z_eps[i][s : s + win] for i, s in chunk])
            cw = np.stack([ca_eps[i][s : s + win] for i, s in chunk])
            loss = _window_loss(zw, cw, frozen, mem, T)
            for t in tensors:
                t.zero_grad()
            loss.backward()
            adam_step(tensors, [t.grad for t in tensors], adam)
            tot += loss.item()
            batches += 1
        row = {"epoch": epoch, "loss": tot / batches}
        history.add(**row)
        if row["loss"] < best[0]:
            best = (row["loss"], mem.clone())
    return best[1], history
