"""Minimal reverse-mode autodiff over float64 numpy arrays.

Covers exactly the operator set the representation and policy networks need:
dense/conv linear algebra, pointwise nonlinearities, reductions, slicing, the
Gaussian KL and reparameterization primitives, an LSTM cell, and Adam.  Graphs
are built eagerly by the ops and walked once, in reverse topological order, by
Tensor.backward; gradients accumulate by summation so fan-out is handled
naturally.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        """Reverse-mode sweep from this node; accumulates into .grad slots."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that requires no grad")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        if grad is None:
            grad = np.ones_like(self.data)
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the free functions below do the work.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return tslice(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(a, b, value_fn, grad_a, grad_b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = value_fn(a.data, b.data)
    except ValueError:
        raise ShapeError(f"incompatible shapes {a.shape} vs {b.shape}") from None
    req = a.requires_grad or b.requires_grad

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad_a(g, a.data, b.data), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad_b(g, a.data, b.data), b.shape))

    return Tensor(data, req, (a, b), bw)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def minimum(a, b) -> Tensor:
    """Elementwise min; the gradient follows the selected branch."""
    return _binary(
        a, b, np.minimum,
        lambda g, x, y: g * (x <= y),
        lambda g, x, y: g * (x > y),
    )


def maximum(a, b) -> Tensor:
    return _binary(
        a, b, np.maximum,
        lambda g, x, y: g * (x >= y),
        lambda g, x, y: g * (x < y),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (n,k)@(k,m), got {a.shape} @ {b.shape}")
    data = a.data @ b.data
    req = a.requires_grad or b.requires_grad

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor(data, req, (a, b), bw)


def affine(x, w, b) -> Tensor:
    """x @ w + b with bias broadcast over rows."""
    return add(matmul(x, w), b)


def _unary(a, value, grad):
    a = as_tensor(a)

    def bw(g):
        a._accumulate(grad(g, a.data, out))

    out = value(a.data)
    t = Tensor(out, a.requires_grad, (a,), bw)
    return t


def relu(a) -> Tensor:
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda g, x, o: g * (x > 0))


def sigmoid(a) -> Tensor:
    def val(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary(a, val, lambda g, x, o: g * o * (1.0 - o))


def tanh(a) -> Tensor:
    return _unary(a, np.tanh, lambda g, x, o: g * (1.0 - o * o))


def exp(a) -> Tensor:
    return _unary(a, np.exp, lambda g, x, o: g * o)


def log(a) -> Tensor:
    return _unary(a, np.log, lambda g, x, o: g / x)


def square(a) -> Tensor:
    return _unary(a, np.square, lambda g, x, o: g * 2.0 * x)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the interior."""
    return _unary(
        a,
        lambda x: np.clip(x, lo, hi),
        lambda g, x, o: g * ((x > lo) & (x < hi)),
    )


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}") from None

    def bw(g):
        a._accumulate(g.reshape(a.shape))

    return Tensor(data, a.requires_grad, (a,), bw)


def tslice(a, idx) -> Tensor:
    """Basic slicing with scatter-add backward."""
    a = as_tensor(a)
    data = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return Tensor(data, a.requires_grad, (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along an axis; backward slices the gradient back."""
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    req = any(t.requires_grad for t in tensors)
    sizes = [t.shape[axis] for t in tensors]

    def bw(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + size)
                t._accumulate(g[tuple(sl)])
            offset += size

    return Tensor(data, req, tuple(tensors), bw)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full(a.shape, g))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gg, a.shape))

    return Tensor(data, a.requires_grad, (a,), bw)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def mse(a, b) -> Tensor:
    """Mean squared error over all elements."""
    return reduce_mean(square(sub(a, b)))


def _pad2d(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NCHW layout, weights (out_c, in_c, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d expects NCHW x and (O,C,kh,kw) w, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    s, p = stride, padding
    oh = (h + 2 * p - kh) // s + 1
    ow = (wd + 2 * p - kw) // s + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d output would be empty for input {x.shape} kernel {w.shape}")
    xp = _pad2d(x.data, p)
    cols = np.empty((n, c, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + s * oh : s, j : j + s * ow : s]
    cols2 = cols.reshape(n, c * kh * kw, oh * ow)
    w2 = w.data.reshape(oc, c * kh * kw)
    out = np.matmul(w2, cols2).reshape(n, oc, oh, ow)

    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, oc, 1, 1)
        parents.append(b)
    req = any(t.requires_grad for t in parents)

    def bw(g):
        g2 = g.reshape(n, oc, oh * ow)
        if w.requires_grad:
            dw = np.einsum("nol,nkl->ok", g2, cols2)
            w._accumulate(dw.reshape(w.shape))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, oh, ow)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + s * oh : s, j : j + s * ow : s] += dcols[:, :, i, j]
            x._accumulate(dxp[:, :, p : p + h, p : p + wd] if p else dxp)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))

    return Tensor(out, req, tuple(parents), bw)


def transposed_conv2d(
    x, w, b=None, stride: int = 1, padding: int = 0, output_shape=None
) -> Tensor:
    """Transposed 2-D convolution, weights (in_c, out_c, kh, kw).

    output_shape fixes (oh, ow) explicitly; it must satisfy
    oh = (h - 1) * stride - 2 * padding + kh + extra with 0 <= extra < stride,
    which lets odd sizes round-trip through a strided encoder.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"transposed_conv2d expects NCHW x and (C,O,kh,kw) w, got {x.shape} and {w.shape}"
        )
    n, c, h, wd = x.shape
    _, oc, kh, kw = w.shape
    s, p = stride, padding
    base_h = (h - 1) * s + kh - 2 * p
    base_w = (wd - 1) * s + kw - 2 * p
    if output_shape is None:
        output_shape = (base_h, base_w)
    oh, ow = output_shape
    if not (0 <= oh - base_h < s and 0 <= ow - base_w < s):
        raise ShapeError(
            f"output_shape {output_shape} unreachable from input {x.shape} "
            f"with stride {s}, padding {p}, kernel {kh}x{kw}"
        )
    w2 = w.data.reshape(c, oc * kh * kw)
    x2 = x.data.reshape(n, c, h * wd)
    cols = np.matmul(w2.T, x2).reshape(n, oc, kh, kw, h, wd)
    out_p = np.zeros((n, oc, oh + 2 * p, ow + 2 * p))
    for i in range(kh):
        for j in range(kw):
            out_p[:, :, i : i + s * h : s, j : j + s * wd : s] += cols[:, :, i, j]
    out = out_p[:, :, p : p + oh, p : p + ow] if p else out_p

    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, oc, 1, 1)
        parents.append(b)
    req = any(t.requires_grad for t in parents)

    def bw(g):
        gp = np.zeros((n, oc, oh + 2 * p, ow + 2 * p))
        gp[:, :, p : p + oh, p : p + ow] = g
        dcols = np.empty((n, oc, kh, kw, h, wd))
        for i in range(kh):
            for j in range(kw):
                dcols[:, :, i, j] = gp[:, :, i : i + s * h : s, j : j + s * wd : s]
        dcols2 = dcols.reshape(n, oc * kh * kw, h * wd)
        if x.requires_grad:
            x._accumulate(np.matmul(w2, dcols2).reshape(x.shape))
        if w.requires_grad:
            dw = np.einsum("ncl,nkl->ck", x2, dcols2)
            w._accumulate(dw.reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))

    return Tensor(out, req, tuple(parents), bw)


def gaussian_kl(mu: Tensor, log_var: Tensor) -> Tensor:
    """KL(N(mu, diag(exp(log_var))) || N(0, I)).

    Closed form, summed over latent dimensions and averaged over the batch.
    """
    mu, log_var = as_tensor(mu), as_tensor(log_var)
    if mu.shape != log_var.shape:
        raise ShapeError(f"mu/log_var shapes differ: {mu.shape} vs {log_var.shape}")
    inner = add(add(1.0, log_var), mul(-1.0, add(square(mu), exp(log_var))))
    per_sample = mul(reduce_sum(inner, axis=1), -0.5)
    return reduce_mean(per_sample)


LOG_VAR_MIN, LOG_VAR_MAX = -20.0, 5.0


def reparameterize(mu: Tensor, log_var: Tensor, rng: np.random.Generator) -> Tensor:
    """z = mu + sigma * eps with eps drawn from the given stream.

    Gradients flow to mu and log_var only; log_var is clamped to
    [LOG_VAR_MIN, LOG_VAR_MAX] before exponentiation.
    """
    mu, log_var = as_tensor(mu), as_tensor(log_var)
    if mu.shape != log_var.shape:
        raise ShapeError(f"mu/log_var shapes differ: {mu.shape} vs {log_var.shape}")
    std = exp(mul(clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX), 0.5))
    eps = rng.standard_normal(mu.shape)
    return add(mu, mul(std, eps))


@dataclass
class LstmParams:
    """Single-cell LSTM weights; gate order i, f, g, o along the last axis."""

    w_ih: Tensor  # (input_dim, 4*hidden)
    w_hh: Tensor  # (hidden, 4*hidden)
    bias: Tensor  # (4*hidden,)

    @classmethod
    def create(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        k = 1.0 / np.sqrt(hidden_dim)
        return cls(
            w_ih=Tensor(rng.uniform(-k, k, (input_dim, 4 * hidden_dim)), requires_grad=True),
            w_hh=Tensor(rng.uniform(-k, k, (hidden_dim, 4 * hidden_dim)), requires_grad=True),
            bias=Tensor(np.zeros(4 * hidden_dim), requires_grad=True),
        )

    @property
    def hidden_dim(self) -> int:
        return self.w_hh.shape[0]

    def tensors(self):
        return [self.w_ih, self.w_hh, self.bias]


def lstm_cell(x, h_prev, c_prev, params: LstmParams):
    """Standard gated update; returns (h, c) for a batch of rows."""
    x, h_prev, c_prev = as_tensor(x), as_tensor(h_prev), as_tensor(c_prev)
    hd = params.hidden_dim
    gates = add(add(matmul(x, params.w_ih), matmul(h_prev, params.w_hh)), params.bias)
    i = sigmoid(gates[:, 0 * hd : 1 * hd])
    f = sigmoid(gates[:, 1 * hd : 2 * hd])
    g = tanh(gates[:, 2 * hd : 3 * hd])
    o = sigmoid(gates[:, 3 * hd : 4 * hd])
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


@dataclass
class AdamState:
    """Bias-corrected Adam; moments align index-wise with the param list."""

    m: list
    v: list
    step_count: int
    lr: float
    beta1: float
    beta2: float
    epsilon: float

    @classmethod
    def create(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            step_count=0,
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(params, grads, state: AdamState):
    """One in-place update; zero grads leave parameters untouched."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    correction = np.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * correction * m / (np.sqrt(v) + state.epsilon)
    return params


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Kaiming-style uniform init, the torch default for dense/conv layers."""
    k = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-k, k, shape)


def save_checkpoint(prefix, named_params: dict) -> None:
    """Flat float64 binary plus a text manifest with per-entry checksums."""
    prefix = str(prefix)
    offset = 0
    lines = []
    with open(prefix + ".bin", "wb") as f:
        for name, arr in named_params.items():
            a = np.asarray(arr, dtype=np.float64)
            raw = np.ascontiguousarray(a).tobytes()
            digest = hashlib.sha256(raw).hexdigest()
            shape = ",".join(str(d) for d in a.shape) if a.shape else "scalar"
            lines.append(f"{name} {shape} {offset} {len(raw)} {digest}")
            f.write(raw)
            offset += len(raw)
    with open(prefix + ".manifest", "w") as f:
        f.write("\n".join(lines) + "\n")


def load_checkpoint(prefix) -> dict:
    """Inverse of save_checkpoint; verifies every checksum."""
    prefix = str(prefix)
    with open(prefix + ".bin", "rb") as f:
        blob = f.read()
    out = {}
    with open(prefix + ".manifest") as f:
        for line in f:
            if not line.strip():
                continue
            name, shape_s, off_s, len_s, digest = line.split()
            off, nbytes = int(off_s), int(len_s)
            raw = blob[off : off + nbytes]
            if hashlib.sha256(raw).hexdigest() != digest:
                raise ValueError(f"checksum mismatch for {name!r} in {prefix}.bin")
            shape = () if shape_s == "scalar" else tuple(
                int(d) for d in shape_s.split(",")
            )
            out[name] = np.frombuffer(raw, dtype=np.float64).reshape(shape).copy()
    return out


def params_checksum(named_params: dict) -> str:
    """Order-sensitive digest of all parameter bytes; freeze verification."""
    h = hashlib.sha256()
    for name, arr in named_params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()
