"""A small reverse-mode autodiff engine over float64 numpy arrays.

Operations are recorded on the active :class:`Tape` (if any) in execution
order; :func:`backward` replays the tape in exact reverse order and
accumulates gradients with ``+=``.  Outside a tape, operations simply compute
values, which makes frozen forward passes cheap and free of shared state.

    with Tape() as tape:
        loss = model(x)
    backward(loss, params)
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return slice_(self, idx)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Append-only record of operations, replayed backwards by :func:`backward`."""

    def __init__(self):
        self.records: list[Tensor] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()

    def __len__(self):
        return len(self.records)

    def backward(self, root: Tensor, params: Iterable[Tensor] = ()):
        backward(root, params, tape=self)


def active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _record(out_data: np.ndarray, parents: Sequence[Tensor], grad_fn) -> Tensor:
    """Wrap ``out_data``; attach ``grad_fn(g) -> per-parent grads`` if recording."""
    out = Tensor(out_data)
    tape = active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    out._parents = tuple(parents)

    def _bw(g):
        grads = grad_fn(g)
        for p, pg in zip(parents, grads):
            if p.requires_grad and pg is not None:
                p._accum(pg)

    out._backward = _bw
    tape.records.append(out)
    return out


def backward(root: Tensor, params: Iterable[Tensor] = (), tape: Tape | None = None):
    """Fill ``.grad`` with d(root)/d(x) for every tensor recorded on ``tape``.

    Gradients of ``params`` are reset first, so parameters that do not reach
    ``root`` end up holding zeros.
    """
    tape = tape or active_tape()
    if tape is None:
        raise ValueError("backward() needs a tape")
    if root.data.size != 1:
        raise ValueError(f"backward() needs a scalar root, got shape {root.shape}")
    for p in params:
        p.zero_grad()
    for node in tape.records:
        node.grad = None
        for p in node._parents:
            if p.requires_grad and p._backward is None:
                p.grad = np.zeros_like(p.data)
    if root._backward is None:
        # leaf root: a parameter differentiates to 1, a constant to nothing
        if root.requires_grad:
            root.grad = np.ones_like(root.data)
        return
    if not any(node is root for node in tape.records):
        raise ValueError("backward() root was not recorded on this tape")
    root.grad = np.ones_like(root.data)
    for node in reversed(tape.records):
        if node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = stable_sigmoid(x.data)
    return _record(s, (x,), lambda g: (g * s * (1.0 - s),))


def log(x: Tensor) -> Tensor:
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _record(e, (x,), lambda g: (g * e,))


def power(x: Tensor, p: float) -> Tensor:
    return _record(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1),))


def sum_(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def grad(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(x.data.sum(axis=axis)), (x,), grad)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _record(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def slice_(x: Tensor, idx) -> Tensor:
    def grad(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _record(np.array(x.data[idx]), (x,), grad)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _record(
        np.concatenate([x.data for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.  x: [N,C,H,W], w: [F,C,kh,kw], b: [F]."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    N, C, H, W = x.shape
    F, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ValueError(f"kernel {kh}x{kw} does not fit input {H}x{W} with padding {padding}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    # [N, Ho, Wo, C, kh, kw] -> [N*Ho*Wo, C*kh*kw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(F, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.reshape(N, Ho, Wo, F).transpose(0, 3, 1, 2))

    def grad(g):
        gm = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, F)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = gm.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(N, Ho, Wo, C, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _record(out, parents, grad)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling (kernel = stride = ``size``); ragged edges are dropped."""
    N, C, H, W = x.shape
    Ho, Wo = H // size, W // size
    if Ho == 0 or Wo == 0:
        raise ValueError(f"max_pool2d window {size} larger than input {H}x{W}")
    blocks = x.data[:, :, : Ho * size, : Wo * size].reshape(N, C, Ho, size, Wo, size)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho, Wo, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def grad(g):
        gb = np.zeros((N, C, Ho, Wo, size * size))
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(N, C, Ho, Wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho * size, Wo * size)
        gx = np.zeros_like(x.data)
        gx[:, :, : Ho * size, : Wo * size] = gb
        return (gx,)

    return _record(out, (x,), grad)


# ---------------------------------------------------------------------------
# fused detection losses (closed-form gradients, numerically stable)
# ---------------------------------------------------------------------------


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def focal_terms(logits: np.ndarray, targets: np.ndarray, gamma: float, alpha: float | None):
    """Elementwise sigmoid focal loss and its derivative w.r.t. the logits.

    Written in terms of the signed margin ``u = x`` (negatives) or ``u = -x``
    (positives): ``loss = a_t * sigmoid(u)**gamma * softplus(u)``.
    """
    sign = np.where(targets > 0.5, -1.0, 1.0)
    u = sign * logits
    s = stable_sigmoid(u)
    sp = _softplus(u)
    mod = s ** gamma if gamma != 0 else np.ones_like(s)
    if alpha is None:
        a_t = np.ones_like(u)
    else:
        a_t = np.where(targets > 0.5, alpha, 1.0 - alpha)
    loss = a_t * mod * sp
    dloss_du = a_t * mod * (gamma * (1.0 - s) * sp + s)
    return loss, sign * dloss_du


def sigmoid_focal_loss(logits: Tensor, targets: np.ndarray, weights: np.ndarray, gamma: float, alpha: float | None) -> Tensor:
    """Scalar ``sum_ij weights_i * FL(logits_ij, targets_ij)``."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ValueError(f"focal loss: logits {logits.shape} vs targets {targets.shape}")
    w = np.asarray(weights, dtype=np.float64).reshape(-1, *([1] * (logits.data.ndim - 1)))
    loss, dl = focal_terms(logits.data, targets, gamma, alpha)
    total = np.sum(w * loss)
    return _record(np.asarray(total), (logits,), lambda g: (g * w * dl,))


def smooth_l1_loss(pred: Tensor, targets: np.ndarray, mask: np.ndarray, beta: float) -> Tensor:
    """Scalar smooth-L1 summed over coordinates of the rows where ``mask`` is set."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != pred.shape:
        raise ValueError(f"smooth L1: pred {pred.shape} vs targets {targets.shape}")
    m = np.asarray(mask, dtype=np.float64).reshape(-1, *([1] * (pred.data.ndim - 1)))
    d = pred.data - targets
    ad = np.abs(d)
    small = ad < beta
    loss = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    dd = np.where(small, d / beta, np.sign(d))
    total = np.sum(m * loss)
    return _record(np.asarray(total), (pred,), lambda g: (g * m * dd,))


# ---------------------------------------------------------------------------
# optimizer and randomness
# ---------------------------------------------------------------------------


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient:
    ``v <- momentum * v + (g + wd * p)``; ``p <- p - lr * v``."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None):
        sgd_step(self.params, [p.grad for p in self.params], self.lr if lr is None else lr,
                 self.momentum, self.weight_decay, self.velocity)


def sgd_step(params, grads, lr: float, momentum: float = 0.0, weight_decay: float = 0.0, velocity=None):
    """In-place momentum SGD update; ``velocity`` buffers are updated in place."""
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.data.shape != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {p.data.shape}")
        d = g + weight_decay * p.data if weight_decay else np.array(g, dtype=np.float64)
        if velocity is not None and momentum:
            velocity[i] *= momentum
            velocity[i] += d
            d = velocity[i]
        p.data -= lr * d


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical seeds give identical draws on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"CDCK"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]):
    """Write named float64 arrays: magic, u32 version, u32 count, then per
    record u32 name length, utf-8 name, u32 ndim, u64 dims, little-endian f8 values."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
