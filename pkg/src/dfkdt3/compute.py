"""Differentiable tensor substrate: float64 arrays, tape-based reverse-mode
autodiff, counter-based seeded randomness, Adam, and the checkpoint container.

Everything downstream (models, losses, training loops) is built on the ops in
this module. All math is float64 so that finite-difference gradient checks are
meaningful.
"""

from __future__ import annotations

import hashlib
import json
import struct
from contextlib import contextmanager

import numpy as np

CKPT_VERSION = "dfkdt3-ckpt-v1"

_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad():
    """Disable graph recording inside the block (generation/export paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array plus optional autodiff bookkeeping.

    Tensors are immutable once created except for gradient accumulation; ops
    return new tensors recorded on the tape when any input requires grad.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to the given (broadcast-source) shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; accumulates .grad on every
    reachable tensor that requires grad."""
    if loss.data.size != 1:
        raise ValueError("backward() requires a scalar loss")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor requiring grad")
    # iterative topological order over the requires_grad subgraph
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is not None:
            for parent, pg in node._backward(g):
                if parent.requires_grad:
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else prev + pg


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def back(g):
        pairs = []
        if a.requires_grad:
            pairs.append((a, _unbroadcast(g, a.data.shape)))
        if b.requires_grad:
            pairs.append((b, _unbroadcast(g, b.data.shape)))
        return pairs

    return _node(out, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def back(g):
        pairs = []
        if a.requires_grad:
            pairs.append((a, _unbroadcast(g, a.data.shape)))
        if b.requires_grad:
            pairs.append((b, _unbroadcast(-g, b.data.shape)))
        return pairs

    return _node(out, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def back(g):
        pairs = []
        if a.requires_grad:
            pairs.append((a, _unbroadcast(g * b.data, a.data.shape)))
        if b.requires_grad:
            pairs.append((b, _unbroadcast(g * a.data, b.data.shape)))
        return pairs

    return _node(out, (a, b), back)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def back(g):
        pairs = []
        if a.requires_grad:
            pairs.append((a, _unbroadcast(g / b.data, a.data.shape)))
        if b.requires_grad:
            pairs.append((b, _unbroadcast(-g * a.data / (b.data * b.data),
                                          b.data.shape)))
        return pairs

    return _node(out, (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with leading-dim broadcasting; operands must be >= 2-D."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    out = a.data @ b.data

    def back(g):
        pairs = []
        if a.requires_grad:
            if b.data.ndim == 2:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.data.shape)
            else:
                ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
            pairs.append((a, ga))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                gb = (a.data.reshape(-1, a.data.shape[-1]).T
                      @ g.reshape(-1, g.shape[-1]))
            else:
                gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
            pairs.append((b, gb))
        return pairs

    return _node(out, (a, b), back)


def power(x: Tensor, p: float) -> Tensor:
    out = x.data ** p

    def back(g):
        return ((x, g * p * x.data ** (p - 1.0)),)

    return _node(out, (x,), back)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def back(g):
        return ((x, g / x.data),)

    return _node(out, (x,), back)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def back(g):
        return ((x, g * out),)

    return _node(out, (x,), back)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def back(g):
        return ((x, g * (x.data > 0.0)),)

    return _node(out, (x,), back)


def xlogx(x: Tensor) -> Tensor:
    """x * ln(x) with the 0*ln(0) := 0 convention (zero entries get zero grad)."""
    pos = x.data > 0.0
    out = np.where(pos, x.data * np.log(np.where(pos, x.data, 1.0)), 0.0)

    def back(g):
        return ((x, g * np.where(pos, np.log(np.where(pos, x.data, 1.0)) + 1.0, 0.0)),)

    return _node(out, (x,), back)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return ((x, np.broadcast_to(g, x.data.shape).copy()),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((x, np.broadcast_to(gg, x.data.shape).copy()),)

    return _node(out, (x,), back)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    denom = x.data.size if axis is None else x.data.shape[axis]

    def back(g):
        if axis is None:
            return ((x, np.broadcast_to(g / denom, x.data.shape).copy()),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((x, np.broadcast_to(gg / denom, x.data.shape).copy()),)

    return _node(out, (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def back(g):
        return ((x, g.reshape(x.data.shape)),)

    return _node(out, (x,), back)


def transpose(x: Tensor, axes) -> Tensor:
    out = x.data.transpose(axes)
    inv = np.argsort(axes)

    def back(g):
        return ((x, g.transpose(inv)),)

    return _node(out, (x,), back)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = x.data.swapaxes(a, b)

    def back(g):
        return ((x, g.swapaxes(a, b)),)

    return _node(out, (x,), back)


def take(x: Tensor, idx) -> Tensor:
    """Basic indexing (ints/slices/tuples); gradient scatters back."""
    out = x.data[idx]

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return ((x, gx),)

    return _node(out, (x,), back)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        grads = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            grads.append((t, g[tuple(sl)]))
        return tuple(grads)

    return _node(out, tuple(tensors), back)


def stack(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        pieces = np.moveaxis(g, axis, 0)
        return tuple((t, pieces[i].reshape(t.data.shape)) for i, t in enumerate(tensors))

    return _node(out, tuple(tensors), back)


def broadcast_to(x: Tensor, shape) -> Tensor:
    out = np.broadcast_to(x.data, shape)

    def back(g):
        return ((x, _unbroadcast(g, x.data.shape)),)

    return _node(out.copy(), (x,), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtraction stabilized softmax along an axis."""
    if np.isnan(x.data).any():
        raise ValueError("softmax received NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((x, out * (g - dot)),)

    return _node(out, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(x.data).any():
        raise ValueError("log_softmax received NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def back(g):
        p = np.exp(out)
        return ((x, g - p * g.sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), back)


def cross_entropy(x: Tensor, target_ids, from_logits: bool = True, mask=None,
                  label_smoothing: float = 0.0) -> Tensor:
    """Mean negative log-likelihood of integer targets.

    x: [rows, vocab] logits (default) or probabilities; target_ids: [rows] ints;
    mask: optional boolean [rows], False rows are excluded from the mean.
    label_smoothing spreads (1 - eps)/eps mass between the target and the
    uniform distribution (logits path only).
    """
    targets = np.asarray(target_ids, dtype=np.int64)
    if x.data.ndim != 2 or targets.ndim != 1 or targets.shape[0] != x.data.shape[0]:
        raise ValueError("cross_entropy expects x [rows, vocab] and targets [rows]")
    vocab = x.data.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError("cross_entropy target id out of vocabulary range")
    rows = np.arange(targets.shape[0])
    if mask is None:
        mask = np.ones(targets.shape[0], dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy has no unmasked rows")
    if label_smoothing and not from_logits:
        raise ValueError("label_smoothing requires logits input")
    if from_logits:
        eps = label_smoothing
        shifted = x.data - x.data.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logz
        nll = -(1.0 - eps) * logp[rows, targets] - eps * logp.mean(axis=1)
        out = (nll * mask).sum() / count

        def back(g):
            p = np.exp(logp)
            gx = p.copy()
            gx[rows, targets] -= 1.0 - eps
            gx -= eps / vocab
            gx *= (mask[:, None] * (g / count))
            return ((x, gx),)

    else:
        picked = x.data[rows, targets]
        out = -(np.log(picked) * mask).sum() / count

        def back(g):
            gx = np.zeros_like(x.data)
            gx[rows, targets] = -mask * (g / count) / picked
            return ((x, gx),)

    return _node(np.asarray(out), (x,), back)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    parents = [x] + ([gain] if gain is not None else []) + ([bias] if bias is not None else [])

    def back(g):
        grads = []
        if x.requires_grad:
            gy = g * gain.data if gain is not None else g
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            grads.append((x, (gy - m1 - xhat * m2) * inv))
        if gain is not None and gain.requires_grad:
            grads.append((gain, _unbroadcast(g * xhat, gain.data.shape)))
        if bias is not None and bias.requires_grad:
            grads.append((bias, _unbroadcast(g, bias.data.shape)))
        return grads

    return _node(out, tuple(parents), back)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of an embedding table by integer ids (any id-array shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError("embedding id out of range")
    out = table.data[ids]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return ((table, gt),)

    return _node(out, (table,), back)


def soft_embedding(probs: Tensor, table: Tensor) -> Tensor:
    """Probability-weighted mixture of embedding rows: probs [.., V] @ table [V, D]."""
    return matmul(probs, table)


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine similarity of two 1-D vectors (composed from primitives)."""
    num = sum_(mul(a, b))
    na = power(add(sum_(mul(a, a)), Tensor(eps)), 0.5)
    nb = power(add(sum_(mul(b, b)), Tensor(eps)), 0.5)
    return div(num, mul(na, nb))


def argmax(x: Tensor, axis: int = -1) -> np.ndarray:
    return np.argmax(x.data, axis=axis)


# ---------------------------------------------------------------------------
# seeded randomness
# ---------------------------------------------------------------------------

def _fold_seed(seed: int, tag) -> int:
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class RngStream:
    """Counter-based random stream: each draw uses Philox keyed by
    (seed, counter), so identical (seed, counter) states reproduce identical
    draws regardless of draw order or process scheduling."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def _gen(self) -> np.random.Generator:
        g = np.random.Generator(np.random.Philox(key=[self.seed, self.counter]))
        self.counter += 1
        return g

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        return self._gen().uniform(low, high, size=shape)

    def normal(self, shape=None, mean: float = 0.0, std: float = 1.0):
        return self._gen().normal(mean, std, size=shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen().integers(low, high, size=shape)

    def permutation(self, n: int):
        return self._gen().permutation(n)

    def choice(self, n: int, size: int, replace: bool = True):
        return self._gen().choice(n, size=size, replace=replace)

    def fork(self, tag) -> "RngStream":
        """Independent child stream derived from a string/int tag."""
        return RngStream(_fold_seed(self.seed, tag))

    def clone(self) -> "RngStream":
        return RngStream(self.seed, self.counter)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

class WarmupDecaySchedule:
    """Constant high rate for the warmup phase, then linear decay to the low
    rate at decay_end, constant afterwards."""

    def __init__(self, lr_hi: float, lr_lo: float, warmup_steps: int, decay_end: int):
        if warmup_steps >= decay_end:
            raise ValueError("warmup_steps must be < decay_end")
        self.lr_hi = lr_hi
        self.lr_lo = lr_lo
        self.warmup_steps = warmup_steps
        self.decay_end = decay_end

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.lr_hi
        if step >= self.decay_end:
            return self.lr_lo
        frac = (step - self.warmup_steps) / (self.decay_end - self.warmup_steps)
        return self.lr_hi + frac * (self.lr_lo - self.lr_hi)


class Adam:
    """Adam with bias correction; lr may be a float or a schedule of step."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        return self.lr(self.t) if callable(self.lr) else self.lr

    def step(self) -> None:
        lr = self.current_lr()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(optimizer: Adam) -> None:
    """One optimizer update followed by gradient reset."""
    optimizer.step()
    optimizer.zero_grad()


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

class CheckpointVersionError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    """Write named float64 arrays to a self-describing container.

    Layout: text header (version line, optional meta json, one line per array
    with name and shape, then "end"), followed by raw little-endian blobs in
    header order.
    """
    names = list(arrays.keys())
    header = [CKPT_VERSION]
    if meta:
        header.append("meta " + json.dumps(meta, sort_keys=True))
    blobs = []
    for name in names:
        arr = np.asarray(arrays[name], dtype=np.float64)
        if any(c.isspace() for c in name):
            raise ValueError(f"array name may not contain whitespace: {name!r}")
        header.append("array " + name + " " + ",".join(str(d) for d in arr.shape))
        blobs.append(arr.astype("<f8").tobytes())
    header.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("utf-8"))
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read a container written by save_checkpoint; returns (arrays, meta)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.index(b"\n")
    version = raw[:nl].decode("utf-8")
    if version != CKPT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {version!r} does not match {CKPT_VERSION!r}"
        )
    pos = nl + 1
    meta = {}
    specs = []
    while True:
        nl = raw.index(b"\n", pos)
        line = raw[pos:nl].decode("utf-8")
        pos = nl + 1
        if line == "end":
            break
        if line.startswith("meta "):
            meta = json.loads(line[5:])
        elif line.startswith("array "):
            _, name, shape_s = line.split(" ", 2)
            shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
            specs.append((name, shape))
        else:
            raise ValueError(f"malformed checkpoint header line: {line!r}")
    arrays = {}
    for name, shape in specs:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * struct.calcsize("<d")
        arr = np.frombuffer(raw[pos:pos + nbytes], dtype="<f8").reshape(shape)
        arrays[name] = arr.astype(np.float64)
        pos += nbytes
    return arrays, meta
