"""Dense float64 tensors with reverse-mode automatic differentiation.

Every numeric operation in the project goes through this module. Tensors wrap
numpy arrays; ops that see an argument requiring gradients append themselves to
an implicit tape (parent links + backward closures), and ``backward`` walks the
tape in reverse topological order, accumulating into ``.grad`` buffers.
Operations that would produce NaN/Inf raise ``NumericError`` instead.
"""

from __future__ import annotations

import contextlib
import struct

import numpy as np

from .errors import FormatError, NumericError, ShapeError, ContractError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"op '{op}' produced non-finite values")


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-d float64 array with an optional gradient record."""

    __slots__ = ("data", "requires_grad", "retain_grad", "grad",
                 "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.retain_grad = self.requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _lift(x):
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _tracked(self):
        return self.requires_grad or self._backward is not None or self._parents

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, Tensor._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, Tensor._lift(other))

    def __rsub__(self, other):
        return sub(Tensor._lift(other), self)

    def __mul__(self, other):
        return mul(self, Tensor._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, Tensor._lift(other))

    def __rtruediv__(self, other):
        return div(Tensor._lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, Tensor._lift(other))

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _make(data, parents, backward_fn, op):
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p._tracked() for p in parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b):
    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)
    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)
    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    def bw(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))
    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    def bw(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
    return _make(a.data / b.data, (a, b), bw, "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: (g * out_data,), "exp")


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    out_data = np.sqrt(a.data)
    return _make(out_data, (a,), lambda g: (g * 0.5 / out_data,), "sqrt")


def power(a, exponent):
    exponent = float(exponent)
    out_data = a.data ** exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1.0),)
    return _make(out_data, (a,), bw, "pow")


def relu(a):
    mask = a.data > 0

    def bw(g):
        return (g * mask,)
    return _make(np.where(mask, a.data, 0.0), (a,), bw, "relu")


# -- shape manipulation -------------------------------------------------------

def reshape(a, shape):
    old_shape = a.data.shape

    def bw(g):
        return (g.reshape(old_shape),)
    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.data.shape}")

    def bw(g):
        return (g.T,)
    return _make(a.data.T, (a,), bw, "transpose")


def concat(tensors, axis=0):
    tensors = [Tensor._lift(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), bw, "concat")


def gather_rows(a, idx):
    """Select rows of a matrix by integer index; backward scatter-adds."""
    idx = np.asarray(idx, dtype=int)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a matrix, got shape {a.data.shape}")
    in_shape = a.data.shape

    def bw(g):
        out = np.zeros(in_shape)
        np.add.at(out, idx, g)
        return (out,)
    return _make(a.data[idx], (a,), bw, "gather_rows")


def tsum(a, axis=None, keepdims=False):
    in_shape = a.data.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, in_shape).copy(),)
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects matrices, got shapes {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g
    return _make(a.data @ b.data, (a, b), bw, "matmul")


# -- activations / classification --------------------------------------------

def softmax(a, axis=-1):
    """Numerically stable softmax built from primitive ops."""
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    e = exp(a - shift)
    return e / tsum(e, axis=axis, keepdims=True)


def log_softmax(a, axis=-1):
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    centered = a - shift
    lse = log(tsum(exp(centered), axis=axis, keepdims=True))
    return centered - lse


def cross_entropy(logits, labels):
    """Mean cross-entropy of integer ``labels`` under row-wise softmax."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes] logits, "
                         f"got shape {logits.data.shape}")
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError("label out of range for cross_entropy")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    loss = (lse - z[np.arange(n), labels]).mean()
    probs = np.exp(z - m)
    probs /= probs.sum(axis=1, keepdims=True)

    def bw(g):
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)
    return _make(loss, (logits,), bw, "cross_entropy")


# -- convolution / pooling ----------------------------------------------------

def conv2d(x, w, b=None, stride=1, padding=0):
    """Direct 2-D convolution (cross-correlation), NCHW layout.

    x: [B, C, H, W], w: [O, C, kh, kw], optional bias [O].
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got "
                         f"{x.data.shape} and {w.data.shape}")
    bsz, cin, h, wdt = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape} "
                         f"vs kernel {w.data.shape}")
    s, p = int(stride), int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // s + 1
    wo = (wp - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d kernel {w.data.shape} too large for input "
                         f"{x.data.shape} with padding {p}")

    # gather all kh*kw shifted views and contract with one GEMM
    sb, sc, sh, sw = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp, shape=(bsz, cin, kh, kw, ho, wo),
        strides=(sb, sc, sh, sw, sh * s, sw * s), writeable=False)
    cols = np.ascontiguousarray(patches.transpose(0, 4, 5, 1, 2, 3)).reshape(
        bsz * ho * wo, cin * kh * kw)
    w_mat = w.data.reshape(cout, cin * kh * kw)
    out = (cols @ w_mat.T).reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if b is not None:
        if b.data.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {b.data.shape}, expected ({cout},)")
        out += b.data[None, :, None, None]

    def bw(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(bsz * ho * wo, cout)
        dw = (g_mat.T @ cols).reshape(w.data.shape)
        dcols = (g_mat @ w_mat).reshape(bsz, ho, wo, cin, kh, kw)
        dxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                dxp[:, :, u:u + s * ho:s, v:v + s * wo:s] += \
                    dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:hp - p, p:wp - p] if p else dxp
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "conv2d")


def avg_pool2d(x, k=2):
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool2d expects 4-d input, got {x.data.shape}")
    bsz, c, h, w = x.data.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: spatial dims {h}x{w} not divisible by {k}")
    out = x.data.reshape(bsz, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)
    return _make(out, (x,), bw, "avg_pool2d")


def global_avg_pool(x):
    """[B,C,H,W] -> [B,C], spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-d input, got {x.data.shape}")
    return tmean(x, axis=(2, 3))


# -- distances ----------------------------------------------------------------

_COS_EPS = 1e-12


def l2_norm(a):
    """Euclidean norm of the flattened tensor (scalar Tensor)."""
    return sqrt(tsum(a * a))


def normalize_rows(a):
    norms = sqrt(tsum(a * a, axis=-1, keepdims=True))
    return a / (norms + _COS_EPS)


def cosine_rows(a, b):
    """Row-wise cosine similarity of two equal-shape matrices -> [rows]."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"cosine_rows shapes differ: {a.data.shape} vs {b.data.shape}")
    return tsum(normalize_rows(a) * normalize_rows(b), axis=-1)


def cosine_matrix(a, b):
    """All-pairs cosine similarity: [n,D] x [m,D] -> [n,m]."""
    return normalize_rows(a) @ transpose(normalize_rows(b))


def cosine(a, b):
    """Cosine similarity of two vectors (scalar Tensor), zero-vector safe."""
    num = tsum(a * b)
    return num / ((l2_norm(a) + _COS_EPS) * (l2_norm(b) + _COS_EPS))


def sq_dist_rows(a, b):
    """Row-wise squared Euclidean distance -> [rows]."""
    d = a - b
    return tsum(d * d, axis=-1)


# -- backward pass ------------------------------------------------------------

def backward(root):
    """Reverse-accumulate gradients from a scalar ``root`` through the tape.

    Populates ``.grad`` on every reachable tensor with ``requires_grad`` (or
    ``retain_grad``) set, then clears the tape.
    """
    if root.data.ndim != 0 and root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.data.shape}")

    topo, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))

    running = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = running.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad or node.retain_grad:
            node.grad = g if node.grad is None else node.grad + g
            _check_finite(node.grad, "backward")
        if node._backward is not None:
            for p, pg in zip(node._parents, node._backward(g)):
                if not p._tracked():
                    continue
                acc = running.get(id(p))
                running[id(p)] = pg if acc is None else acc + pg
    # release the tape
    for node in topo:
        node._parents = ()
        node._backward = None


# -- optimizer ----------------------------------------------------------------

class Sgd:
    """SGD with momentum and weight decay over a named parameter list."""

    def __init__(self, params, lr=0.01, momentum=0.9, weight_decay=5e-4):
        if not 0.0 <= momentum < 1.0:
            raise ContractError(f"momentum must be in [0,1), got {momentum}")
        if weight_decay < 0.0:
            raise ContractError(f"weight_decay must be >= 0, got {weight_decay}")
        if lr <= 0.0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                raise ContractError("sgd step with missing gradient")
            v *= self.momentum
            v += p.grad + self.weight_decay * p.data
            p.data -= self.lr * v
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -- snapshot format ----------------------------------------------------------

_MAGIC = b"MIRT"


def write_array(fh, arr):
    """Little-endian snapshot: magic 'MIRT', u32 rank, u64 dims, f64 payload."""
    arr = np.asarray(arr, dtype="<f8")
    fh.write(_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(arr.tobytes(order="C"))


def read_array(fh):
    offset = fh.tell()
    magic = fh.read(4)
    if magic != _MAGIC:
        raise FormatError(f"bad tensor snapshot magic {magic!r} at offset {offset}")
    raw = fh.read(4)
    if len(raw) != 4:
        raise FormatError(f"truncated snapshot header at offset {fh.tell()}")
    (rank,) = struct.unpack("<I", raw)
    dims = []
    for _ in range(rank):
        raw = fh.read(8)
        if len(raw) != 8:
            raise FormatError(f"truncated snapshot dims at offset {fh.tell()}")
        dims.append(struct.unpack("<Q", raw)[0])
    count = int(np.prod(dims)) if dims else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise FormatError(f"truncated snapshot payload at offset {fh.tell()}")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
