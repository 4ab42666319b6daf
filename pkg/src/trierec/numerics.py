"""Dense tensors with define-by-run reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
parent gradients; :func:`backward` walks the recorded graph in reverse
topological order.  The op set is exactly what the recommender needs:
matmul, add/sub/mul, concat/split, reshape/transpose, GELU, layer norm,
masked softmax, embedding gather, bias-table gather, dropout and
cross-entropy.
"""

import contextlib
import json
import math
import struct

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


_GRAD_ENABLED = True
_CHECK_FINITE = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording backward closures."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


@contextlib.contextmanager
def unchecked():
    """Skip the per-op finiteness guard (callers check the final result)."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = False
    try:
        yield
    finally:
        _CHECK_FINITE = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op})"

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not in the op set")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward, op):
    # a sum is non-finite iff some entry is (or the total overflows, also an error)
    if _CHECK_FINITE and not math.isfinite(data.sum()):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra < 0:
        raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    if a == b:
        return a
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a} and {b}") from None


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a, getattr(b, "dtype", None)), as_tensor(b, getattr(a, "dtype", None))
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a, getattr(b, "dtype", None)), as_tensor(b, getattr(a, "dtype", None))
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        s = b

        def backward_s(g):
            return (g * s,)

        return _make(a.data * np.asarray(s, dtype=a.dtype), (a,), backward_s, "scale")
    a, b = as_tensor(a, getattr(b, "dtype", None)), as_tensor(b, getattr(a, "dtype", None))
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def gelu(x):
    """tanh-approximated GELU."""
    out, deriv = _kernels.gelu(x.data)

    def backward(g):
        return (g * deriv,)

    return _make(out, (x,), backward, "gelu")


# --------------------------------------------------------------------------
# linear algebra and shape
# --------------------------------------------------------------------------

def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def reshape(x, shape):
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} to {shape}") from None

    def backward(g):
        return (g.reshape(src),)

    return _make(out, (x,), backward, "reshape")


def transpose(x, axes):
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), (x,), backward, "transpose")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError("concat: mismatched shapes")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(tensors)):
            sl[ax] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _make(np.concatenate([t.data for t in tensors], axis=ax),
                 tuple(tensors), backward, "concat")


def getitem(x, idx):
    """Basic (non-fancy) indexing."""
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(x.data[idx], (x,), backward, "getitem")


def split(x, sizes, axis=-1):
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split sizes {sizes} do not cover extent {x.shape[ax]}")
    out, start = [], 0
    for n in sizes:
        sl = [slice(None)] * x.ndim
        sl[ax] = slice(start, start + n)
        out.append(getitem(x, tuple(sl)))
        start += n
    return out


def tsum(x, axis=None):
    src = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), backward, "sum")


def tmean(x, axis=None):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / float(n))


# --------------------------------------------------------------------------
# normalisation, softmax, losses
# --------------------------------------------------------------------------

def layer_norm(x, gamma=None, beta=None, eps=1e-6):
    """Normalise over the last axis; a constant row maps to zeros."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    parents = [x]
    if gamma is not None:
        out = out * gamma.data + beta.data
        parents += [gamma, beta]

    def backward(g):
        grads = []
        gx = g * gamma.data if gamma is not None else g
        mean_g = gx.mean(axis=-1, keepdims=True)
        mean_gx = (gx * xhat).mean(axis=-1, keepdims=True)
        grads.append(rstd * (gx - mean_g - xhat * mean_gx))
        if gamma is not None:
            lead = tuple(range(g.ndim - 1))
            grads.append((g * xhat).sum(axis=lead))
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _make(out.astype(xd.dtype, copy=False), tuple(parents), backward, "layer_norm")


def masked_softmax(x, mask=None):
    """Softmax over the last axis.  ``mask`` is boolean, broadcastable to x,
    True where a key may be attended; masked keys get exactly zero weight.
    A row with every key masked yields all zeros."""
    xd = x.data
    if mask is None:
        m = xd.max(axis=-1, keepdims=True)
        e = np.exp(xd - m)
        y = e / e.sum(axis=-1, keepdims=True)
    else:
        mask = np.broadcast_to(mask, xd.shape)
        z = np.where(mask, xd, -np.inf)
        m = z.max(axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.exp(z - m)
        s = e.sum(axis=-1, keepdims=True)
        y = e / np.where(s > 0, s, 1.0)
    y = y.astype(xd.dtype, copy=False)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def log_softmax_np(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, targets, reduction="mean"):
    """Cross-entropy of integer ``targets`` (n,) under ``logits`` (n, V)."""
    if logits.ndim != 2 or len(targets) != logits.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape}, targets {np.shape(targets)}")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ShapeError("cross_entropy: target out of range")
    n = logits.shape[0]
    logp = log_softmax_np(logits.data)
    nll = -logp[np.arange(n), targets]
    scale = 1.0 / n if reduction == "mean" else 1.0
    total = nll.sum() * scale

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        return (p * (g * scale),)

    return _make(np.asarray(total, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# --------------------------------------------------------------------------
# gathers and dropout
# --------------------------------------------------------------------------

def embedding(table, idx):
    """Rows of ``table`` (V, d) selected by integer array ``idx``."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("embedding: index out of range")
    V, d = table.shape

    def backward(g):
        return (_kernels.scatter_add_rows(V, idx.reshape(-1), g.reshape(-1, d)),)

    return _make(table.data[idx], (table,), backward, "embedding")


def gather_bias(table, idx):
    """Per-head scalar lookup: table (H, S), idx (B, N, M) -> (B, H, N, M);
    idx (N, M) -> (1, H, N, M), shared over the batch."""
    idx = np.asarray(idx)
    H, S = table.shape
    shared = idx.ndim == 2
    vals = table.data[:, idx]  # H, [B,] N, M
    out = vals[None] if shared else np.moveaxis(vals, 0, 1)

    def backward(g):
        return (_kernels.bias_table_grad(g, idx, S).astype(table.dtype, copy=False),)

    return _make(np.ascontiguousarray(out), (table,), backward, "gather_bias")


def dropout(x, rate, rng, training=True):
    """Inverted dropout; identity when not training or rate is 0."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def backward(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), backward, "dropout")


# --------------------------------------------------------------------------
# reverse pass
# --------------------------------------------------------------------------

def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, params):
    """Gradients of scalar ``loss`` for every tensor in ``params`` (a mapping
    name -> Tensor).  Parameters off every path to the loss get exact zeros."""
    if not isinstance(loss, Tensor):
        raise GraphError("loss must be a Tensor produced by forward ops")
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    grads = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo(loss)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for p, gp in zip(node._parents, node._backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + gp
                else:
                    grads[key] = gp
            if node._parents:
                del grads[id(node)]
    out = {}
    for name, p in params.items():
        g = grads.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else g.astype(p.dtype, copy=False)
    return out


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, lr=1e-3, weight_decay=0.1, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"grad for {name}: {g.shape} vs param {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data *= (1.0 - self.lr * self.weight_decay)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state_dict(self):
        return {"step": self.step_count, "m": self.m, "v": self.v}


# --------------------------------------------------------------------------
# gradient check
# --------------------------------------------------------------------------

def finite_difference_check(loss_fn, params, step=1e-5, max_entries=None, rng=None, order=2):
    """Max relative error between reverse-mode and central-difference
    gradients of ``loss_fn()`` over ``params``.

    Evaluate in 64-bit with dropout off.  ``max_entries`` caps the probed
    coordinates per parameter (random subset); None probes all of them.
    ``order=4`` uses the five-point central stencil, whose O(h^4) truncation
    allows a wider step and so far less roundoff on tiny gradients.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    analytic = backward(loss_fn(), params)
    rng = rng or np.random.default_rng(0)
    worst = 0.0

    def value():
        v = loss_fn().item()
        if not math.isfinite(v):
            raise NonFiniteError("loss became non-finite under perturbation")
        return v

    with no_grad(), unchecked():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                coords = rng.choice(flat.size, size=max_entries, replace=False)
            ga = analytic[name].reshape(-1)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                hi = flat[i]
                up = value()
                flat[i] = orig - step
                lo = flat[i]
                down = value()
                # divide by the representable perturbation, not the nominal one
                num = (up - down) / (hi - lo)
                if order == 4:
                    flat[i] = orig + 2 * step
                    hi2 = flat[i]
                    up2 = value()
                    flat[i] = orig - 2 * step
                    lo2 = flat[i]
                    down2 = value()
                    wide = (up2 - down2) / (hi2 - lo2)
                    num = (4.0 * num - wide) / 3.0
                flat[i] = orig
                a = ga[i]
                err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------

_MAGIC = b"TRIERECK"
_VERSION = 1


def save_checkpoint(path, config, tensors):
    """One file: JSON config record, then named little-endian float32 tensors."""
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", _VERSION, len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f4", order="C")
            key = name.encode("utf-8")
            f.write(struct.pack("<HB", len(key), arr.ndim))
            f.write(key)
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, n = struct.unpack("<IQ", f.read(12))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        config = json.loads(f.read(n).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(count):
            klen, ndim = struct.unpack("<HB", f.read(3))
            name = f.read(klen).decode("utf-8")
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(f.read(4 * size), dtype="<f4").reshape(shape)
            tensors[name] = arr.astype(np.float32)
    return config, tensors
