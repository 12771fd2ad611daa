"""A small reverse-mode autodiff engine on float64 numpy arrays.

Images are batch-first, channels-last: ``(batch, rows, cols, channels)``.
Every op records a closure that pushes the upstream gradient to its inputs;
``backward`` runs them in reverse topological order and sums gradients at
fan-out points.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

DTYPE = np.float64
BCE_CLAMP = 1e-7


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), op=""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    # arithmetic sugar used by the model code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    parents = tuple(parents)
    out = Tensor(data, any(p.requires_grad for p in parents), parents, op)
    if out.requires_grad:
        out._backward = backward_fn
    return out


def _check_shape(cond, op, *shapes):
    if not cond:
        raise ValueError(f"{op}: incompatible shapes " + " and ".join(str(s) for s in shapes))


def backward(loss: Tensor):
    """Populate ``.grad`` on every tensor reachable from a scalar ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---- elementwise and structural ops ----


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def tsum(x):
    x = as_tensor(x)
    return _make(np.array(x.data.sum()), (x,), lambda g: x._accumulate(np.broadcast_to(g, x.shape)), "sum")


def reshape(x, shape):
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: x._accumulate(g.reshape(x.shape)), "reshape")


def broadcast_to(x, shape):
    x = as_tensor(x)
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: x._accumulate(_unbroadcast(g, x.shape)), "broadcast")


def mean(x, axis):
    x = as_tensor(x)
    n = x.shape[axis]

    def bw(g):
        x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape) / n)

    return _make(x.data.mean(axis=axis), (x,), bw, "mean")


def concat_batch(xs):
    """Stack tensors along the batch (first) axis."""
    xs = [as_tensor(x) for x in xs]
    _check_shape(len({x.shape[1:] for x in xs}) == 1, "concat_batch", *[x.shape for x in xs])
    bounds = np.cumsum([0] + [x.shape[0] for x in xs])

    def bw(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                x._accumulate(g[lo:hi])

    return _make(np.concatenate([x.data for x in xs], axis=0), xs, bw, "concat_batch")


def rows(x, lo, hi):
    """Batch slice ``x[lo:hi]``."""
    x = as_tensor(x)

    def bw(g):
        full = np.zeros(x.shape)
        full[lo:hi] = g
        x._accumulate(full)

    return _make(x.data[lo:hi], (x,), bw, "rows")


def concat_channels(xs):
    """Concatenate along the last (channel) axis."""
    xs = [as_tensor(x) for x in xs]
    lead = {x.shape[:-1] for x in xs}
    _check_shape(len(lead) == 1, "concat_channels", *[x.shape for x in xs])
    bounds = np.cumsum([0] + [x.shape[-1] for x in xs])

    def bw(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                x._accumulate(g[..., lo:hi])

    return _make(np.concatenate([x.data for x in xs], axis=-1), xs, bw, "concat")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: x._accumulate(g * mask), "relu")


def sigmoid(x):
    x = as_tensor(x)
    # split by sign so that exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (x,), lambda g: x._accumulate(g * y * (1.0 - y)), "sigmoid")


def grad_reverse(x, lam: float = 1.0):
    """Identity forward; multiplies the gradient by ``-lam`` on the way back."""
    x = as_tensor(x)
    if not np.isfinite(lam):
        raise ValueError("gradient reversal weight must be finite")
    return _make(x.data, (x,), lambda g: x._accumulate(-lam * g), "grad_reverse")


# ---- layers ----


def dense(x, W, b):
    """``x @ W + b`` with ``x`` of shape ``(batch, in)`` and ``W`` ``(in, out)``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    _check_shape(x.data.ndim == 2 and W.data.ndim == 2 and x.shape[1] == W.shape[0], "dense", x.shape, W.shape)
    _check_shape(b.shape == (W.shape[1],), "dense", W.shape, b.shape)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g @ W.data.T)
        if W.requires_grad:
            W._accumulate(x.data.T @ g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _make(x.data @ W.data + b.data, (x, W, b), bw, "dense")


def _conv_out(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, K, b, stride: int = 1, pad: int = 0):
    """2D cross-correlation. ``x``: ``(B, H, W, Cin)``; ``K``: ``(kh, kw, Cin, Cout)``."""
    x, K, b = as_tensor(x), as_tensor(K), as_tensor(b)
    _check_shape(x.data.ndim == 4 and K.data.ndim == 4 and x.shape[3] == K.shape[2], "conv2d", x.shape, K.shape)
    _check_shape(b.shape == (K.shape[3],), "conv2d", K.shape, b.shape)
    B, H, W, C = x.shape
    kh, kw, _, co = K.shape
    ho, wo = _conv_out(H, kh, stride, pad), _conv_out(W, kw, stride, pad)
    _check_shape(ho > 0 and wo > 0, "conv2d", x.shape, K.shape)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    # one small matmul per kernel offset; cheaper than materialising im2col
    taps = [(i, j, (slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))) for i in range(kh) for j in range(kw)]
    y = np.empty((B, ho, wo, co))
    y[...] = b.data
    for i, j, sl in taps:
        y += xp[sl] @ K.data[i, j]

    def bw(g):
        if K.requires_grad:
            g2 = g.reshape(-1, co)
            gk = np.empty(K.shape)
            for i, j, sl in taps:
                gk[i, j] = xp[sl].reshape(-1, C).T @ g2
            K._accumulate(gk)
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 1, 2)))
        if x.requires_grad:
            gx = np.zeros(xp.shape)
            for i, j, sl in taps:
                gx[sl] += g @ K.data[i, j].T
            x._accumulate(gx[:, pad : pad + H, pad : pad + W, :] if pad else gx)

    return _make(y, (x, K, b), bw, "conv2d")


def _nearest_matrix(n_out, n_in):
    src = np.minimum((np.arange(n_out) * n_in) // n_out, n_in - 1)
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), src] = 1.0
    return m


def upsample_nearest(x, size):
    """Nearest-neighbour resize of the spatial axes to ``size = (rows, cols)``."""
    x = as_tensor(x)
    ur, uc = _nearest_matrix(size[0], x.shape[1]), _nearest_matrix(size[1], x.shape[2])
    y = np.einsum("ph,bhwc,qw->bpqc", ur, x.data, uc, optimize=True)
    bw = lambda g: x._accumulate(np.einsum("ph,bpqc,qw->bhwc", ur, g, uc, optimize=True))
    return _make(y, (x,), bw, "upsample")


def upconv2d(x, K, b, factor=2):
    """Nearest upsampling then a same-padded stride-1 convolution.

    ``factor`` is an integer scale or an explicit ``(rows, cols)`` output size.
    """
    x = as_tensor(x)
    if isinstance(factor, int):
        size = (x.shape[1] * factor, x.shape[2] * factor)
    else:
        size = tuple(factor)
    k = as_tensor(K).shape[0]
    return conv2d(upsample_nearest(x, size), K, b, stride=1, pad=k // 2)


# ---- losses ----


def mse_loss(pred, target):
    pred, target = as_tensor(pred), as_tensor(target)
    _check_shape(pred.shape == target.shape, "mse_loss", pred.shape, target.shape)
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        if pred.requires_grad:
            pred._accumulate(g * 2.0 * diff / n)
        if target.requires_grad:
            target._accumulate(-g * 2.0 * diff / n)

    return _make(np.array(np.mean(diff**2)), (pred, target), bw, "mse")


def bce_loss(prob, label):
    """Mean binary cross-entropy; probabilities are clamped to [1e-7, 1 - 1e-7]."""
    prob = as_tensor(prob)
    label = np.broadcast_to(np.asarray(label, dtype=DTYPE), prob.shape)
    raw = prob.data
    p = np.clip(raw, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = (raw >= BCE_CLAMP) & (raw <= 1.0 - BCE_CLAMP)
    n = p.size
    val = -np.mean(label * np.log(p) + (1.0 - label) * np.log(1.0 - p))

    def bw(g):
        prob._accumulate(g * inside * (p - label) / (p * (1.0 - p)) / n)

    return _make(np.array(val), (prob,), bw, "bce")


# ---- parameters and optimiser ----


class ParamStore:
    """Named parameters with per-parameter Adam state."""

    def __init__(self):
        self.params = OrderedDict()
        self.state = {}

    def add(self, name, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def names(self, prefix=""):
        return [n for n in self.params if n.startswith(prefix)]

    def count(self, prefix="") -> int:
        return int(sum(self.params[n].data.size for n in self.names(prefix)))

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def checksum(self, prefix="") -> str:
        import hashlib

        h = hashlib.sha256()
        for n in self.names(prefix):
            h.update(n.encode())
            h.update(self.params[n].data.tobytes())
        return h.hexdigest()


def adam_step(store: ParamStore, lr=1e-4, beta1=0.5, beta2=0.999, eps=1e-8, names=None):
    """One bias-corrected Adam update on ``names`` (default: every parameter)."""
    names = list(store.params) if names is None else list(names)
    for n in names:
        if store.params[n].grad is None:
            raise ValueError(f"parameter {n!r} has no gradient")
    for n in names:
        p = store.params[n]
        st = store.state.get(n)
        if st is None:
            st = store.state[n] = {"t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
        st["t"] += 1
        g = p.grad
        st["m"] = beta1 * st["m"] + (1.0 - beta1) * g
        st["v"] = beta2 * st["v"] + (1.0 - beta2) * g * g
        m_hat = st["m"] / (1.0 - beta1 ** st["t"])
        v_hat = st["v"] / (1.0 - beta2 ** st["t"])
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return store


# ---- checkpoints ----

CKPT_MAGIC = b"SSLW"
CKPT_VERSION = 1


def save_checkpoint(path, store: ParamStore, header: dict | None = None, with_optimizer=True):
    """Write parameters (and Adam moments as ``adam.*`` entries) to ``path``.

    Layout: magic, version u32, header length u32 + ``key=value;...`` text,
    count u32, then per entry: name length u32 + bytes, ndim u32, dims u32,
    f64 payload.
    """
    entries = [(n, t.data) for n, t in store]
    if with_optimizer:
        for n, st in store.state.items():
            entries += [(f"adam.m/{n}", st["m"]), (f"adam.v/{n}", st["v"]), (f"adam.t/{n}", np.array([st["t"]], DTYPE))]
    head = ";".join(f"{k}={v}" for k, v in (header or {}).items()).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(head)) + head)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            nb = name.encode()
            arr = np.asarray(arr, "<f8")
            fh.write(struct.pack("<I", len(nb)) + nb)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path, store: ParamStore | None = None):
    """Read a checkpoint; fills ``store`` in place when given.

    Returns ``(header, entries)`` where entries maps names to arrays.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an SSLW checkpoint")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    head = buf[off : off + hlen].decode()
    off += hlen
    header = dict(kv.split("=", 1) for kv in head.split(";") if kv)
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    entries = OrderedDict()
    for _ in range(count):
        (nl,) = struct.unpack_from("<I", buf, off)
        name = buf[off + 4 : off + 4 + nl].decode()
        off += 4 + nl
        (nd,) = struct.unpack_from("<I", buf, off)
        dims = struct.unpack_from(f"<{nd}I", buf, off + 4)
        off += 4 + 4 * nd
        size = int(np.prod(dims)) if nd else 1
        entries[name] = np.frombuffer(buf, "<f8", size, off).reshape(dims).astype(DTYPE)
        off += 8 * size
    if store is not None:
        for n, t in store:
            if n not in entries:
                raise KeyError(f"checkpoint lacks parameter {n!r}")
            if entries[n].shape != t.shape:
                raise ValueError(f"shape mismatch for {n!r}: {entries[n].shape} vs {t.shape}")
            t.data = entries[n].copy()
            if f"adam.m/{n}" in entries:
                store.state[n] = {
                    "t": int(entries[f"adam.t/{n}"][0]),
                    "m": entries[f"adam.m/{n}"].copy(),
                    "v": entries[f"adam.v/{n}"].copy(),
                }
    return header, entries
