"""Minimal dense-tensor core with reverse-mode differentiation.

Tensors wrap numpy arrays (up to 3 dims) and record a tape of backward
closures; calling :func:`backward` on a scalar loss walks the tape once in
reverse topological order.  Training runs in float32, test oracles in
float64.  Every op validates that its output is finite.
"""

from __future__ import annotations

import json
import struct

import numpy as np

__all__ = [
    "Tensor",
    "ParamStore",
    "Categorical",
    "CheckpointError",
    "no_grad",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "concat",
    "reshape",
    "transpose_last2",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "softmax_lastdim",
    "log_softmax_lastdim",
    "masked_softmax",
    "conv1d",
    "gru_cell",
    "sum_",
    "mean_",
    "clip_",
    "minimum",
    "square",
    "gather_lastdim",
    "save_tensors",
    "load_tensors",
]


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def _check_finite(data, opname):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op '{opname}'")


class Tensor:
    """A dense array node in the compute graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=""):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim > 3:
            raise ValueError(f"tensors support up to 3 dims, got shape {arr.shape}")
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _slice(self, key)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


class no_grad:
    """Context manager: ops executed inside build no tape (rollout mode)."""

    _active = False

    def __enter__(self):
        self._prev = no_grad._active
        no_grad._active = True
        return self

    def __exit__(self, *exc):
        no_grad._active = self._prev
        return False


def _node(data, parents, backward_fn, opname):
    """Wire a new graph node; skips the tape when no parent needs grad."""
    _check_finite(data, opname)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = opname
    needs = (not no_grad._active) and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), bwd, "add")


def sub(a, b):
    return add(a, neg(_as_tensor(b)))


def neg(a):
    a = _as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return _node(-a.data, (a,), bwd, "neg")


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), bwd, "mul")


def scale(a, s):
    a = _as_tensor(a)
    s = float(s)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * s)

    return _node(a.data * s, (a,), bwd, "scale")


def matmul(a, b):
    """Matrix product; supports 2D@2D, 3D@2D and 3D@3D (leading batch dim)."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.data.shape))

    return _node(out_data, (a, b), bwd, "matmul")


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _node(out_data, tuple(tensors), bwd, "concat")


def _slice(a, key):
    a = _as_tensor(a)
    out_data = a.data[key]
    if out_data.base is not None:
        out_data = out_data.copy()

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, key, g)
            a.accumulate_grad(full)

    return _node(out_data, (a,), bwd, "slice")


def reshape(a, shape):
    a = _as_tensor(a)
    in_shape = a.data.shape

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(in_shape))

    return _node(a.data.reshape(shape), (a,), bwd, "reshape")


def transpose_last2(a):
    a = _as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.swapaxes(g, -1, -2))

    return _node(np.swapaxes(a.data, -1, -2).copy(), (a,), bwd, "transpose")


def relu(a):
    a = _as_tensor(a)
    pos = a.data > 0

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * pos)

    return _node(np.where(pos, a.data, 0.0), (a,), bwd, "relu")


def tanh(a):
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), bwd, "tanh")


def sigmoid(a):
    a = _as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), bwd, "sigmoid")


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * out_data)

    return _node(out_data, (a,), bwd, "exp")


def log(a):
    a = _as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return _node(np.log(a.data), (a,), bwd, "log")


def softmax_lastdim(a):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            a.accumulate_grad(out_data * (g - dot))

    return _node(out_data, (a,), bwd, "softmax")


def log_softmax_lastdim(a):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g - soft * g.sum(axis=-1, keepdims=True))

    return _node(out_data, (a,), bwd, "log_softmax")


def masked_softmax(logits, mask):
    """Softmax over the last dim restricted to positions where ``mask`` > 0.

    Masked positions get weight exactly 0 and contribute no gradient; their
    logit values never influence the output.  Rows that are fully masked
    come back as all-zero (the caller decides what that means).
    """
    a = _as_tensor(logits)
    m = np.asarray(mask, dtype=a.data.dtype)
    m = np.broadcast_to(m, a.data.shape)
    keep = m > 0
    neg_inf = np.where(keep, a.data, -np.inf)
    row_max = np.max(neg_inf, axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(keep, np.exp(neg_inf - row_max), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    safe = np.where(denom > 0, denom, 1.0)
    out_data = e / safe

    def bwd(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            a.accumulate_grad(out_data * (g - dot))

    return _node(out_data, (a,), bwd, "masked_softmax")


def conv1d(x, w, b, stride):
    """1D convolution, valid padding.

    x: (B, C_in, L); w: (C_out, C_in, K); b: (C_out,).  Output length is
    (L - K)//stride + 1.
    """
    x = _as_tensor(x)
    w = _as_tensor(w, like=x)
    b = _as_tensor(b, like=x)
    batch, c_in, length = x.data.shape
    c_out, c_in_w, k = w.data.shape
    if c_in != c_in_w:
        raise ValueError(f"conv1d channel mismatch: input {c_in}, kernel {c_in_w}")
    if length < k:
        raise ValueError(f"conv1d input length {length} shorter than kernel {k}")
    l_out = (length - k) // stride + 1
    cols = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=2)[:, :, ::stride, :]
    out_data = np.einsum("bclk,ock->bol", cols, w.data, optimize=True) + b.data[:, None]
    out_data = np.ascontiguousarray(out_data)

    def bwd(g):
        if w.requires_grad:
            w.accumulate_grad(np.einsum("bclk,bol->ock", cols, g, optimize=True))
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.einsum("bol,ock->bclk", g, w.data, optimize=True)
            dx = np.zeros_like(x.data)
            for j in range(k):
                dx[:, :, j : j + l_out * stride : stride] += dcols[:, :, :, j]
            x.accumulate_grad(dx)

    return _node(out_data, (x, w, b), bwd, "conv1d")


def gru_cell(x, h, params):
    """One step of a gated recurrent unit.

    ``params`` maps the keys w_xr, w_hr, b_r, w_xz, w_hz, b_z, w_xn, w_hn,
    b_n to tensors.  Update rule (reset r, update z, candidate n):

        r  = sigmoid(x W_xr + h W_hr + b_r)
        z  = sigmoid(x W_xz + h W_hz + b_z)
        n  = tanh(x W_xn + r * (h W_hn) + b_n)
        h' = (1 - z) * h + z * n
    """
    x = _as_tensor(x)
    h = _as_tensor(h, like=x)
    r = sigmoid(add(add(matmul(x, params["w_xr"]), matmul(h, params["w_hr"])), params["b_r"]))
    z = sigmoid(add(add(matmul(x, params["w_xz"]), matmul(h, params["w_hz"])), params["b_z"]))
    n = tanh(add(add(matmul(x, params["w_xn"]), mul(r, matmul(h, params["w_hn"]))), params["b_n"]))
    one_minus_z = add(neg(z), np.ones((), dtype=x.data.dtype))
    return add(mul(one_minus_z, h), mul(z, n))


def sum_(a, axis=None):
    a = _as_tensor(a)
    in_shape = a.data.shape
    out_data = a.data.sum(axis=axis)

    def bwd(g):
        if a.requires_grad:
            if axis is None:
                a.accumulate_grad(np.broadcast_to(g, in_shape).copy())
            else:
                a.accumulate_grad(np.broadcast_to(np.expand_dims(g, axis), in_shape).copy())

    return _node(np.asarray(out_data), (a,), bwd, "sum")


def mean_(a, axis=None):
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def clip_(a, lo, hi):
    """Clamp values; gradient flows only through the unclipped region."""
    a = _as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * inside)

    return _node(np.clip(a.data, lo, hi), (a,), bwd, "clip")


def minimum(a, b):
    """Elementwise min; ties route the gradient through ``a``."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    take_a = a.data <= b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * ~take_a, b.data.shape))

    return _node(np.where(take_a, a.data, b.data), (a, b), bwd, "minimum")


def square(a):
    a = _as_tensor(a)
    return mul(a, a)


def gather_lastdim(a, idx):
    """Pick one entry per row along the last dim: out[..., i] = a[..., idx[i]]."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    expanded = np.expand_dims(idx, -1)
    out_data = np.take_along_axis(a.data, expanded, axis=-1).squeeze(-1)

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.put_along_axis(full, expanded, np.expand_dims(g, -1), axis=-1)
            a.accumulate_grad(full)

    return _node(out_data, (a,), bwd, "gather")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss):
    """Reverse-mode sweep from a scalar loss; visits each node exactly once."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    # iterative DFS topological sort (graphs can be deep with long BPTT chains)
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if node._backward is not None:
            node._parents = ()
            node._backward = None


# ---------------------------------------------------------------------------
# categorical distribution over discrete actions
# ---------------------------------------------------------------------------


class Categorical:
    """Discrete distribution from logits; differentiable log_prob/entropy."""

    def __init__(self, logits):
        logits = _as_tensor(logits)
        _check_finite(logits.data, "categorical")
        self.logits = logits
        self.log_probs = log_softmax_lastdim(logits)
        self.probs = np.exp(self.log_probs.data)

    def sample(self, rng):
        """Inverse-CDF sampling; one uniform draw per row."""
        p = self.probs
        if p.ndim == 1:
            p = p[None, :]
        cdf = np.cumsum(p, axis=-1)
        cdf[..., -1] = 1.0
        u = rng.random(p.shape[0])
        idx = np.array([int(np.searchsorted(cdf[i], u[i], side="right")) for i in range(p.shape[0])])
        idx = np.minimum(idx, p.shape[-1] - 1)
        return idx if self.probs.ndim > 1 else int(idx[0])

    def log_prob(self, actions):
        if self.log_probs.data.ndim == 1:
            lp = reshape(self.log_probs, (1, -1))
            return gather_lastdim(lp, np.atleast_1d(actions))
        return gather_lastdim(self.log_probs, actions)

    def entropy(self):
        plogp = mul(exp(self.log_probs), self.log_probs)
        return neg(sum_(plogp, axis=-1))


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------


class ParamStore:
    """Named trainable tensors with gradients."""

    def __init__(self):
        self._params = {}

    def add(self, name, array):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(array), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def tensors(self):
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def count(self):
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grad_global_norm(self):
        total = 0.0
        for t in self._params.values():
            if t.grad is not None:
                total += float(np.sum(t.grad.astype(np.float64) ** 2))
        return float(np.sqrt(total))

    def clip_grad_global_norm(self, max_norm):
        norm = self.grad_global_norm()
        if norm > max_norm and norm > 0:
            factor = max_norm / norm
            for t in self._params.values():
                if t.grad is not None:
                    t.grad *= factor
        return norm

    def snapshot(self):
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, state):
        for name, t in self._params.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r} in state")
            arr = np.asarray(state[name])
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {t.data.shape}")
            t.data = arr.astype(t.data.dtype).copy()
            t.grad = None


def uniform_init(rng, shape, fan_in, fan_out, dtype=np.float32):
    """Layer init: uniform in +-sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"CNAVTNSR"
_FORMAT_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(RuntimeError):
    pass


def save_tensors(path, arrays, meta=None):
    """Write named arrays plus an optional JSON metadata blob.

    Layout: magic, version, tensor count, manifest (name, dtype, shape) in
    insertion order, raw little-endian data blocks, then the metadata JSON.
    Roundtrips are bit-exact.
    """
    chunks = [_MAGIC, struct.pack("<II", _FORMAT_VERSION, len(arrays))]
    blocks = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _CODE_FOR:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", _CODE_FOR[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blocks.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    chunks.extend(blocks)
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks.append(struct.pack("<Q", len(meta_bytes)))
    chunks.append(meta_bytes)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_tensors(path):
    """Read back a container written by :func:`save_tensors`."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(_MAGIC), "magic")
        if magic != _MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {_MAGIC!r}")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != _FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {version}, expected {_FORMAT_VERSION}")
        manifest = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            code, ndim = struct.unpack("<BB", _read_exact(fh, 2, "dtype/ndim"))
            if code not in _DTYPE_CODES:
                raise CheckpointError(f"unknown dtype code {code} for {name!r}")
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "shape"))
            manifest.append((name, _DTYPE_CODES[code], shape))
        arrays = {}
        for name, dtype, shape in manifest:
            n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
            n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
            buf = _read_exact(fh, n_items * dtype.itemsize, f"data for {name!r}")
            del n_bytes
            arrays[name] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8, "meta length"))
        meta = json.loads(_read_exact(fh, meta_len, "meta").decode("utf-8")) if meta_len else {}
    return arrays, meta
