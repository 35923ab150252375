"""Reverse-mode automatic differentiation over dense float64 tensors.

A `Tape` records every primitive applied to watched tensors as a Wengert
list; `Tape.backward` replays it in reverse id order, so gradients are
deterministic and bitwise reproducible for an identical tape. The primitive
set is deliberately small: elementwise arithmetic with trailing-dim
broadcasting, 2D matmul, reductions, a handful of nonlinearities, concat /
slice / reshape on the last axis, and layer normalization. Everything the
networks and losses need is composed from these (plus one convolution
primitive registered by the encoder through `custom_op`).

All math is float64; speed is secondary to gradient-check fidelity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

LAYER_NORM_EPS = 1e-5


class Tensor:
    """Dense f64 value, optionally attached to a tape node.

    A tensor without a node handle is a constant: it never receives
    gradients and is safe to share across threads.
    """

    __slots__ = ("data", "node", "tape")

    def __init__(self, data, node=None, tape=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detached(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # Operator sugar for the common arithmetic primitives.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("parents", "backward_fn", "shape")

    def __init__(self, parents, backward_fn, shape):
        self.parents = parents
        self.backward_fn = backward_fn
        self.shape = shape


class Tape:
    """Append-only record of primitive applications (topological by id)."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaf_ids: list[int] = []

    def leaf(self, data) -> Tensor:
        """Watch a value: gradients will be accumulated for it."""
        nid = len(self.nodes)
        self.nodes.append(_Node((), None, np.shape(data)))
        self.leaf_ids.append(nid)
        return Tensor(data, node=nid, tape=self)

    def record(self, out_data, parents: list[Tensor], backward_fn) -> Tensor:
        parent_ids = tuple(p.node for p in parents if p.node is not None)
        nid = len(self.nodes)
        self.nodes.append(_Node(parent_ids, backward_fn, out_data.shape))
        return Tensor(out_data, node=nid, tape=self)

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Accumulate gradients of a scalar root for every reachable node.

        Returns a map node-id -> gradient; watched leaves that the root does
        not reach get explicit zero gradients.
        """
        if root.tape is not self or root.node is None:
            raise ValueError("backward: root does not live on this tape")
        if int(np.prod(root.data.shape)) != 1:
            raise ValueError(
                f"backward: root must be scalar, got shape {root.data.shape}"
            )
        grads: dict[int, np.ndarray] = {
            root.node: np.ones_like(root.data)
        }
        for nid in range(root.node, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                acc = grads.get(pid)
                if acc is None:
                    grads[pid] = pg
                else:
                    grads[pid] = acc + pg
        for leaf_id in self.leaf_ids:
            if leaf_id not in grads:
                grads[leaf_id] = np.zeros(self.nodes[leaf_id].shape)
        return grads


def _active_tape(tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands live on different tapes")
    return tape


def _emit(kind, out_data, inputs, backward_fn) -> Tensor:
    tape = _active_tape(inputs)
    if tape is None:
        return Tensor(out_data)
    # Only propagate to parents that are actually watched (by position, so a
    # tensor appearing twice gets both of its partials).
    idxs = [i for i, t in enumerate(inputs) if t.node is not None]
    watched = [inputs[i] for i in idxs]

    def bwd(g, _idxs=idxs, _fn=backward_fn):
        full = _fn(g)
        return [full[i] for i in _idxs]

    return tape.record(out_data, watched, bwd)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _shape_error(op, expected, actual):
    return ValueError(f"{op}: incompatible shapes, expected {expected}, got {actual}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise _shape_error("add", a.shape, b.shape) from None
    return _emit("add", out, [a, b], lambda g: [
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)])


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise _shape_error("sub", a.shape, b.shape) from None
    return _emit("sub", out, [a, b], lambda g: [
        _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise _shape_error("mul", a.shape, b.shape) from None
    return _emit("mul", out, [a, b], lambda g: [
        _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)])


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", f"(n,k)x(k,m)", f"{a.shape}x{b.shape}")
    out = a.data @ b.data
    return _emit("matmul", out, [a, b], lambda g: [
        g @ b.data.T, a.data.T @ g])


def tsum(x, axis=None) -> Tensor:
    """Sum over all elements (axis=None, scalar out) or the last axis
    (axis=-1, keepdims)."""
    x = as_tensor(x)
    if axis is None:
        out = np.array(x.data.sum())
        return _emit("sum", out, [x],
                     lambda g: [np.broadcast_to(g, x.shape).copy()])
    if axis != -1:
        raise ValueError("sum: only axis=None or axis=-1 supported")
    out = x.data.sum(axis=-1, keepdims=True)
    return _emit("sum", out, [x],
                 lambda g: [np.broadcast_to(g, x.shape).copy()])


def tmean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
        out = np.array(x.data.mean())
        return _emit("mean", out, [x],
                     lambda g: [np.broadcast_to(g / n, x.shape).copy()])
    if axis != -1:
        raise ValueError("mean: only axis=None or axis=-1 supported")
    n = x.shape[-1]
    out = x.data.mean(axis=-1, keepdims=True)
    return _emit("mean", out, [x],
                 lambda g: [np.broadcast_to(g / n, x.shape).copy()])


def square(x) -> Tensor:
    x = as_tensor(x)
    return _emit("square", x.data ** 2, [x], lambda g: [g * 2.0 * x.data])


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _emit("sqrt", out, [x], lambda g: [g * (0.5 / out)])


def tabs(x) -> Tensor:
    x = as_tensor(x)
    return _emit("abs", np.abs(x.data), [x], lambda g: [g * np.sign(x.data)])


def max_const(x, c: float) -> Tensor:
    """Elementwise max(x, c); the hinge primitive."""
    x = as_tensor(x)
    out = np.maximum(x.data, c)
    return _emit("max_const", out, [x], lambda g: [g * (x.data > c)])


def relu(x) -> Tensor:
    return max_const(x, 0.0)


def hinge(x) -> Tensor:
    return max_const(x, 0.0)


def min_const(x, c: float) -> Tensor:
    """Elementwise min(x, c), composed from the closed primitive set."""
    return scale(max_const(scale(x, -1.0), -c), -1.0)


def softplus(x) -> Tensor:
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    return _emit("softplus", out, [x], lambda g: [g * sig])


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _emit("sigmoid", out, [x], lambda g: [g * out * (1.0 - out)])


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _emit("tanh", out, [x], lambda g: [g * (1.0 - out * out)])


def sin(x) -> Tensor:
    x = as_tensor(x)
    return _emit("sin", np.sin(x.data), [x], lambda g: [g * np.cos(x.data)])


def cos(x) -> Tensor:
    x = as_tensor(x)
    return _emit("cos", np.cos(x.data), [x], lambda g: [g * -np.sin(x.data)])


def concat(parts, axis=-1) -> Tensor:
    if axis != -1:
        raise ValueError("concat: only the last axis is supported")
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        return [g[..., offsets[i]:offsets[i + 1]] for i in range(len(parts))]

    return _emit("concat", out, parts, bwd)


def slice_last(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    out = x.data[..., start:stop].copy()

    def bwd(g):
        full = np.zeros(x.shape)
        full[..., start:stop] = g
        return [full]

    return _emit("slice", out, [x], bwd)


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis (population variance), then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if d < 1:
        raise ValueError("layer_norm: last axis must have length >= 1")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gain.data + bias.data

    def bwd(g):
        dgain = _unbroadcast(g * xhat, gain.shape)
        dbias = _unbroadcast(g, bias.shape)
        gx = g * gain.data
        dx = inv_std * (gx
                        - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return [dx, dgain, dbias]

    return _emit("layer_norm", out, [x, gain, bias], bwd)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _emit("scale", x.data * c, [x], lambda g: [g * c])


def reshape(x, shape) -> Tensor:
    """Structural reshape (row-major data unchanged)."""
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _emit("reshape", out, [x], lambda g: [g.reshape(x.shape)])


def custom_op(out_data, inputs, backward_fn, name="custom") -> Tensor:
    """Extension hook for module-specific primitives (e.g. convolution).

    `backward_fn(g)` must return one gradient (or None) per input, in order.
    """
    return _emit(name, np.asarray(out_data, dtype=np.float64),
                 [as_tensor(t) for t in inputs], backward_fn)


# Registry of differentiable primitives, keyed by op kind. Ops taking extra
# non-tensor configuration appear with their test-friendly default.
PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "sum": tsum,
    "mean": tmean,
    "square": square,
    "sqrt": sqrt,
    "abs": tabs,
    "max_const": max_const,
    "relu": relu,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "sin": sin,
    "cos": cos,
    "concat": concat,
    "slice": slice_last,
    "layer_norm": layer_norm,
    "scale": scale,
    "reshape": reshape,
}


def forward_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by kind name (dispatch table for gradient checks)."""
    if kind not in PRIMITIVES:
        raise KeyError(f"unknown primitive: {kind}")
    return PRIMITIVES[kind](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# parameter store + Adam
# ---------------------------------------------------------------------------

@dataclass
class ParamEntry:
    value: np.ndarray
    grad: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray


class ParamStore:
    """Named parameters with Adam state; names are unique, insertion-ordered."""

    def __init__(self):
        self.entries: dict[str, ParamEntry] = {}
        self.step_count: int = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.entries:
            raise ValueError(f"duplicate parameter name: {name}")
        v = np.asarray(value, dtype=np.float64)
        self.entries[name] = ParamEntry(
            value=v, grad=np.zeros_like(v),
            adam_m=np.zeros_like(v), adam_v=np.zeros_like(v))

    def __contains__(self, name):
        return name in self.entries

    def __getitem__(self, name) -> ParamEntry:
        return self.entries[name]

    def names(self):
        return list(self.entries)

    def num_params(self) -> int:
        return sum(e.value.size for e in self.entries.values())

    def zero_grads(self) -> None:
        for e in self.entries.values():
            e.grad[...] = 0.0

    def watch_all(self, tape: Tape) -> dict[str, Tensor]:
        """Register every parameter as a leaf on `tape`."""
        return {name: tape.leaf(e.value) for name, e in self.entries.items()}

    def accumulate_grads(self, params: dict[str, Tensor],
                         grads: dict[int, np.ndarray]) -> None:
        """Pull gradients out of a backward pass into the store."""
        for name, t in params.items():
            g = grads.get(t.node)
            if g is not None:
                self.entries[name].grad += g


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """Standard Adam with bias correction; zeroes grads, bumps step_count."""
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, e in store.entries.items():
        if not np.all(np.isfinite(e.grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        e.adam_m[...] = beta1 * e.adam_m + (1.0 - beta1) * e.grad
        e.adam_v[...] = beta2 * e.adam_v + (1.0 - beta2) * e.grad ** 2
        m_hat = e.adam_m / c1
        v_hat = e.adam_v / c2
        e.value[...] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    store.zero_grads()
    return store


def finite_difference_gradient(f, store: ParamStore, h: float = 1e-4
                               ) -> dict[str, np.ndarray]:
    """Central-difference gradient of a scalar function of the store.

    Test oracle only: O(#params) evaluations of `f`.
    """
    if h <= 0:
        raise ValueError("finite_difference_gradient: h must be positive")
    out = {}
    for name, e in store.entries.items():
        g = np.zeros_like(e.value)
        flat = e.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(store)
            flat[i] = orig - h
            fm = f(store)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = g
    return out


# ---------------------------------------------------------------------------
# serialization: flat binary container
# ---------------------------------------------------------------------------
#
# Layout (little-endian):
#   magic  8 bytes  b"TARSCKPT"
#   version u32
#   entry count u32
#   per entry:
#     name length u32, name bytes (UTF-8)
#     shape rank u32, extents u64 * rank
#     value f64 * n, adam_m f64 * n, adam_v f64 * n
#   step_count u64

MAGIC = b"TARSCKPT"
FORMAT_VERSION = 1


def save_param_store(store: ParamStore, path) -> None:
    with open(path, "wb") as fh:
        _write_store(fh, store)


def load_param_store(path) -> ParamStore:
    with open(path, "rb") as fh:
        store = _read_store(fh)
        if fh.read(1):
            raise ValueError(f"trailing bytes in {path}")
    return store


def save_param_stores(stores: dict[str, ParamStore], path) -> None:
    """Multiple named stores in one file (count-prefixed sequence)."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(stores)))
        for name, store in stores.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            _write_store(fh, store)


def load_param_stores(path) -> dict[str, ParamStore]:
    stores = {}
    with open(path, "rb") as fh:
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            stores[name] = _read_store(fh)
        if fh.read(1):
            raise ValueError(f"trailing bytes in {path}")
    return stores


def _write_store(fh, store: ParamStore) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<II", FORMAT_VERSION, len(store.entries)))
    for name, e in store.entries.items():
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        shape = e.value.shape
        fh.write(struct.pack("<I", len(shape)))
        for extent in shape:
            fh.write(struct.pack("<Q", extent))
        for arr in (e.value, e.adam_m, e.adam_v):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    fh.write(struct.pack("<Q", store.step_count))


def _read_store(fh) -> ParamStore:
    magic = fh.read(8)
    if magic != MAGIC:
        raise ValueError(f"bad checkpoint magic: {magic!r}")
    version, count = struct.unpack("<II", fh.read(8))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    store = ParamStore()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", fh.read(4))
        name = fh.read(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        bufs = []
        for _ in range(3):
            bufs.append(np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).copy())
        store.add(name, bufs[0])
        store.entries[name].adam_m[...] = bufs[1]
        store.entries[name].adam_v[...] = bufs[2]
    (store.step_count,) = struct.unpack("<Q", fh.read(8))
    return store
