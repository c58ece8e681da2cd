"""Minimal define-by-run reverse-mode autodiff over dense float64 arrays.

Every other learner in the package (policy, critic, discriminator, posteriors)
is a ``ParamNet`` pushed through ``forward_mlp`` and differentiated with
``backward``.  Inputs are batched row-wise: a (n, d) array is n samples.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class ConfigError(ValueError):
    """Raised on shape/configuration mismatches."""


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class Node:
    __slots__ = ("value", "grad", "op", "parents", "name", "_backward")

    def __init__(self, value, op="const", parents=(), backward=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.op = op
        self.parents = parents
        self.name = name
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

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
        return neg(self)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Node(a.value + b.value, "add", (a, b), bw)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return Node(a.value - b.value, "sub", (a, b), bw)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return Node(a.value * b.value, "mul", (a, b), bw)


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def bw(g):
        return (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.shape),
        )

    return Node(a.value / b.value, "div", (a, b), bw)


def neg(a) -> Node:
    a = as_node(a)
    return Node(-a.value, "neg", (a,), lambda g: (-g,))


def scale(a, k: float) -> Node:
    a = as_node(a)
    return Node(a.value * k, "scale", (a,), lambda g: (g * k,))


def matmul(x, w) -> Node:
    """(n, i) @ (i, o); also accepts a single vector (i,)."""
    x, w = as_node(x), as_node(w)

    def bw(g):
        if x.value.ndim == 1:
            return g @ w.value.T, np.outer(x.value, g)
        return g @ w.value.T, x.value.T @ g

    return Node(x.value @ w.value, "matmul", (x, w), bw)


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return Node(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Node:
    a = as_node(a)
    out = _sigmoid(a.value)
    return Node(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def softplus(a) -> Node:
    """log(1 + exp(a)), numerically stable."""
    a = as_node(a)
    out = np.logaddexp(0.0, a.value)
    return Node(out, "softplus", (a,), lambda g: (g * _sigmoid(a.value),))


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return Node(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Node:
    a = as_node(a)
    return Node(np.log(a.value), "log", (a,), lambda g: (g / a.value,))


def square(a) -> Node:
    a = as_node(a)
    return Node(a.value * a.value, "square", (a,), lambda g: (2.0 * g * a.value,))


def clip(a, lo: float, hi: float) -> Node:
    """Clamp; gradient passes only where the input is inside [lo, hi]."""
    a = as_node(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return Node(np.clip(a.value, lo, hi), "clip", (a,), lambda g: (g * inside,))


def minimum(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    pick_a = a.value <= b.value

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return Node(np.minimum(a.value, b.value), "minimum", (a, b), bw)


def total(a, axis=None) -> Node:
    """Sum over ``axis`` (all axes when None)."""
    a = as_node(a)
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Node(a.value.sum(axis=axis), "sum", (a,), bw)


def mean(a, axis=None) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else a.shape[axis]
    return scale(total(a, axis), 1.0 / n)


def concat(parts, axis=-1) -> Node:
    nodes = [as_node(p) for p in parts]
    sizes = [p.shape[axis] for p in nodes]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Node(np.concatenate([p.value for p in nodes], axis=axis), "concat", tuple(nodes), bw)


def take_cols(a, start: int, stop: int) -> Node:
    """Column slice a[:, start:stop] (or a[start:stop] for vectors)."""
    a = as_node(a)

    def bw(g):
        out = np.zeros_like(a.value)
        out[..., start:stop] = g
        return (out,)

    return Node(a.value[..., start:stop], "slice", (a,), bw)


def log_softmax(logits) -> Node:
    logits = as_node(logits)
    z = logits.value
    out = z - np.logaddexp.reduce(z, axis=-1, keepdims=True)
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return Node(out, "log_softmax", (logits,), bw)


def gather(a, index) -> Node:
    """Pick a[i, index[i]] for each row i."""
    a = as_node(a)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def bw(g):
        out = np.zeros_like(a.value)
        out[rows, index] = g
        return (out,)

    return Node(a.value[rows, index], "gather", (a,), bw)


def huber(err, delta: float) -> Node:
    """Elementwise Huber penalty of a residual."""
    err = as_node(err)
    e = err.value
    quad = np.abs(e) < delta
    out = np.where(quad, 0.5 * e * e, delta * np.abs(e) - 0.5 * delta * delta)

    def bw(g):
        return (g * np.where(quad, e, delta * np.sign(e)),)

    return Node(out, "huber", (err,), bw)


def grl(x, lambda_grl: float) -> Node:
    """Gradient reversal: identity forward, upstream gradient times -lambda backward."""
    if lambda_grl < 0:
        raise ConfigError("lambda_grl must be >= 0")
    x = as_node(x)
    return Node(x.value, "grl", (x,), lambda g: (-lambda_grl * g,))


def stop_gradient(x) -> Node:
    return Node(as_node(x).value, "stop")


# ---------------------------------------------------------------------------
# backward


def _toposort(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node, nets=()) -> dict[str, np.ndarray]:
    """Backpropagate a scalar loss and return gradients keyed by parameter name.

    Leaves created by ``ParamNet.node`` carry their parameter name; repeated
    uses of one parameter accumulate.  Parameters of ``nets`` that the loss
    does not reach get zero gradients.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    grads: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = node.grad
        if g is None:
            g = node.grad = np.zeros_like(node.value)
        if node._backward is not None:
            for parent, pg in zip(node.parents, node._backward(g)):
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=np.float64)
                else:
                    parent.grad = parent.grad + pg
        if node.name is not None:
            if node.name in grads:
                grads[node.name] = grads[node.name] + g
            else:
                grads[node.name] = np.array(g, dtype=np.float64)
    for net in nets:
        for name, arr in net.entries.items():
            grads.setdefault(name, np.zeros_like(arr))
    return grads


# ---------------------------------------------------------------------------
# parameter containers and layers

ACTIVATIONS = {"tanh": tanh, "linear": None, "sigmoid": sigmoid}


@dataclass
class ParamNet:
    """Named float64 arrays plus the MLP layout they implement.

    ``sizes`` lists layer widths input-first; ``activations`` has one tag per
    weight layer.  Extra entries (e.g. a Gaussian ``log_std``) may be added
    to ``entries`` and are ignored by ``forward_mlp``.
    """

    entries: dict[str, np.ndarray]
    sizes: list[int]
    activations: list[str]
    prefix: str = ""

    def node(self, key: str) -> Node:
        name = self.prefix + key
        return Node(self.entries[name], "param", name=name)

    def copy(self) -> "ParamNet":
        return ParamNet({k: v.copy() for k, v in self.entries.items()}, list(self.sizes),
                        list(self.activations), self.prefix)

    def load_from(self, other: "ParamNet") -> None:
        for k in self.entries:
            self.entries[k] = other.entries[k].copy()

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.entries.values())


def init_mlp(sizes, rng, activations=None, prefix="", zero=False) -> ParamNet:
    """Glorot-uniform weights, zero biases; tanh hidden layers, linear output by default."""
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2:
        raise ConfigError("an MLP needs at least input and output widths")
    if activations is None:
        activations = ["tanh"] * (len(sizes) - 2) + ["linear"]
    if len(activations) != len(sizes) - 1:
        raise ConfigError("one activation per weight layer required")
    entries = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = np.zeros((fan_in, fan_out)) if zero else rng.uniform(-limit, limit, (fan_in, fan_out))
        entries[f"{prefix}W{i}"] = w
        entries[f"{prefix}b{i}"] = np.zeros(fan_out)
    return ParamNet(entries, sizes, list(activations), prefix)


def forward_mlp(net: ParamNet, x) -> Node:
    x = as_node(x)
    if x.shape[-1] != net.sizes[0]:
        raise ConfigError(
            f"{net.prefix or 'net'} layer 0 expects input width {net.sizes[0]}, got {x.shape[-1]}"
        )
    h = x
    for i, act in enumerate(net.activations):
        w = net.node(f"W{i}")
        if h.shape[-1] != w.shape[0]:
            raise ConfigError(f"{net.prefix or 'net'} layer {i}: width {h.shape[-1]} != {w.shape[0]}")
        h = add(matmul(h, w), net.node(f"b{i}"))
        fn = ACTIVATIONS[act]
        if fn is not None:
            h = fn(h)
    return h


def mlp_numpy(net: ParamNet, x: np.ndarray) -> np.ndarray:
    """Graph-free forward pass for rollouts and evaluation."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != net.sizes[0]:
        raise ConfigError(
            f"{net.prefix or 'net'} layer 0 expects input width {net.sizes[0]}, got {h.shape[-1]}"
        )
    for i, act in enumerate(net.activations):
        h = h @ net.entries[f"{net.prefix}W{i}"] + net.entries[f"{net.prefix}b{i}"]
        if act == "tanh":
            h = np.tanh(h)
        elif act == "sigmoid":
            h = _sigmoid(h)
    return h


# ---------------------------------------------------------------------------
# Gaussian head


def gaussian_head(net_output, log_std):
    """Return (mean, std) nodes; std = exp(log_std) > 0."""
    net_output, log_std = as_node(net_output), as_node(log_std)
    if log_std.shape[-1] != net_output.shape[-1]:
        raise ConfigError("log_std must match the mean width")
    return net_output, exp(log_std)


def gaussian_logp(x, mean, log_std) -> Node:
    """Diagonal Gaussian log-density summed over the last axis."""
    x, mean, log_std = as_node(x), as_node(mean), as_node(log_std)
    z = div(sub(x, mean), exp(log_std))
    per_dim = sub(scale(square(z), -0.5), add(log_std, 0.5 * LOG_2PI))
    return total(per_dim, axis=-1)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(net, grads: dict, state: AdamState, max_grad_norm: float | None = None):
    """Apply one Adam update in place to the parameters named in ``grads``.

    ``net`` may be one ParamNet or a sequence of them.  Nothing is modified if
    any gradient is non-finite.
    """
    nets = [net] if isinstance(net, ParamNet) else list(net)
    owners = {}
    for n in nets:
        for name in n.entries:
            owners[name] = n
    for name, g in grads.items():
        if name in owners and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    used = [name for name in grads if name in owners]
    coef = 1.0
    if max_grad_norm is not None:
        norm = math.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in used))
        if norm > max_grad_norm:
            coef = max_grad_norm / (norm + 1e-12)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1, bc2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name in used:
        g = grads[name] * coef
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        owners[name].entries[name] = owners[name].entries[name] - update
    return net, state


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"ADAILCK1"


def save_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    """Write arrays as little-endian float32 in the ADAILCK1 layout."""
    chunks = [MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    (count,) = struct.unpack_from("<I", data, 8)
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        out[name] = arr.astype(np.float64)
    return out


def save_net(path, net: ParamNet) -> None:
    save_checkpoint(path, net.entries)


def load_net(path, activations=None, prefix="") -> ParamNet:
    """Rebuild a ParamNet from a checkpoint; layer widths come from the W shapes."""
    entries = load_checkpoint(path)
    sizes = []
    i = 0
    while f"{prefix}W{i}" in entries:
        w = entries[f"{prefix}W{i}"]
        if not sizes:
            sizes.append(w.shape[0])
        sizes.append(w.shape[1])
        i += 1
    if activations is None:
        activations = ["tanh"] * (i - 1) + ["linear"]
    return ParamNet(entries, sizes, list(activations), prefix)
