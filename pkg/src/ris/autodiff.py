"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is define-by-run: every op on a :class:`Tensor` that requires a
gradient records its parents and a closure mapping the upstream gradient to
parent gradients. :func:`backward` walks that graph once in reverse
topological order and accumulates into the ``grad`` buffers of the leaves.

Also here: MLP construction/evaluation, Adam, Polyak averaging and the
``RIS1`` checkpoint format.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, NonFiniteError, UsageError

DTYPE = np.float64


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    t = Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)
    t.grad = np.zeros_like(t.data)
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


# --- elementwise binary ops ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _make(out, (a, b), bw)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _make(out, (a, b), bw)


def logaddexp(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.logaddexp(a.data, b.data)

    def bw(g):
        return (
            _unbroadcast(g * np.exp(a.data - out), a.shape),
            _unbroadcast(g * np.exp(b.data - out), b.shape),
        )

    return _make(out, (a, b), bw)


# --- unary ops -------------------------------------------------------------


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data**exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping was active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# --- reductions and shape ops ----------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def logsumexp(a, axis: int) -> Tensor:
    """Max-shifted log-sum-exp along ``axis`` (axis is removed)."""
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)

    def bw(g):
        return (np.expand_dims(g, axis) * shifted / s,)

    return _make(out, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ConfigurationError("matmul supports 2-D operands only")
    out = a.data @ b.data
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, weight, bias) -> Tensor:
    """Fused ``x @ weight + bias`` for a (batch, fan_in) input."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    out = x.data @ weight.data
    out += bias.data

    def bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, (x, weight, bias), bw)


# --- backward pass ---------------------------------------------------------


def _topological_order(root: Tensor) -> list:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Gradients accumulate across calls; callers reset with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --- parameter containers --------------------------------------------------


class ParameterSet:
    """Named, ordered collection of parameter tensors."""

    def __init__(self, items: Iterable[tuple] = ()):
        self._items: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, t in items:
            self.add(name, t)

    def add(self, name: str, tensor) -> Tensor:
        if name in self._items:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        if not isinstance(tensor, Tensor):
            tensor = parameter(tensor, name=name)
        tensor.name = name
        self._items[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list:
        return list(self._items)

    def items(self):
        return self._items.items()

    def tensors(self) -> list:
        return list(self._items.values())

    def zero_grad(self) -> None:
        for t in self._items.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            else:
                t.grad.fill(0.0)

    def copy(self) -> "ParameterSet":
        """Deep copy as fresh trainable parameters."""
        return ParameterSet((n, parameter(t.data.copy())) for n, t in self._items.items())

    def detached(self) -> "ParameterSet":
        """Constant view sharing storage; gradients never reach the originals."""
        return ParameterSet((n, Tensor(t.data, name=n)) for n, t in self._items.items())

    def prefixed(self, prefix: str) -> "ParameterSet":
        return ParameterSet((prefix + n, t) for n, t in self._items.items())

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data.copy()) for n, t in self._items.items())

    def load_state(self, arrays) -> None:
        for name, t in self._items.items():
            if name not in arrays:
                raise ConfigurationError(f"missing tensor {name!r}")
            src = np.asarray(arrays[name], dtype=DTYPE)
            if src.shape != t.shape:
                raise ConfigurationError(f"tensor {name!r}: expected shape {t.shape}, got {src.shape}")
            t.data[...] = src


def _check_matching(target: ParameterSet, online: ParameterSet) -> None:
    if target.names() != online.names():
        raise ConfigurationError(f"parameter names differ: {target.names()} vs {online.names()}")
    for name in target:
        if target[name].shape != online[name].shape:
            raise ConfigurationError(
                f"tensor {name!r}: shape {target[name].shape} vs {online[name].shape}"
            )


def polyak_update(target: ParameterSet, online: ParameterSet, tau: float) -> ParameterSet:
    """target <- tau * online + (1 - tau) * target, in place."""
    _check_matching(target, online)
    for name, t in target.items():
        t.data *= 1.0 - tau
        t.data += tau * online[name].data
    return target


# --- MLPs ------------------------------------------------------------------

ACTIVATIONS = {"relu": relu, "tanh": tanh}
_NUMPY_ACTIVATIONS = {"relu": lambda x: np.maximum(x, 0.0), "tanh": np.tanh}


def init_mlp(sizes: Sequence[int], rng: np.random.Generator) -> ParameterSet:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases; ``sizes`` includes input and output widths."""
    params = ParameterSet()
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        params.add(f"l{i}.weight", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.add(f"l{i}.bias", np.zeros(fan_out))
    return params


def mlp_layer_sizes(params: ParameterSet) -> list:
    """Recover [in, hidden..., out] widths from the weight shapes."""
    sizes = []
    i = 0
    while f"l{i}.weight" in params:
        w = params[f"l{i}.weight"]
        if not sizes:
            sizes.append(w.shape[0])
        elif w.shape[0] != sizes[-1]:
            raise ConfigurationError(f"layer l{i}: fan_in {w.shape[0]} != previous width {sizes[-1]}")
        sizes.append(w.shape[1])
        i += 1
    if not sizes:
        raise ConfigurationError("parameter set has no l0.weight")
    return sizes


def _check_mlp(params: ParameterSet, width: int, hidden_sizes) -> int:
    sizes = mlp_layer_sizes(params)
    if hidden_sizes is not None and list(sizes[1:-1]) != list(hidden_sizes):
        raise ConfigurationError(f"hidden sizes {sizes[1:-1]} != requested {list(hidden_sizes)}")
    if width != sizes[0]:
        raise ConfigurationError(f"input width {width} != first layer fan_in {sizes[0]}")
    return len(sizes) - 1


def mlp_forward(params: ParameterSet, x, hidden_sizes=None, activation: str = "relu") -> Tensor:
    """Affine-activation chain with a linear output layer; records a graph."""
    x = as_tensor(x)
    n_layers = _check_mlp(params, x.shape[-1], hidden_sizes)
    act = ACTIVATIONS[activation]
    h = x
    for i in range(n_layers):
        h = linear(h, params[f"l{i}.weight"], params[f"l{i}.bias"])
        if i < n_layers - 1:
            h = act(h)
    return h


def mlp_apply(params: ParameterSet, x: np.ndarray, activation: str = "relu") -> np.ndarray:
    """Graph-free forward pass, bitwise identical to :func:`mlp_forward`.

    Leading axes are flattened so every layer is a single 2-D GEMM.
    """
    x = np.asarray(x, dtype=DTYPE)
    n_layers = _check_mlp(params, x.shape[-1], None)
    lead = x.shape[:-1]
    h = x.reshape(-1, x.shape[-1])
    for i in range(n_layers):
        h = h @ params[f"l{i}.weight"].data
        h += params[f"l{i}.bias"].data
        if i < n_layers - 1:
            if activation == "relu":
                np.maximum(h, 0.0, out=h)
            else:
                h = _NUMPY_ACTIVATIONS[activation](h)
    return h.reshape(lead + (h.shape[-1],))


# --- optimisation ----------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a ParameterSet; reads gradients from ``.grad``."""

    def __init__(self, params: ParameterSet, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self) -> None:
        bad = [n for n, t in self.params.items() if t.grad is not None and not np.all(np.isfinite(t.grad))]
        if bad:
            raise NonFiniteError(f"non-finite gradient in {bad}; Adam step skipped at t={self.t}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(params: ParameterSet, adam: Adam) -> ParameterSet:
    adam.step()
    return params


# --- checkpoints -----------------------------------------------------------

MAGIC = b"RIS1"
FORMAT_VERSION = 1


def encode_checkpoint(arrays) -> bytes:
    """Serialize an ordered name -> array mapping in the RIS1 layout."""
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, arr in arrays.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype=DTYPE)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if blob[:4] != MAGIC:
        raise ConfigurationError("not a RIS1 checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {version}")
    pos = 8
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(DTYPE).reshape(dims)
            pos += 8 * count
            if name in out:
                raise ConfigurationError(f"duplicate tensor {name!r} in checkpoint")
            out[name] = arr
    except (struct.error, ValueError) as exc:
        raise ConfigurationError(f"truncated checkpoint at byte {pos}") from exc
    if pos != len(blob):
        raise ConfigurationError("truncated checkpoint payload")
    return out


def save_checkpoint(path, params: ParameterSet) -> None:
    Path(path).write_bytes(encode_checkpoint(OrderedDict(params.items())))


def load_checkpoint(path) -> ParameterSet:
    arrays = decode_checkpoint(Path(path).read_bytes())
    return ParameterSet((n, parameter(a)) for n, a in arrays.items())
