"""Tensor-level reverse-mode autodiff with dense layers, layer norm and Adam.

Every op records its parents and a closure mapping the output gradient to
parent gradients.  ``backward`` walks the recorded graph in reverse
topological order.  Arrays are float64 throughout; the networks in this
package are small enough that precision matters more than throughput.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5
ADAM_EPS = 1e-8

_node_ids = itertools.count()


class ConfigurationError(ValueError):
    """Inconsistent shapes, options or file contents."""


class StateError(RuntimeError):
    """Operation called in the wrong lifecycle state."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity showed up where a finite number is required."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "id", "name", "_parents", "_tracked", "_backward")
    # make ``ndarray <op> Tensor`` dispatch to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.id = next(_node_ids)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        # which parents required grad when this node was built
        self._tracked: tuple[bool, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}, shape={self.shape}{label})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ConfigurationError(f"node {self.id} ({self.op}) has shape {self.shape}, expected a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward_fn) -> Tensor:
    out = Tensor(data, op=op)
    tracked = tuple(p.requires_grad for p in parents)
    if any(tracked):
        out.requires_grad = True
        out._parents = parents
        out._tracked = tracked
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigurationError(
            f"{op}: cannot broadcast node {a.id} {a.shape} with node {b.id} {b.shape}"
        ) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _node(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _node(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _node(a.data * b.data, (a, b), "mul", lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _node(out, (a, b), "div", lambda g: (g / b.data, -g * out / b.data))


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data**exponent, (a,), "pow", lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), "relu", lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _node(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def softplus(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _node(np.logaddexp(0.0, a.data), (a,), "softplus", lambda g: (g * _sigmoid(a.data),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside ``[lo, hi]``."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), "clip", lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("minimum", a, b)
    take_a = a.data <= b.data
    return _node(
        np.where(take_a, a.data, b.data), (a, b), "minimum", lambda g: (g * take_a, g * ~take_a)
    )


# ---------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul: node {a.id} {a.shape} @ node {b.id} {b.shape}")
    return _node(a.data @ b.data, (a, b), "matmul", lambda g: (g @ b.data.T, a.data.T @ g))


def dense(x, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` as one node."""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ConfigurationError(
            f"dense: node {x.id} has shape {x.shape}, weight {weight.name or weight.id} expects "
            f"(*, {weight.shape[0]})"
        )

    need_x, need_w, need_b = x.requires_grad, weight.requires_grad, bias.requires_grad

    def back(g):
        return (g @ weight.data.T if need_x else None,
                x.data.T @ g if need_w else None,
                g.sum(axis=0) if need_b else None)

    return _node(x.data @ weight.data + bias.data, (x, weight, bias), "dense", back)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _node(out, (a,), "sum", back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ConfigurationError(f"reshape: node {a.id} {a.shape} -> {shape}") from None
    return _node(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        shapes = ", ".join(f"node {t.id} {t.shape}" for t in ts)
        raise ConfigurationError(f"concat: incompatible {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _node(out, ts, "concat", lambda g: tuple(np.split(g, bounds, axis=axis)))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), "softmax", back)


def cumsum(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)

    def back(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _node(np.cumsum(a.data, axis=axis), (a,), "cumsum", back)


def layer_norm(x, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x = as_tensor(x)
    if x.shape[-1] != gain.shape[-1]:
        raise ConfigurationError(f"layer_norm: node {x.id} {x.shape} vs gain {gain.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    need_gain, need_bias = gain.requires_grad, bias.requires_grad

    def back(g):
        gx = g * gain.data
        dx = inv_std * (
            gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        return (dx, _unbroadcast(g * xhat, gain.shape) if need_gain else None,
                _unbroadcast(g, bias.shape) if need_bias else None)

    return _node(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm", back)


def quantile_huber(delta, tau, kappa: float) -> Tensor:
    """Elementwise asymmetric Huber loss ``|tau - 1{delta<0}| * L_kappa(delta) / kappa``.

    ``tau`` is a constant array broadcastable against ``delta``.
    """
    delta = as_tensor(delta)
    tau = np.asarray(tau, dtype=DTYPE)
    d = delta.data
    absd = np.abs(d)
    weight = np.abs(tau - (d < 0))
    inner = absd <= kappa
    huber = np.where(inner, 0.5 * d * d, kappa * (absd - 0.5 * kappa))
    out = weight * huber / kappa

    def back(g):
        return (g * weight * np.clip(d, -kappa, kappa) / kappa,)

    return _node(out, (delta,), "quantile_huber", back)


# ---------------------------------------------------------------- graph


@dataclass
class Graph:
    """Topologically ordered record of the ops feeding one output."""

    nodes: list[Tensor] = field(default_factory=list)

    @property
    def records(self) -> list[tuple[str, tuple[int, ...], int]]:
        return [(n.op, tuple(p.id for p in n._parents), n.id) for n in self.nodes]


def trace(output: Tensor) -> Graph:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for parent, tracked in zip(node._parents, node._tracked):
            if tracked and parent.id not in seen:
                stack.append((parent, False))
    return Graph(order)


def backward(loss: Tensor) -> Graph:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.size != 1:
        raise ConfigurationError(f"backward: node {loss.id} has shape {loss.shape}, expected scalar")
    if not loss.requires_grad:
        raise StateError("backward: loss is not attached to a recorded forward graph")
    graph = trace(loss)
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, tracked, pg in zip(node._parents, node._tracked, node._backward(g)):
            if pg is None or not tracked:
                continue
            pg = _unbroadcast(np.asarray(pg), parent.shape)
            prev = grads.get(parent.id)
            grads[parent.id] = pg if prev is None else prev + pg
    return graph


# ---------------------------------------------------------------- modules


class Module:
    """Container that discovers parameters and submodules from its attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> Module:
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) ^ set(state))
            raise ConfigurationError(f"state dict keys differ: {missing[:5]}")
        for k, p in own.items():
            value = np.asarray(state[k], dtype=DTYPE)
            if value.shape != p.shape:
                raise ConfigurationError(f"{k}: shape {value.shape} != {p.shape}")
            p.data = value.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Dense(Module):
    """Fully connected layer with uniform fan-in initialization."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.bias = Parameter(rng.uniform(-bound, bound, size=(n_out,)))

    def __call__(self, x) -> Tensor:
        return dense(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = LAYER_NORM_EPS):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


def copy_parameters(target: Module, source: Module) -> None:
    target.load_state_dict(source.state_dict())


def polyak_update(target: Module, source: Module, rate: float) -> None:
    """``target <- rate * source + (1 - rate) * target``.

    Written as an increment so identical tensors stay bit-identical.
    """
    if not 0.0 < rate <= 1.0:
        raise ConfigurationError(f"soft update rate must be in (0, 1], got {rate}")
    for (_, t), (_, s) in zip(target.named_parameters(), source.named_parameters()):
        if rate == 1.0:
            t.data = s.data.copy()
        else:
            t.data = t.data + rate * (s.data - t.data)


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction.

    A step is rejected as a whole if any gradient is non-finite; the
    offending parameter name is reported and no parameter moves.
    """

    def __init__(
        self,
        named_params: Iterable[tuple[str, Tensor]],
        lr: float = 3e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = ADAM_EPS,
    ):
        self.params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = []
        for name, p in self.params:
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if g.shape != p.shape:
                raise ConfigurationError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {name}; update rejected")
            grads.append(g)
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for (_, p), g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"step": np.array(self.step_count)}
        for (name, _), m, v in zip(self.params, self.m, self.v):
            out[f"m.{name}"] = m.copy()
            out[f"v.{name}"] = v.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step"])
        for i, (name, _) in enumerate(self.params):
            self.m[i] = np.array(state[f"m.{name}"], dtype=DTYPE)
            self.v[i] = np.array(state[f"v.{name}"], dtype=DTYPE)
