"""Small reverse-mode autodiff on numpy arrays, plus the layers the models need.

A :class:`Value` wraps a float64 array.  Operations between values record a
backward closure when gradients are enabled and at least one operand requires
a gradient; :meth:`Value.backward` walks the recorded graph in reverse
topological order, visiting each node once.
"""

from __future__ import annotations

import base64
import contextlib
import json
import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

CHECKPOINT_FORMAT = "blockprog-params"
CHECKPOINT_VERSION = 1

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Value:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Value, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _result(data, parents: Sequence["Value"], backward: Callable) -> "Value":
        out = Value(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Value(shape={self.shape}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Value":
        return Value(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic ------------------------------------------------------------
    def __add__(self, other) -> "Value":
        other = lift(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Value._result(a.data + b.data, (a, b), back)

    __radd__ = __add__

    def __neg__(self) -> "Value":
        return Value._result(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Value":
        return self + (-lift(other))

    def __rsub__(self, other) -> "Value":
        return lift(other) + (-self)

    def __mul__(self, other) -> "Value":
        other = lift(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Value._result(a.data * b.data, (a, b), back)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Value":
        other = lift(other)
        a, b = self, other

        def back(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return Value._result(a.data / b.data, (a, b), back)

    def __rtruediv__(self, other) -> "Value":
        return lift(other) / self

    def __pow__(self, k: float) -> "Value":
        a = self

        def back(g):
            return (g * k * a.data ** (k - 1),)

        return Value._result(a.data**k, (a,), back)

    def __matmul__(self, other) -> "Value":
        other = lift(other)
        a, b = self, other
        if a.ndim > 2 or b.ndim > 2:
            raise ValueError("matmul supports vectors and matrices only")

        def back(g):
            ad, bd = a.data, b.data
            if ad.ndim == 1 and bd.ndim == 1:
                return g * bd, g * ad
            if ad.ndim == 1:
                return bd @ g, np.outer(ad, g)
            if bd.ndim == 1:
                return np.outer(g, bd), ad.T @ g
            return g @ bd.T, ad.T @ g

        try:
            out = a.data @ b.data
        except ValueError as exc:
            raise ValueError(f"shape mismatch in matmul: {a.shape} @ {b.shape}") from exc
        return Value._result(out, (a, b), back)

    def __rmatmul__(self, other) -> "Value":
        return lift(other) @ self

    def __getitem__(self, idx) -> "Value":
        a = self

        def back(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            return (full,)

        return Value._result(a.data[idx], (a,), back)

    # -- reductions and reshaping ---------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Value":
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Value._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Value":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Value":
        a = self
        return Value._result(a.data.reshape(*shape), (a,), lambda g: (g.reshape(a.shape),))

    @property
    def T(self) -> "Value":
        a = self
        return Value._result(a.data.T, (a,), lambda g: (g.T,))

    # -- elementwise functions --------------------------------------------------
    def tanh(self) -> "Value":
        t = np.tanh(self.data)
        return Value._result(t, (self,), lambda g: (g * (1.0 - t * t),))

    def sigmoid(self) -> "Value":
        s = _sigmoid(self.data)
        return Value._result(s, (self,), lambda g: (g * s * (1.0 - s),))

    def relu(self) -> "Value":
        a = self
        return Value._result(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))

    def exp(self) -> "Value":
        e = np.exp(self.data)
        return Value._result(e, (self,), lambda g: (g * e,))

    def log(self) -> "Value":
        a = self
        return Value._result(np.log(a.data), (a,), lambda g: (g / a.data,))

    def abs(self) -> "Value":
        a = self
        return Value._result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))

    def sqrt(self) -> "Value":
        r = np.sqrt(self.data)
        return Value._result(r, (self,), lambda g: (g * 0.5 / r,))

    def clip(self, lo: float, hi: float) -> "Value":
        a = self
        inside = (a.data >= lo) & (a.data <= hi)
        return Value._result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))

    # -- backprop ------------------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every reachable node that requires one."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order: list[Value] = []
        seen: set[int] = set()
        stack: list[tuple[Value, bool]] = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def lift(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_np(x) -> np.ndarray:
    return _sigmoid(_as_array(x))


# -- n-ary functions ---------------------------------------------------------------


def concat(values: Sequence[Value], axis: int = 0) -> Value:
    values = [lift(v) for v in values]
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Value._result(np.concatenate([v.data for v in values], axis=axis), values, back)


def stack(values: Sequence[Value], axis: int = 0) -> Value:
    values = [lift(v) for v in values]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(values)))

    return Value._result(np.stack([v.data for v in values], axis=axis), values, back)


def minimum(a, b) -> Value:
    a, b = lift(a), lift(b)
    take_a = a.data <= b.data

    def back(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return Value._result(np.minimum(a.data, b.data), (a, b), back)


def maximum(a, b) -> Value:
    a, b = lift(a), lift(b)
    take_a = a.data >= b.data

    def back(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return Value._result(np.maximum(a.data, b.data), (a, b), back)


def where(cond, a, b) -> Value:
    cond = np.asarray(cond, dtype=bool)
    a, b = lift(a), lift(b)

    def back(g):
        return _unbroadcast(g * cond, a.shape), _unbroadcast(g * ~cond, b.shape)

    return Value._result(np.where(cond, a.data, b.data), (a, b), back)


def log_softmax(x: Value, axis: int = -1, mask=None) -> Value:
    """Log-softmax along ``axis``; entries where ``mask`` is False get ~zero mass."""
    x = lift(x)
    if mask is not None:
        x = where(mask, x, -1e30)
    shift = x.data.max(axis=axis, keepdims=True)
    z = x.data - shift
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Value._result(out, (x,), back)


def softmax(x: Value, axis: int = -1, mask=None) -> Value:
    x = lift(x)
    if mask is not None:
        x = where(mask, x, -1e30)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Value._result(s, (x,), back)


# -- layers ----------------------------------------------------------------------------


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> dict[str, Value]:
        out: dict[str, Value] = {}
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Value) and val.requires_grad:
                out[path] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(path + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{path}.{i}."))
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{path}.{k}."))
        return out

    def parameters(self) -> list[Value]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = _as_array(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()


def param(data, name: str | None = None) -> Value:
    return Value(data, requires_grad=True, name=name)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


ACTIVATIONS: dict[str, Callable[[Value], Value]] = {
    "tanh": Value.tanh,
    "relu": Value.relu,
    "identity": lambda v: v,
    "sigmoid": Value.sigmoid,
}


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, activation: str = "identity"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.W = param(_uniform(rng, n_in, (n_in, n_out)))
        self.b = param(np.zeros(n_out))
        self.activation = activation

    def __call__(self, x) -> Value:
        x = lift(x)
        if x.shape[-1] != self.W.shape[0]:
            raise ValueError(f"expected input width {self.W.shape[0]}, got {x.shape[-1]}")
        return ACTIVATIONS[self.activation](x @ self.W + self.b)


class DenseNet(Module):
    """Feed-forward stack; ``widths`` includes input and output sizes."""

    def __init__(self, widths: Sequence[int], activations: Sequence[str] | str, rng: np.random.Generator):
        widths = list(widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError(f"bad layer widths {widths}")
        if isinstance(activations, str):
            activations = [activations] * (len(widths) - 1)
        if len(activations) != len(widths) - 1:
            raise ValueError("need one activation per layer")
        self.widths = widths
        self.layers = [Dense(a, b, rng, act) for a, b, act in zip(widths, widths[1:], activations)]

    def __call__(self, x) -> Value:
        for layer in self.layers:
            x = layer(x)
        return x

    def n_params(self) -> int:
        return sum(p.data.size for p in self.parameters())


class GRUCell(Module):
    """Gated recurrent cell with one update and one reset gate.

    Inputs are ``(B, n_in)`` or ``(n_in,)``; the hidden state matches.
    """

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        self.n_in = n_in
        self.n_hidden = n_hidden
        self.W = param(_uniform(rng, n_hidden, (n_in, 3 * n_hidden)))
        self.U = param(_uniform(rng, n_hidden, (n_hidden, 3 * n_hidden)))
        self.b = param(np.zeros(3 * n_hidden))

    def __call__(self, x, h) -> Value:
        x, h = lift(x), lift(h)
        H = self.n_hidden
        gx = x @ self.W + self.b
        gh = h @ self.U
        z = (gx[..., :H] + gh[..., :H]).sigmoid()
        r = (gx[..., H : 2 * H] + gh[..., H : 2 * H]).sigmoid()
        n = (gx[..., 2 * H :] + r * gh[..., 2 * H :]).tanh()
        return (1.0 - z) * n + z * h


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, scale: float = 0.5):
        self.table = param(rng.normal(0.0, scale, size=(n, dim)))

    def __call__(self, idx) -> Value:
        return self.table[np.asarray(idx, dtype=np.int64)]


# -- optimizer -------------------------------------------------------------------------


class Adam:
    """Adaptive-moment optimizer over a name -> parameter mapping."""

    def __init__(
        self,
        params: dict[str, Value],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for k, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {k}")
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(float(self.t)), "lr": np.array(self.lr)}
        for k in self.params:
            out[f"m.{k}"] = self.m[k].copy()
            out[f"v.{k}"] = self.v[k].copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"])
        self.lr = float(state["lr"])
        for k in self.params:
            self.m[k] = _as_array(state[f"m.{k}"]).copy()
            self.v[k] = _as_array(state[f"v.{k}"]).copy()


# -- gradient checking ----------------------------------------------------------------


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-3) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, floor)."""
    a, b = _as_array(a), _as_array(b)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def numeric_grad(fn: Callable[[], Value], p: Value, h: float = 1e-5, coords: Iterable[int] | None = None) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``p`` (optionally only at ``coords``)."""
    flat = p.data.reshape(-1)
    out = np.zeros(flat.size)
    idx = range(flat.size) if coords is None else coords
    with no_grad():
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = fn().item()
            flat[i] = old - h
            down = fn().item()
            flat[i] = old
            out[i] = (up - down) / (2 * h)
    return out.reshape(p.shape)


def gradcheck(
    fn: Callable[[], Value],
    params: dict[str, Value],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    With ``max_coords`` only that many randomly chosen coordinates per
    parameter are checked.
    """
    for p in params.values():
        p.grad = None
    loss = fn()
    loss.backward()
    worst = 0.0
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        coords = None
        if max_coords is not None and p.data.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(p.data.size, size=max_coords, replace=False)
        numeric = numeric_grad(fn, p, h, coords)
        if coords is not None:
            analytic, numeric = analytic.reshape(-1)[coords], numeric.reshape(-1)[coords]
        worst = max(worst, rel_error(analytic, numeric))
        p.grad = None
    return worst


# -- checkpoints -----------------------------------------------------------------------


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float arrays as a versioned JSON record (exact, byte-reproducible)."""
    record = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "arrays": {
            k: {
                "shape": list(np.shape(v)),
                "dtype": "float64",
                "data": base64.b64encode(_as_array(v).astype("<f8").tobytes()).decode("ascii"),
            }
            for k, v in arrays.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, encoding="utf-8") as fh:
        record = json.load(fh)
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a parameter checkpoint")
    if "version" not in record:
        raise ValueError(f"{path}: checkpoint has no version field")
    if record["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {record['version']}")
    arrays = {}
    for k, spec in record["arrays"].items():
        raw = np.frombuffer(base64.b64decode(spec["data"]), dtype="<f8")
        arrays[k] = raw.reshape(spec["shape"]).astype(np.float64)
    return arrays, record.get("meta", {})
