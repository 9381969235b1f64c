"""Dense float64 tensors with an explicit tape and reverse-mode gradients.

Every value is a 2-D (or 1-D) ``numpy.ndarray`` of dtype float64. A
:class:`Tape` records primitive ops in creation order; since inputs are
always earlier nodes the op list is topologically sorted by construction.
``forward`` replays a recorded op list with new parameter values, which is
what the finite-difference checks use.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    def __init__(self, op: str, a, b):
        super().__init__(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")
        self.op = op
        self.shapes = (tuple(a), tuple(b))


class GraphError(ValueError):
    """Malformed op sequence (forward reference / cycle, non-scalar loss)."""


@dataclass(frozen=True)
class Op:
    name: str
    inputs: tuple[int, ...] = ()
    attrs: dict = field(default_factory=dict)


def _as_f64(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1)
    return a


# -- primitive forward rules -------------------------------------------------

def _matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def _add(a, b):
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)
    return a + b


def _add_bias(a, b):
    # row-vector bias broadcast over the rows of a
    if a.ndim != 2 or b.shape != (a.shape[1],):
        raise ShapeError("add_bias", a.shape, b.shape)
    return a + b


def _mul(a, b):
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    return a * b


def _softmax_rows(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_rows(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _concat(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError("concat", a.shape, b.shape)
    return np.concatenate([a, b], axis=1)


def _sqdist(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("sqdist", a.shape, b.shape)
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _cross_entropy(logits, labels):
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("cross_entropy: label out of range")
    logp = _log_softmax_rows(logits)
    return np.array([-logp[np.arange(len(labels)), labels].mean()])


def _eval(op: Op, vals: list[np.ndarray]) -> np.ndarray:
    n = op.name
    x = [vals[i] for i in op.inputs]
    if n == "matmul":
        return _matmul(*x)
    if n == "add":
        return _add(*x)
    if n == "add_bias":
        return _add_bias(*x)
    if n == "mul":
        return _mul(*x)
    if n == "scale":
        return x[0] * op.attrs["factor"]
    if n == "relu":
        return np.maximum(x[0], 0.0)
    if n == "softmax":
        return _softmax_rows(x[0])
    if n == "sum":
        return np.array([x[0].sum()])
    if n == "mean":
        axis = op.attrs.get("axis")
        if axis is None:
            return np.array([x[0].mean()])
        return x[0].mean(axis=0, keepdims=True)
    if n == "concat":
        return _concat(*x)
    if n == "sqdist":
        return _sqdist(*x)
    if n == "neg":
        return -x[0]
    if n == "cross_entropy":
        return _cross_entropy(x[0], op.attrs["labels"])
    raise GraphError(f"unknown op {n!r}")


def _vjp(op: Op, vals: list[np.ndarray], out: np.ndarray, g: np.ndarray) -> list[np.ndarray]:
    n = op.name
    x = [vals[i] for i in op.inputs]
    if n == "matmul":
        a, b = x
        return [g @ b.T, a.T @ g]
    if n == "add":
        return [g, g]
    if n == "add_bias":
        return [g, g.sum(axis=0)]
    if n == "mul":
        return [g * x[1], g * x[0]]
    if n == "scale":
        return [g * op.attrs["factor"]]
    if n == "relu":
        return [g * (x[0] > 0)]
    if n == "softmax":
        return [out * (g - (g * out).sum(axis=-1, keepdims=True))]
    if n == "sum":
        return [np.full_like(x[0], g[0])]
    if n == "mean":
        if op.attrs.get("axis") is None:
            return [np.full_like(x[0], g[0] / x[0].size)]
        return [np.broadcast_to(g / x[0].shape[0], x[0].shape).copy()]
    if n == "concat":
        k = x[0].shape[1]
        return [g[:, :k], g[:, k:]]
    if n == "sqdist":
        a, b = x
        diff = a[:, None, :] - b[None, :, :]
        w = 2.0 * g[:, :, None] * diff
        return [w.sum(axis=1), -w.sum(axis=0)]
    if n == "neg":
        return [-g]
    if n == "cross_entropy":
        logits = x[0]
        labels = op.attrs["labels"]
        p = _softmax_rows(logits)
        p[np.arange(len(labels)), labels] -= 1.0
        return [p * (g[0] / len(labels))]
    raise GraphError(f"unknown op {n!r}")


class Tape:
    """Eagerly evaluated op recorder.

    Leaf nodes are either named parameters (``param``) or constants. Each
    method returns the integer id of the new node.
    """

    def __init__(self):
        self.ops: list[Op] = []
        self.values: list[np.ndarray] = []
        self.params: dict[str, int] = {}

    def _push(self, op: Op, value: np.ndarray) -> int:
        self.ops.append(op)
        self.values.append(value)
        return len(self.ops) - 1

    def value(self, node: int) -> np.ndarray:
        return self.values[node]

    def param(self, name: str, value) -> int:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already on tape")
        node = self._push(Op("param", attrs={"name": name}), _as_f64(value))
        self.params[name] = node
        return node

    def constant(self, value) -> int:
        v = _as_f64(value)
        return self._push(Op("const", attrs={"value": v}), v)

    def apply(self, name: str, *inputs: int, **attrs) -> int:
        op = Op(name, tuple(inputs), attrs)
        return self._push(op, _eval(op, self.values))

    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def add(self, a, b):
        return self.apply("add", a, b)

    def add_bias(self, a, b):
        return self.apply("add_bias", a, b)

    def mul(self, a, b):
        return self.apply("mul", a, b)

    def scale(self, a, factor: float):
        return self.apply("scale", a, factor=float(factor))

    def neg(self, a):
        return self.apply("neg", a)

    def relu(self, a):
        return self.apply("relu", a)

    def softmax(self, a):
        return self.apply("softmax", a)

    def sum(self, a):
        return self.apply("sum", a)

    def mean(self, a, axis: int | None = None):
        if axis not in (None, 0):
            raise ValueError("mean supports axis=None or axis=0")
        return self.apply("mean", a, axis=axis)

    def concat(self, a, b):
        return self.apply("concat", a, b)

    def sqdist(self, a, b):
        return self.apply("sqdist", a, b)

    def cross_entropy(self, logits, labels):
        return self.apply("cross_entropy", logits, labels=np.asarray(labels, dtype=np.int64))

    def linear(self, x, w, b=None):
        y = self.matmul(x, w)
        return y if b is None else self.add_bias(y, b)


def _check_order(ops: Sequence[Op]) -> None:
    for i, op in enumerate(ops):
        for j in op.inputs:
            if not 0 <= j < i:
                raise GraphError(f"op {i} ({op.name}) reads node {j}: not topologically ordered")


def forward(ops: Sequence[Op], inputs: Mapping[str, np.ndarray] | Sequence[np.ndarray]) -> list[np.ndarray]:
    """Evaluate ``ops`` with parameter values taken from ``inputs``.

    ``inputs`` is either a name->array mapping or a list in the order the
    parameters were recorded. Returns every node value; the last entry is
    the output.
    """
    _check_order(ops)
    if not isinstance(inputs, Mapping):
        names = [op.attrs["name"] for op in ops if op.name == "param"]
        if len(names) != len(inputs):
            raise ValueError(f"expected {len(names)} inputs, got {len(inputs)}")
        inputs = dict(zip(names, inputs))
    vals: list[np.ndarray] = []
    for op in ops:
        if op.name == "param":
            vals.append(_as_f64(inputs[op.attrs["name"]]))
        elif op.name == "const":
            vals.append(op.attrs["value"])
        else:
            vals.append(_eval(op, vals))
    return vals


def backward(tape: Tape, loss: int, values: list[np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Gradient of scalar node ``loss`` with respect to every tape parameter."""
    ops = tape.ops
    _check_order(ops)
    vals = tape.values if values is None else values
    if vals[loss].size != 1:
        raise GraphError(f"loss must be scalar, got shape {vals[loss].shape}")
    grads: list[np.ndarray | None] = [None] * len(ops)
    grads[loss] = np.ones_like(vals[loss])
    for i in range(loss, -1, -1):
        g = grads[i]
        op = ops[i]
        if g is None or not op.inputs:
            continue
        for j, gj in zip(op.inputs, _vjp(op, vals, vals[i], g)):
            grads[j] = gj if grads[j] is None else grads[j] + gj
    out = {}
    for name, node in tape.params.items():
        g = grads[node]
        out[name] = np.zeros_like(vals[node]) if g is None else g
    return out


# -- parameters and optimizers -----------------------------------------------

GROUPS = ("encoder", "head", "knowledge")


class ParameterStore:
    """Named float64 tensors partitioned into the groups encoder/head/knowledge."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._group: dict[str, str] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, group: str, name: str, value, trainable: bool = True) -> None:
        if group not in GROUPS:
            raise ValueError(f"unknown group {group!r}")
        if name in self._values:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._values[name] = _as_f64(value).copy()
        self._group[name] = group
        self._trainable[name] = trainable

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self):
        return len(self._values)

    def group_of(self, name: str) -> str:
        return self._group[name]

    def trainable(self, name: str) -> bool:
        return self._trainable[name]

    def names(self, groups: Sequence[str] | None = None, trainable_only: bool = False) -> list[str]:
        return [
            n for n in self._values
            if (groups is None or self._group[n] in groups)
            and (not trainable_only or self._trainable[n])
        ]

    def subset(self, groups: Sequence[str] | None = None) -> dict[str, np.ndarray]:
        return {n: self._values[n] for n in self.names(groups)}

    def update(self, new: Mapping[str, np.ndarray]) -> None:
        for name, v in new.items():
            old = self._values[name]
            if v.shape != old.shape:
                raise ShapeError("update", old.shape, v.shape)
            self._values[name] = v

    def copy(self) -> "ParameterStore":
        other = ParameterStore()
        for n in self._values:
            other.add(self._group[n], n, self._values[n], self._trainable[n])
        return other

    def register(self, tape: Tape, groups: Sequence[str] | None = None,
                 override: Mapping[str, np.ndarray] | None = None) -> dict[str, int]:
        """Put parameters on ``tape``; ``override`` substitutes values by name."""
        override = override or {}
        return {n: tape.param(n, override.get(n, self._values[n])) for n in self.names(groups)}


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if set(params) != set(grads):
        raise ValueError("gradients must cover exactly the selected parameters")
    return {n: params[n] - lr * grads[n] for n in params}


class Adam:
    """Adam with bias correction and optional decoupled weight decay."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if not eps > 0 or weight_decay < 0:
            raise ValueError("eps must be positive and weight_decay non-negative")
        self.lr, self.beta1, self.beta2 = lr, beta1, beta2
        self.eps, self.weight_decay = eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        if set(params) != set(grads):
            raise ValueError("gradients must cover exactly the selected parameters")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        out = {}
        for n, p in params.items():
            g = grads[n]
            m = self.m.get(n)
            if m is None:
                m = self.m[n] = np.zeros_like(p)
                self.v[n] = np.zeros_like(p)
            v = self.v[n]
            self.m[n] = m = b1 * m + (1 - b1) * g
            self.v[n] = v = b2 * v + (1 - b2) * g * g
            new = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay > 0:
                new = new - self.lr * self.weight_decay * p
            out[n] = new
        return out


def adam_step(state: Adam, params, grads):
    return state.step(params, grads)
