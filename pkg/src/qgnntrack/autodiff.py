"""Small reverse-mode differentiation engine over dense float64 numpy arrays.

Every op returns a :class:`Tensor` that remembers its parents and a
vector-Jacobian product. :func:`backward` orders the reachable nodes into a tape
(parents before children) and replays it in reverse, summing contributions into
``grad`` so that a parameter used at several sites gets the total gradient.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

CHECK_FINITE = True
_TINY = np.finfo(np.float64).tiny
_ONE_MINUS = np.nextafter(1.0, 0.0)


class NonFiniteError(AssertionError):
    """A tensor received NaN or infinite values while finiteness checks are on."""


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "vjp", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        if CHECK_FINITE and not np.all(np.isfinite(self.value)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(value, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``value`` as the output of an op; ``vjp(g)`` returns one gradient per parent."""
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return make_node(a.value + b.value, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return make_node(a.value * b.value, (a, b),
                     lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return make_node(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return make_node(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def spmm(S: sp.spmatrix, a: Tensor) -> Tensor:
    """Constant sparse matrix times a dense tensor."""
    if S.shape[1] != a.shape[0]:
        raise ValueError(f"spmm shape mismatch {S.shape} @ {a.shape}")
    St = S.T.tocsr()
    return make_node(np.asarray(S @ a.value), (a,), lambda g: (np.asarray(St @ g),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.value)
    return make_node(t, (a,), lambda g: (g * (1.0 - t * t),))


def sigmoid(a: Tensor) -> Tensor:
    # clipped so that outputs stay strictly inside (0, 1) in float64
    s = np.clip(0.5 * (1.0 + np.tanh(0.5 * a.value)), _TINY, _ONE_MINUS)
    return make_node(s, (a,), lambda g: (g * s * (1.0 - s),))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return make_node(np.concatenate([p.value for p in parts], axis=axis), parts,
                     lambda g: tuple(np.split(g, cuts, axis=axis)))


def total(a: Tensor) -> Tensor:
    return make_node(np.sum(a.value), (a,), lambda g: (np.full(a.shape, g),))


def mean(a: Tensor) -> Tensor:
    n = max(a.value.size, 1)
    return make_node(np.sum(a.value) / n, (a,), lambda g: (np.full(a.shape, g / n),))


def _tape(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf."""
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.vjp is None:
            node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# --- dense layers and MLPs -------------------------------------------------

ACTIVATIONS = ("tanh", "sigmoid", "identity", "hidden", "pi_tanh")


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths from input to output plus the activation after each dense layer.

    ``output_activation='hidden'`` reuses the hidden activation on the last layer;
    ``'pi_tanh'`` is ``pi * tanh``, used to produce rotation angles.
    """

    layer_widths: tuple[int, ...]
    hidden_activation: str = "tanh"
    output_activation: str = "sigmoid"

    def __post_init__(self):
        if len(self.layer_widths) < 2 or any(w <= 0 for w in self.layer_widths):
            raise ValueError(f"invalid layer widths {self.layer_widths}")
        for act in (self.hidden_activation, self.output_activation):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum((w[i] + 1) * w[i + 1] for i in range(len(w) - 1))


def activate(x: Tensor, kind: str, hidden: str = "tanh") -> Tensor:
    if kind == "hidden":
        kind = hidden
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "pi_tanh":
        return scale(tanh(x), np.pi)
    return x


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if weight.shape[1] != bias.shape[-1]:
        raise ValueError(f"bias {bias.shape} does not match weight {weight.shape}")
    return add(matmul(x, weight), bias)


def init_mlp(spec: MLPSpec, rng: np.random.Generator, prefix: str = "mlp") -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases, keyed ``{prefix}.dense{i}.weight|bias``."""
    params = {}
    w = spec.layer_widths
    for i in range(len(w) - 1):
        limit = np.sqrt(6.0 / (w[i] + w[i + 1]))
        params[f"{prefix}.dense{i}.weight"] = Tensor(rng.uniform(-limit, limit, (w[i], w[i + 1])), True)
        params[f"{prefix}.dense{i}.bias"] = Tensor(np.zeros(w[i + 1]), True)
    return params


def mlp_forward(spec: MLPSpec, params: dict[str, Tensor], x: Tensor, prefix: str = "mlp") -> Tensor:
    w = spec.layer_widths
    if x.shape[-1] != w[0]:
        raise ValueError(f"input width {x.shape[-1]} != {w[0]}")
    n_layers = len(w) - 1
    for i in range(n_layers):
        try:
            weight = params[f"{prefix}.dense{i}.weight"]
            bias = params[f"{prefix}.dense{i}.bias"]
        except KeyError as exc:
            raise ValueError(f"missing parameter {exc.args[0]}") from None
        if weight.shape != (w[i], w[i + 1]) or bias.shape != (w[i + 1],):
            raise ValueError(f"{prefix}.dense{i} has shape {weight.shape}/{bias.shape}, spec wants {(w[i], w[i + 1])}")
        x = dense(x, weight, bias)
        x = activate(x, spec.output_activation if i == n_layers - 1 else spec.hidden_activation,
                     spec.hidden_activation)
    return x


# --- checkpoints -----------------------------------------------------------

def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Flat key -> array JSON document; floats are written in round-trip precision."""
    doc = {"meta": meta or {}, "arrays": {
        k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=float).ravel().tolist()}
        for k, v in sorted(arrays.items())}}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    arrays = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in doc["arrays"].items()}
    return arrays, doc.get("meta", {})


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
