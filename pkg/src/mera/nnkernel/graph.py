"""Parameter storage and a small reverse-mode evaluation trace."""
from __future__ import annotations

import hashlib
from typing import Iterable, Iterator

import numpy as np

from mera.errors import DimensionError, StateError
from mera.nnkernel import _kernels as K

DTYPE = np.float32
LN_EPS = 1e-5


class ParameterSet:
    """Named float32 tensors plus a parallel gradient slot per entry.

    Iteration order is lexicographic by name regardless of insertion order.
    A gradient slot is ``None`` until a backward pass writes into it.
    """

    def __init__(self, values: dict[str, np.ndarray] | None = None, dtype=DTYPE):
        self.dtype = np.dtype(dtype)
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray | None] = {}
        for name, value in (values or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.ascontiguousarray(value, dtype=self.dtype)
        if arr.ndim == 0 or 0 in arr.shape:
            raise DimensionError(f"parameter {name!r} needs positive extents, got {arr.shape}")
        self._values[name] = arr
        self._grads[name] = None

    def names(self) -> list[str]:
        return sorted(self._values)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def __len__(self) -> int:
        return len(self._values)

    def __contains__(self, name) -> bool:
        return name in self._values

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self._values:
            raise KeyError(name)
        arr = np.ascontiguousarray(value, dtype=self.dtype)
        if arr.shape != self._values[name].shape:
            raise DimensionError(
                f"{name}: shape {arr.shape} != {self._values[name].shape}")
        self._values[name] = arr

    def items(self) -> Iterable[tuple[str, np.ndarray]]:
        return ((n, self._values[n]) for n in self.names())

    def grad(self, name: str) -> np.ndarray | None:
        return self._grads[name]

    def accumulate_grad(self, name: str, g: np.ndarray) -> None:
        cur = self._grads[name]
        if cur is None:
            self._grads[name] = np.array(g, dtype=self.dtype, copy=True)
        else:
            cur += g

    def zero_grad(self) -> None:
        for n in self._grads:
            self._grads[n] = None

    def copy(self) -> "ParameterSet":
        out = ParameterSet(dtype=self.dtype)
        for n in self.names():
            out._values[n] = self._values[n].copy()
            out._grads[n] = None
        return out

    def subset(self, names: Iterable[str]) -> "ParameterSet":
        return ParameterSet({n: self._values[n] for n in names}, dtype=self.dtype)

    def digest(self, names: Iterable[str] | None = None) -> str:
        """SHA-256 over names, shapes and raw bytes; the bitwise-equality probe."""
        h = hashlib.sha256()
        for n in sorted(self.names() if names is None else names):
            v = self._values[n]
            h.update(n.encode())
            h.update(repr(v.shape).encode())
            h.update(v.tobytes())
        return h.hexdigest()


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {what}")


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "param_name", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, param_name=None, requires_grad=False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.param_name = param_name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape


class Graph:
    """Records one forward evaluation so that :meth:`backward` can replay it.

    ``trainable`` names the parameters that receive gradients; every other
    parameter is read as a constant.  A graph is single-use.
    """

    def __init__(self, params: ParameterSet, trainable: Iterable[str] = ()):
        self.params = params
        self.trainable = frozenset(trainable)
        unknown = self.trainable - set(params.names())
        if unknown:
            raise KeyError(f"trainable names not in parameter set: {sorted(unknown)}")
        self._tape: list[Node] = []
        self._leaves: dict[str, Node] = {}
        self._done = False

    # -- leaves --------------------------------------------------------------

    def param(self, name: str) -> Node:
        node = self._leaves.get(name)
        if node is None:
            node = Node(self.params[name], param_name=name,
                        requires_grad=name in self.trainable)
            self._leaves[name] = node
        return node

    def const(self, value) -> Node:
        return Node(np.asarray(value))

    def _record(self, value, parents, backward_fn, what) -> Node:
        _check_finite(value, what)
        node = Node(value, parents, backward_fn,
                    requires_grad=any(p.requires_grad for p in parents))
        self._tape.append(node)
        return node

    # -- layers --------------------------------------------------------------

    def linear(self, x: Node, w: Node, b: Node) -> Node:
        xv, wv, bv = x.value, w.value, b.value
        if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0] or bv.shape != (wv.shape[1],):
            raise DimensionError(
                f"linear: x{xv.shape} @ W{wv.shape} + b{bv.shape} is not compatible")
        y = K.linear_fwd(xv, wv, bv)

        def backward(out):
            dx, dw, db = K.linear_bwd(xv, wv, out.grad)
            return (dx, dw, db)

        return self._record(y, (x, w, b), backward, "linear")

    def tanh(self, x: Node) -> Node:
        y = np.tanh(x.value)

        def backward(out):
            return ((out.grad * (1.0 - y * y)).astype(y.dtype),)

        return self._record(y, (x,), backward, "tanh")

    def relu(self, x: Node) -> Node:
        mask = x.value > 0
        y = np.where(mask, x.value, 0).astype(x.value.dtype)

        def backward(out):
            return (np.where(mask, out.grad, 0).astype(out.grad.dtype),)

        return self._record(y, (x,), backward, "relu")

    def layer_norm(self, x: Node, gamma: Node, beta: Node, eps: float = LN_EPS) -> Node:
        xv = x.value
        if xv.ndim != 2 or gamma.value.shape != (xv.shape[1],) or beta.value.shape != (xv.shape[1],):
            raise DimensionError(f"layer_norm: x{xv.shape} with gain{gamma.value.shape}")
        y, xhat, rstd = K.layernorm_fwd(xv, gamma.value, beta.value, eps)

        def backward(out):
            return K.layernorm_bwd(out.grad, xhat, rstd, gamma.value)

        return self._record(y, (x, gamma, beta), backward, "layer_norm")

    def cross_entropy(self, logits: Node, labels) -> Node:
        labels = np.asarray(labels, dtype=np.int64)
        lv = logits.value
        if lv.ndim != 2 or labels.shape != (lv.shape[0],):
            raise DimensionError(f"cross_entropy: logits{lv.shape} vs labels{labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= lv.shape[1]):
            raise IndexError(f"label outside [0, {lv.shape[1]})")
        loss, probs = K.xent_fwd(lv, labels)

        def backward(out):
            return (K.xent_bwd(probs, labels, float(out.grad)).astype(lv.dtype),)

        return self._record(np.asarray(loss, dtype=np.float64), (logits,), backward, "cross_entropy")

    # -- scalar plumbing -----------------------------------------------------

    def sum(self, x: Node) -> Node:
        shape, dtype = x.value.shape, x.value.dtype

        def backward(out):
            return (np.full(shape, out.grad, dtype=dtype),)

        return self._record(np.asarray(x.value.sum(dtype=np.float64)), (x,), backward, "sum")

    def mul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value

        def backward(out):
            ga = out.grad * bv
            gb = out.grad * av
            return (_unbroadcast(ga, np.shape(av)), _unbroadcast(gb, np.shape(bv)))

        return self._record(av * bv, (a, b), backward, "mul")

    def add(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value

        def backward(out):
            return (_unbroadcast(out.grad, np.shape(av)), _unbroadcast(out.grad, np.shape(bv)))

        return self._record(av + bv, (a, b), backward, "add")

    def scale(self, x: Node, c: float) -> Node:
        def backward(out):
            return (out.grad * c,)

        return self._record(x.value * c, (x,), backward, "scale")

    def weighted_sum(self, terms: list[Node], weights: list[float]) -> Node:
        if len(terms) != len(weights) or not terms:
            raise DimensionError("weighted_sum needs matching nonempty terms/weights")
        total = sum(float(w) * np.float64(t.value) for t, w in zip(terms, weights))

        def backward(out):
            return tuple(out.grad * w for w in weights)

        return self._record(np.asarray(total, dtype=np.float64), tuple(terms), backward, "weighted_sum")

    def quadratic_penalty(self, names: list[str], weights: dict[str, np.ndarray],
                          anchors: dict[str, np.ndarray], coef: float) -> Node:
        """``coef/2 * sum_p weights[p] * (p - anchors[p])**2`` over the named parameters."""
        leaves = [self.param(n) for n in names]
        diffs = [leaf.value.astype(np.float64) - anchors[n] for leaf, n in zip(leaves, names)]
        total = 0.0
        for d, n in zip(diffs, names):
            total += 0.5 * coef * float(np.sum(weights[n] * d * d))

        def backward(out):
            return tuple((out.grad * coef * weights[n] * d).astype(leaf.value.dtype)
                         for d, n, leaf in zip(diffs, names, leaves))

        return self._record(np.asarray(total, dtype=np.float64), tuple(leaves), backward,
                            "quadratic_penalty")

    # -- reverse pass --------------------------------------------------------

    def backward(self, loss: Node) -> None:
        if self._done:
            raise StateError("graph already consumed by a backward pass")
        if not any(n is loss for n in reversed(self._tape)):
            raise StateError("backward called without a recorded forward pass for this loss")
        if np.size(loss.value) != 1:
            raise DimensionError("backward needs a scalar loss")
        self._done = True
        loss.grad = np.float64(1.0)
        for node in reversed(self._tape):
            if node.grad is None or not node.requires_grad:
                continue
            grads = node.backward_fn(node)
            for parent, g in zip(node.parents, grads):
                if not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, copy=True)
                else:
                    parent.grad = parent.grad + g
        for name in sorted(self.trainable):
            leaf = self._leaves.get(name)
            if leaf is not None and leaf.grad is not None:
                g = np.asarray(leaf.grad, dtype=self.params.dtype)
                _check_finite(g, f"backward into {name}")
                self.params.accumulate_grad(name, g)
            else:
                self.params.accumulate_grad(name, np.zeros_like(self.params[name]))


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(DTYPE)

