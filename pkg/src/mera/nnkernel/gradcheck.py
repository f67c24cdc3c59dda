"""Central finite-difference check of tape gradients."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from mera.nnkernel.graph import Graph, Node, ParameterSet


def numeric_grad(loss_of: Callable[[ParameterSet], float], params: ParameterSet, name: str,
                 h: float = 1e-3) -> np.ndarray:
    """``(f(p + h e_k) - f(p - h e_k)) / 2h`` for every element of ``name``."""
    base = params[name].copy()
    flat = params[name].reshape(-1)
    out = np.empty(base.size, dtype=np.float64)
    for k in range(base.size):
        orig = flat[k]
        flat[k] = orig + h
        hi = loss_of(params)
        flat[k] = orig - h
        lo = loss_of(params)
        flat[k] = orig
        out[k] = (hi - lo) / (2.0 * h)
    params[name] = base
    return out.reshape(base.shape)


def check_gradients(build: Callable[[Graph], Node], params: ParameterSet,
                    names: Iterable[str] | None = None, h: float = 1e-3) -> dict[str, float]:
    """Relative error between backward and finite differences, per parameter.

    ``build`` records a scalar loss on the graph it is given.  ``params``
    should be float64 for the check to be meaningful.  The error is
    ``max|a - n| / max(max|a|, max|n|, 1e-12)``.
    """
    names = list(params.names() if names is None else names)

    def loss_of(p):
        return float(build(Graph(p)).value)

    g = Graph(params, trainable=names)
    loss = build(g)
    g.backward(loss)
    errs = {}
    for n in names:
        analytic = np.asarray(params.grad(n), dtype=np.float64)
        numeric = numeric_grad(loss_of, params, n, h)
        scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
        errs[n] = float(np.abs(analytic - numeric).max() / scale)
    params.zero_grad()
    return errs
