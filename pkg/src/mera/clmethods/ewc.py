"""Diagonal Fisher estimation and the online EWC penalty."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from mera.errors import StateError
from mera.model import MultimodalModel
from mera.nnkernel import Graph, Node, ParameterSet

from mera.clmethods.training import Group


def diagonal_fisher(params: ParameterSet, names: Sequence[str],
                    sample_losses: Iterable[Callable[[Graph], Node]]) -> dict[str, np.ndarray]:
    """Mean of squared per-sample gradients, one backward pass per sample."""
    names = sorted(names)
    acc = {n: np.zeros(params[n].shape, dtype=np.float64) for n in names}
    count = 0
    for loss_fn in sample_losses:
        g = Graph(params, names)
        g.backward(loss_fn(g))
        for n in names:
            gr = params.grad(n).astype(np.float64)
            acc[n] += gr * gr
        params.zero_grad()
        count += 1
    if count == 0:
        raise ValueError("Fisher estimate needs at least one sample")
    return {n: a / count for n, a in acc.items()}


def fisher_estimate(model: MultimodalModel, samples: Sequence[Group]) -> dict[str, np.ndarray]:
    """Per-sample diagonal Fisher over the backbone and head parameters of ``model``."""
    names = model.agnostic_names()
    work = model.copy()

    def per_sample():
        for grp in samples:
            for row in range(len(grp)):
                def loss(g, grp=grp, row=row):
                    logits = work.forward(g, grp.modality_id, grp.x[row:row + 1], grp.task_id)
                    return g.cross_entropy(logits, grp.y[row:row + 1])
                yield loss

    return diagonal_fisher(work.params, names, per_sample())


@dataclass
class FisherState:
    """Fisher snapshots of all completed stages plus the latest anchor parameters."""

    fishers: list[tuple[int, dict[str, np.ndarray]]] = field(default_factory=list)
    anchor: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, stage: int, fisher: dict[str, np.ndarray], model: MultimodalModel) -> None:
        if self.fishers and set(fisher) != set(self.fishers[0][1]):
            raise StateError("Fisher namespaces differ across stages")
        self.fishers.append((stage, fisher))
        self.anchor = {n: model.params[n].astype(np.float64) for n in fisher}

    @property
    def empty(self) -> bool:
        return not self.fishers

    def summed(self) -> dict[str, np.ndarray]:
        total = {n: np.zeros_like(f) for n, f in self.fishers[0][1].items()}
        for _, f in self.fishers:
            for n in total:
                total[n] += f[n]
        return total


def ewc_penalty(g: Graph, state: FisherState, lam: float) -> Node:
    """``sum_j lam/2 * F_j * (theta - anchor)^2`` with the previous-stage anchor."""
    if state.empty:
        raise StateError("EWC penalty needs at least one Fisher snapshot")
    names = sorted(state.anchor)
    missing = [n for n in names if n not in g.params]
    if missing:
        raise StateError(f"EWC anchor names missing from model: {missing[:3]}")
    return g.quadratic_penalty(names, state.summed(), state.anchor, lam)


def ewc_loss(g: Graph, base_loss: Node, state: FisherState, lam: float) -> Node:
    if lam < 0:
        raise ValueError("EWC lambda must be non-negative")
    if state.empty:
        return base_loss
    return g.add(base_loss, ewc_penalty(g, state, lam))
