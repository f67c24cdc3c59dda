"""Plain gradient descent and Adam, with a cosine-decay + linear-warmup schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mera.errors import StateError
from mera.nnkernel import _kernels as K
from mera.nnkernel.graph import ParameterSet


def lr_multiplier(step: int, total_steps: int, warmup_ratio: float, schedule: str) -> float:
    """Multiplier on the base learning rate for the update applied at ``step``.

    ``cosine`` follows the usual HF-style curve: linear ramp from 0 over
    ``ceil(warmup_ratio * total_steps)`` steps, then half-cosine down to 0.
    """
    if schedule == "constant":
        return 1.0
    if schedule != "cosine":
        raise ValueError(f"unknown schedule {schedule!r}")
    warmup = math.ceil(warmup_ratio * total_steps)
    if step < warmup:
        return step / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    lrs: dict[str, float]
    kind: str = "adam"
    total_steps: int = 1
    schedule: str = "cosine"
    warmup_ratio: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")

    def current_multiplier(self) -> float:
        return lr_multiplier(self.step, self.total_steps, self.warmup_ratio, self.schedule)


def optimizer_step(params: ParameterSet, state: OptimizerState) -> None:
    """Apply one update in place to every parameter named in ``state.lrs``."""
    names = sorted(state.lrs)
    missing = [n for n in names if params.grad(n) is None]
    if missing:
        raise StateError(f"no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    mult = state.current_multiplier()
    state.step += 1
    for n in names:
        p, g = params[n], params.grad(n)
        lr = state.lrs[n] * mult
        if state.kind == "sgd":
            K.sgd_update(p, g, lr)
        else:
            if n not in state.m:
                state.m[n] = np.zeros(p.shape, dtype=np.float64)
                state.v[n] = np.zeros(p.shape, dtype=np.float64)
            K.adam_update(p, g, state.m[n], state.v[n], lr,
                          state.beta1, state.beta2, state.eps, state.step)
    params.zero_grad()
