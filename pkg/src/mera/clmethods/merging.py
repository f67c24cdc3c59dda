"""Stage-indexed weight averaging of the modality-agnostic component."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mera.errors import MergeError
from mera.model import MultimodalModel
from mera.nnkernel import ParameterSet


@dataclass(frozen=True)
class MergeRecord:
    stage: int
    coefficients: tuple[float, float]  # (weight on previous model, weight on vanilla model)
    merged: tuple[str, ...]
    carried: dict[str, str] = field(default_factory=dict)  # name -> "previous" | "vanilla"

    def to_json(self) -> dict:
        return {"stage": self.stage, "coefficients": list(self.coefficients),
                "merged": list(self.merged), "carried": dict(self.carried)}


def merge(previous: MultimodalModel, vanilla: MultimodalModel,
          stage: int) -> tuple[MultimodalModel, MergeRecord]:
    """``((i-1)/i) * previous + (1/i) * vanilla`` on backbone and heads.

    Encoders and connectors are never averaged: modalities already present in
    ``previous`` keep its components, modalities new in ``vanilla`` keep the
    vanilla ones.
    """
    if stage < 1:
        raise MergeError(f"stage index must be >= 1, got {stage}")
    shared = previous.agnostic_names()
    if shared != vanilla.agnostic_names():
        raise MergeError("backbone/head namespaces differ between the two models")
    for n in shared:
        if previous.params[n].shape != vanilla.params[n].shape:
            raise MergeError(f"{n}: shape {previous.params[n].shape} vs {vanilla.params[n].shape}")
    missing = set(previous.modalities) - set(vanilla.modalities)
    if missing:
        raise MergeError(f"vanilla model lacks modalities {sorted(missing)}")

    a, b = (stage - 1) / stage, 1.0 / stage
    out = ParameterSet()
    for n in shared:
        v = a * previous.params[n].astype(np.float64) + b * vanilla.params[n].astype(np.float64)
        out.add(n, v)
    carried = {}
    for n in vanilla.specific_names():
        m = n.split(".")[1]
        src = "previous" if m in previous.modalities else "vanilla"
        out.add(n, (previous if src == "previous" else vanilla).params[n].copy())
        carried[n] = src
    merged = MultimodalModel(vanilla.dims, out, dict(vanilla.modalities))
    return merged, MergeRecord(stage, (a, b), tuple(shared), carried)
