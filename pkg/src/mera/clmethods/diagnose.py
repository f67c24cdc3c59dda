"""Misalignment diagnostics for old modalities.

Old encoders and connectors are frozen after their stage, so their connector
outputs never move.  What moves is how the shared backbone responds to those
fixed features; the probes used here are therefore taken at the backbone
output (``tap="backbone"``) for each old modality's probe inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mera.errors import StateError
from mera.model import FeatureProbe, MultimodalModel, probe_drift, snapshot_probe
from mera.modalities import ModalityDataset, ReplaySet

from mera.clmethods.training import TrainConfig, mean_loss, realign

DIAGNOSTIC_TAP = "backbone"


@dataclass(frozen=True)
class DriftEntry:
    modality_id: str
    drift: float
    loss_before: float
    loss_after: float | None

    @property
    def realign_gain(self) -> float | None:
        return None if self.loss_after is None else self.loss_before - self.loss_after


def old_modality_loss(model: MultimodalModel, ds: ModalityDataset) -> float:
    """Mean test cross-entropy over both tasks of one modality."""
    losses = [mean_loss(model, ds.modality_id, t, ds.test(t).x, ds.test(t).y) for t in ds.tasks]
    return float(np.mean(losses))


def diagnose_misalignment(model: MultimodalModel, learn_probes: dict[str, FeatureProbe],
                          current_probes: dict[str, FeatureProbe] | None,
                          datasets: dict[str, ModalityDataset],
                          replay: ReplaySet | None = None, seed: int = 0,
                          cfg: TrainConfig | None = None) -> list[DriftEntry]:
    """Drift and pre/post-realign test loss for every modality before the newest one.

    ``current_probes`` may be ``None``; they are then recomputed from ``model``
    on the probe inputs of ``datasets`` (first test rows of the first task).
    The realign is run on a copy when ``replay`` is given; ``model`` is untouched.
    """
    old = list(model.modalities)[:-1]
    if not old:
        return []
    missing = [m for m in old if m not in learn_probes]
    if missing:
        raise StateError(f"no learn-time probe for {missing}")
    realigned = None
    if replay is not None:
        realigned = realign(model, replay, seed, cfg or TrainConfig())
    report = []
    for m in old:
        ref = learn_probes[m]
        if current_probes is not None and m in current_probes:
            cur = current_probes[m]
        else:
            cur = snapshot_probe(model, m, probe_inputs(datasets[m], ref.count), tap=ref.tap)
        before = old_modality_loss(model, datasets[m])
        after = None if realigned is None else old_modality_loss(realigned, datasets[m])
        report.append(DriftEntry(m, probe_drift(ref, cur), before, after))
    return report


def probe_inputs(ds: ModalityDataset, n: int = 256) -> np.ndarray:
    first = next(iter(ds.tasks))
    return ds.test(first).x[:n]
