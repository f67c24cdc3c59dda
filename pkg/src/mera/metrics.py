"""Scores, expert upper bounds and the Relative Gain family.

All gains are percentages.  Backward Relative Gain at stage 1 is 100 by
convention; the standard deviation over stages includes that stage.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from mera.errors import MetricError, StateError


def score_accuracy(model, modality_id: str, task_id: str, x, y) -> float:
    """Fraction of rows whose argmax logit (lowest index on ties) equals the label."""
    if len(y) == 0:
        raise ValueError("cannot score an empty test split")
    pred = np.argmax(model.logits(modality_id, x, task_id), axis=1)
    return float(np.count_nonzero(pred == np.asarray(y)) / len(y))


@dataclass
class ScoreTable:
    sup: dict[tuple[str, str], float] = field(default_factory=dict)
    stages: dict[tuple[int, str, str], float] = field(default_factory=dict)
    order: list[str] = field(default_factory=list)   # modality learned at stage i is order[i-1]
    kind: str = "accuracy"

    def tasks(self, modality: str) -> list[str]:
        return sorted(k for (j, k) in self.sup if j == modality)

    def set_sup(self, modality: str, task: str, score: float) -> None:
        self.sup[(modality, task)] = float(score)

    def set_score(self, stage: int, modality: str, task: str, score: float) -> None:
        self.stages[(stage, modality, task)] = float(score)


def relative_gain(table: ScoreTable, stage: int, modality: str) -> float:
    """Mean over tasks of stage score / expert score, in percent."""
    tasks = table.tasks(modality)
    if not tasks:
        raise StateError(f"no expert scores for {modality!r}")
    total = 0.0
    for k in tasks:
        sup = table.sup[(modality, k)]
        if sup == 0:
            raise MetricError(f"expert score for ({modality}, {k}) is zero")
        try:
            s = table.stages[(stage, modality, k)]
        except KeyError:
            raise StateError(f"missing score for stage {stage}, {modality}, {k}") from None
        total += s / sup
    return 100.0 * total / len(tasks)


def bw_relative_gain(table: ScoreTable, stage: int) -> float:
    if stage < 1:
        raise ValueError("stage index starts at 1")
    if stage == 1:
        return 100.0
    olds = table.order[:stage - 1]
    if len(olds) < stage - 1:
        raise StateError(f"order has fewer than {stage - 1} modalities")
    return float(sum(relative_gain(table, stage, j) for j in olds) / len(olds))


def fw_relative_gain(table: ScoreTable, stage: int) -> float:
    if not 1 <= stage <= len(table.order):
        raise StateError(f"no modality learned at stage {stage}")
    return relative_gain(table, stage, table.order[stage - 1])


@dataclass
class GainReport:
    per_modality: dict[int, dict[str, float]]
    bw: list[float]
    fw: list[float]
    mean: float
    std: float
    std_sample: float

    def to_json(self) -> dict:
        return {
            "per_stage": [
                {"stage": i + 1, "bw_relative_gain": self.bw[i], "fw_relative_gain": self.fw[i],
                 "relative_gain": self.per_modality[i + 1]}
                for i in range(len(self.bw))
            ],
            "bw_mean": self.mean,
            "bw_std": self.std,
            "bw_std_sample": self.std_sample,
        }


METRIC_CONVENTIONS = {
    "bw_stage1": "Backward Relative Gain at stage 1 is fixed to 100",
    "bw_std": "population standard deviation (ddof=0) over all stages including stage 1",
    "bw_std_sample": "sample standard deviation (ddof=1) over the same values",
    "score": "accuracy; argmax ties broken by lowest class index",
}


def aggregate(bw_values: Sequence[float], ddof: int = 0) -> tuple[float, float]:
    """Mean and standard deviation of per-stage Backward Relative Gains."""
    vals = [float(v) for v in bw_values]
    if not vals:
        raise ValueError("aggregate needs at least one stage")
    n = len(vals)
    mean = math.fsum(vals) / n
    if n - ddof <= 0:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in vals) / (n - ddof)
    return mean, math.sqrt(var)


def gain_report(table: ScoreTable, stages: Iterable[int] | None = None) -> GainReport:
    stages = list(stages) if stages is not None else sorted({s for s, _, _ in table.stages})
    per_mod = {i: {j: relative_gain(table, i, j) for j in table.order[:i]} for i in stages}
    bw = [bw_relative_gain(table, i) for i in stages]
    fw = [fw_relative_gain(table, i) for i in stages]
    mean, std = aggregate(bw)
    _, std_s = aggregate(bw, ddof=1)
    return GainReport(per_mod, bw, fw, mean, std, std_s)
