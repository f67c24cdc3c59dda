import math

import numpy as np
import pytest

from mera.errors import MetricError, StateError
from mera.metrics import (
    ScoreTable,
    aggregate,
    bw_relative_gain,
    fw_relative_gain,
    gain_report,
    relative_gain,
    score_accuracy,
)

SEQ = ["image", "video", "audio", "pointcloud"]
REV = list(reversed(SEQ))


def published_sequential_ft() -> ScoreTable:
    """Published Fine-Tuning raw scores, sequential order, stages 1-2."""
    t = ScoreTable(order=SEQ)
    t.set_sup("image", "cap", 100.76)
    t.set_sup("image", "qa", 0.358)
    t.set_sup("video", "cap", 138.39)
    t.set_sup("video", "qa", 0.460)
    t.set_score(1, "image", "cap", 100.76)
    t.set_score(1, "image", "qa", 0.358)
    t.set_score(2, "image", "cap", 54.52)
    t.set_score(2, "image", "qa", 0.172)
    t.set_score(2, "video", "cap", 130.22)
    t.set_score(2, "video", "qa", 0.555)
    return t


def test_relative_gain_matches_published_sequential_value():
    assert relative_gain(published_sequential_ft(), 2, "image") == pytest.approx(51.08, abs=0.01)


def test_relative_gain_matches_published_reverse_value():
    t = ScoreTable(order=REV)
    t.set_sup("audio", "cap", 60.14)
    t.set_sup("audio", "qa", 0.658)
    t.set_score(2, "audio", "cap", 39.25)
    t.set_score(2, "audio", "qa", 0.519)
    # exact arithmetic: 50 * (0.652644 + 0.788754) = 72.0699
    assert relative_gain(t, 2, "audio") == pytest.approx(72.0699, abs=1e-4)


def test_bw_and_fw():
    t = published_sequential_ft()
    assert bw_relative_gain(t, 1) == 100.0
    assert bw_relative_gain(t, 2) == pytest.approx(relative_gain(t, 2, "image"))
    assert fw_relative_gain(t, 2) == pytest.approx(relative_gain(t, 2, "video"))
    assert fw_relative_gain(t, 1) == pytest.approx(100.0)


def test_fine_tuning_row_std_is_the_sample_std():
    vals = [100.0, 51.08, 47.99, 39.97]
    mean, pop = aggregate(vals)
    _, sample = aggregate(vals, ddof=1)
    assert mean == pytest.approx(59.76, abs=0.01)
    assert sample == pytest.approx(27.23, abs=0.01)
    assert pop == pytest.approx(23.58, abs=0.01)


def test_aggregate_edge_cases():
    assert aggregate([100.0]) == (100.0, 0.0)
    assert aggregate([100.0], ddof=1) == (100.0, 0.0)
    with pytest.raises(ValueError):
        aggregate([])


def test_gain_report_single_stage_is_the_convention_row():
    t = ScoreTable(order=["image"])
    t.set_sup("image", "cap", 0.8)
    t.set_score(1, "image", "cap", 0.6)
    rep = gain_report(t)
    assert rep.bw == [100.0] and rep.mean == 100.0 and rep.std == 0.0
    assert rep.fw == [pytest.approx(75.0)]


def test_errors():
    t = ScoreTable(order=["image", "video"])
    with pytest.raises(StateError):
        relative_gain(t, 1, "image")
    t.set_sup("image", "cap", 0.0)
    t.set_score(1, "image", "cap", 0.5)
    with pytest.raises(MetricError):
        relative_gain(t, 1, "image")
    t.set_sup("image", "cap", 1.0)
    with pytest.raises(StateError):
        relative_gain(t, 2, "image")
    with pytest.raises(ValueError):
        bw_relative_gain(t, 0)


class _FixedLogits:
    def __init__(self, logits):
        self._logits = np.asarray(logits)

    def logits(self, modality_id, x, task_id):
        return self._logits


def test_accuracy_breaks_ties_by_lowest_index():
    m = _FixedLogits([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])
    assert score_accuracy(m, "a", "t", None, [0, 1]) == 1.0
    assert score_accuracy(m, "a", "t", None, [1, 2]) == 0.0
    with pytest.raises(ValueError):
        score_accuracy(m, "a", "t", None, [])


def test_report_json_carries_both_std_conventions():
    doc = gain_report(published_sequential_ft()).to_json()
    assert math.isclose(doc["bw_std"], aggregate([100.0, doc["per_stage"][1]["bw_relative_gain"]])[1])
    assert doc["bw_std_sample"] > doc["bw_std"]
