"""Mini-batch training loop, the standard two-phase stage recipe, and realigning."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from mera.errors import RoutingError
from mera.model import Backbone, Connector, Head, MultimodalModel
from mera.modalities import ModalityDataset, ReplaySet
from mera.nnkernel import Graph, Node, OptimizerState, optimizer_step
from mera.seeding import derive_seed, rng_for


@dataclass(frozen=True)
class TrainConfig:
    """Per-phase training knobs, named after the three training roles.

    ``pretrain``: connector-only alignment on the captioning-analog task.
    ``finetune``: connector plus backbone and heads on both tasks.
    ``realign``: all connectors on a replay set.
    """

    pretrain_epochs: int = 1
    finetune_epochs: int = 3
    realign_epochs: int = 1
    pretrain_batch: int = 32
    finetune_batch: int = 16
    realign_batch: int = 16
    lr_pretrain_connector: float = 1e-3
    lr_finetune_connector: float = 1e-3
    lr_finetune_backbone: float = 1e-2
    lr_realign_connector: float = 1e-2
    optimizer: str = "adam"
    schedule: str = "cosine"
    warmup_ratio: float = 0.03


@dataclass(frozen=True)
class Group:
    """A homogeneous block of training samples: one modality, one task."""

    modality_id: str
    task_id: str
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


def groups_from_dataset(ds: ModalityDataset, tasks: Sequence[str] | None = None) -> list[Group]:
    tasks = list(ds.tasks) if tasks is None else list(tasks)
    return [Group(ds.modality_id, t, ds.train(t).x, ds.train(t).y) for t in tasks]


def groups_from_replay(replay: ReplaySet) -> list[Group]:
    return [Group(g.modality_id, g.task_id, g.x, g.y) for g in replay.groups if len(g)]


def batch_loss(g: Graph, model: MultimodalModel, pool: Sequence[Group],
               gid: np.ndarray, rows: np.ndarray) -> Node:
    """Mean cross-entropy over a mixed batch, evaluated group by group."""
    n = len(gid)
    terms, weights = [], []
    for k in np.unique(gid):
        sel = rows[gid == k]
        grp = pool[k]
        logits = model.forward(g, grp.modality_id, grp.x[sel], grp.task_id)
        terms.append(g.cross_entropy(logits, grp.y[sel]))
        weights.append(len(sel) / n)
    if len(terms) == 1:
        return terms[0]
    return g.weighted_sum(terms, weights)


PenaltyFn = Callable[[Graph], Node]


def fit(model: MultimodalModel, pool: Sequence[Group], lrs: dict[str, float], epochs: int,
        batch_size: int, seed: int, cfg: TrainConfig, penalty: PenaltyFn | None = None) -> MultimodalModel:
    """Train the parameters named in ``lrs`` on ``pool``; everything else stays bitwise fixed.

    Returns a new model; ``model`` itself is not modified.
    """
    out = model.copy()
    pool = [p for p in pool if len(p)]
    if epochs <= 0 or not pool or not lrs:
        return out
    for grp in pool:
        if grp.modality_id not in out.modalities:
            raise RoutingError(f"modality {grp.modality_id!r} is not registered")
    gid = np.concatenate([np.full(len(p), k, dtype=np.int64) for k, p in enumerate(pool)])
    rows = np.concatenate([np.arange(len(p), dtype=np.int64) for p in pool])
    n = len(gid)
    steps_per_epoch = math.ceil(n / batch_size)
    state = OptimizerState(lrs=dict(lrs), kind=cfg.optimizer, schedule=cfg.schedule,
                           warmup_ratio=cfg.warmup_ratio, total_steps=epochs * steps_per_epoch)
    trainable = sorted(lrs)
    for epoch in range(epochs):
        perm = rng_for(seed, "epoch", epoch).permutation(n)
        for s in range(steps_per_epoch):
            idx = perm[s * batch_size:(s + 1) * batch_size]
            g = Graph(out.params, trainable)
            loss = batch_loss(g, out, pool, gid[idx], rows[idx])
            if penalty is not None:
                loss = g.add(loss, penalty(g))
            g.backward(loss)
            optimizer_step(out.params, state)
    return out


def train_stage_standard(model: MultimodalModel, dataset: ModalityDataset, stage: int, seed: int,
                         cfg: TrainConfig, extra: Sequence[Group] = (),
                         penalty: PenaltyFn | None = None,
                         freeze_agnostic: bool = False) -> MultimodalModel:
    """Two-phase recipe for the modality of ``dataset`` (which must be registered).

    Phase 1 trains only the new connector on the captioning-analog split.
    Phase 2 trains the new connector together with backbone and heads on both
    tasks plus ``extra`` samples (joint shuffle), adding ``penalty`` to the
    loss.  ``freeze_agnostic`` keeps backbone and heads frozen in phase 2.
    """
    m = dataset.modality_id
    if m not in model.modalities:
        raise RoutingError(f"modality {m!r} must be registered before training")
    conn = model.names_for([Connector(m)])
    first_task = next(iter(dataset.tasks))
    p1 = fit(model, groups_from_dataset(dataset, [first_task]),
             {n: cfg.lr_pretrain_connector for n in conn}, cfg.pretrain_epochs,
             cfg.pretrain_batch, derive_seed(seed, stage, "phase1"), cfg)
    lrs = {n: cfg.lr_finetune_connector for n in conn}
    if not freeze_agnostic:
        lrs.update({n: cfg.lr_finetune_backbone for n in model.names_for([Backbone(), Head()])})
    pool = groups_from_dataset(dataset) + list(extra)
    return fit(p1, pool, lrs, cfg.finetune_epochs, cfg.finetune_batch,
               derive_seed(seed, stage, "phase2"), cfg, penalty=None if freeze_agnostic else penalty)


def realign(model: MultimodalModel, replay: ReplaySet, seed: int, cfg: TrainConfig) -> MultimodalModel:
    """Fine-tune every connector on ``replay``; encoders, backbone and heads stay bitwise fixed."""
    if len(replay) == 0:
        raise ValueError("realign needs a nonempty replay set")
    missing = set(model.modalities) - {g.modality_id for g in replay.groups if len(g)}
    if missing:
        raise ValueError(f"replay set does not cover registered modalities {sorted(missing)}")
    conn = model.names_for([Connector()])
    return fit(model, groups_from_replay(replay), {n: cfg.lr_realign_connector for n in conn},
               cfg.realign_epochs, cfg.realign_batch, seed, cfg)


def mean_loss(model: MultimodalModel, modality_id: str, task_id: str, x, y) -> float:
    g = Graph(model.params)
    return float(g.cross_entropy(model.forward(g, modality_id, x, task_id), y).value)
