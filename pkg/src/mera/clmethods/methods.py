"""Per-stage dispatch for MERA and the baselines."""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

from mera.errors import ConfigError
from mera.model import MultimodalModel
from mera.modalities import (ModalityDataset, ModalitySpec, ReplaySet, corrupt_mispair,
                             encoder_corpus, sample_replay)
from mera.nnkernel import Graph
from mera.seeding import derive_seed

from mera.clmethods.ewc import FisherState, fisher_estimate
from mera.clmethods.merging import MergeRecord, merge
from mera.clmethods.training import TrainConfig, groups_from_replay, realign, train_stage_standard

METHODS = ("ft", "replay", "ewc", "eproj", "mera")


@dataclass(frozen=True)
class MethodConfig:
    name: str = "mera"
    r: float = 0.10              # replay fraction of Replay, and of MERA's realigning set
    ewc_lambda: float = 1.0
    realign: bool = False        # append a realigning stage to a baseline
    realign_r: float = 0.10      # replay fraction used by that appended realigning stage
    fisher_frac: float = 0.01
    mispair_p: float = 0.0       # corrupt this fraction of every realigning replay set

    def __post_init__(self):
        if self.name not in METHODS:
            raise ConfigError("method.name", f"unknown method {self.name!r}; expected one of {METHODS}")
        if not 0 < self.r <= 1:
            raise ConfigError("method.r", "must be in (0, 1]")
        if not 0 < self.realign_r <= 1:
            raise ConfigError("method.realign_r", "must be in (0, 1]")
        if self.ewc_lambda < 0:
            raise ConfigError("method.ewc_lambda", "must be non-negative")
        if not 0 < self.fisher_frac <= 1:
            raise ConfigError("method.fisher_frac", "must be in (0, 1]")
        if not 0 <= self.mispair_p <= 1:
            raise ConfigError("method.mispair_p", "must be in [0, 1]")
        if self.name == "mera" and self.realign:
            raise ConfigError("method.realign", "MERA already realigns; the flag applies to baselines")

    @property
    def label(self) -> str:
        base = {"ft": "Fine-Tuning", "replay": f"Replay ({self.r:.0%})", "ewc": "EWC",
                "eproj": "EProj", "mera": f"MERA ({self.r:.0%})"}[self.name]
        if self.mispair_p:
            base += f" noisy {self.mispair_p:.0%}"
        return base + (" +Realigning" if self.realign else "")


@dataclass(frozen=True)
class StageContext:
    stage: int                 # 1-based
    order: tuple[str, ...]
    method: MethodConfig
    seed: int                  # training stream
    replay_seed: int
    fisher_seed: int
    encoder_seed: int
    input_dim: int
    spec: ModalitySpec | None = None   # enables encoder pretraining at registration
    latent_dim: int = 0

    def __post_init__(self):
        if not 1 <= self.stage <= len(self.order):
            raise ValueError(f"stage {self.stage} outside 1..{len(self.order)}")

    @property
    def modality(self) -> str:
        return self.order[self.stage - 1]

    @property
    def realign_seed(self) -> int:
        return derive_seed(self.seed, self.stage, "realign")


@dataclass
class History:
    """What a run carries from one stage to the next (besides the model)."""

    datasets: list[ModalityDataset] = field(default_factory=list)
    fisher: FisherState = field(default_factory=FisherState)


@dataclass
class StageResult:
    model: MultimodalModel
    vanilla: MultimodalModel | None = None
    merged: MultimodalModel | None = None
    merge_record: MergeRecord | None = None
    replay: ReplaySet | None = None            # rehearsal buffer used in phase 2
    realign_replay: ReplaySet | None = None    # set used by the realigning stage


def realign_replay_for(ctx: StageContext, datasets: list[ModalityDataset], r: float) -> ReplaySet:
    """The realigning set R_i: ``r`` of D_1..D_i (current included), optionally mispaired."""
    rep = sample_replay(datasets, r, derive_seed(ctx.replay_seed, ctx.stage, "realign"),
                        include_current=True)
    if ctx.method.mispair_p > 0:
        rep = corrupt_mispair(rep, ctx.method.mispair_p, derive_seed(ctx.replay_seed, ctx.stage, "mispair"))
    return rep


def register_for_stage(prev: MultimodalModel, ctx: StageContext) -> MultimodalModel:
    model = prev.register_modality(ctx.modality, ctx.input_dim, ctx.encoder_seed,
                                   derive_seed(ctx.seed, ctx.stage, "connector-init"))
    if ctx.spec is None:
        return model
    w2, b2 = _pretrained_readout(ctx.spec, ctx.latent_dim, model.dims, ctx.encoder_seed)
    pre = f"encoder.{ctx.modality}"
    model.params[f"{pre}.w2"] = w2
    model.params[f"{pre}.b2"] = b2
    return model


@functools.lru_cache(maxsize=64)
def _pretrained_readout(spec: ModalitySpec, latent_dim: int, dims, encoder_seed: int):
    # Deterministic in its arguments, so experts and every method share one encoder.
    probe = MultimodalModel.fresh(dims, 0).register_modality(spec.modality_id, spec.input_dim,
                                                             encoder_seed, 0)
    x, target = encoder_corpus(spec, latent_dim, dims.feat_dim, encoder_seed)
    fitted = probe.fit_encoder(spec.modality_id, x, target)
    pre = f"encoder.{spec.modality_id}"
    w2, b2 = fitted.params[f"{pre}.w2"], fitted.params[f"{pre}.b2"]
    w2.setflags(write=False)
    b2.setflags(write=False)
    return w2, b2


def run_method_stage(prev: MultimodalModel, dataset: ModalityDataset, history: History,
                     ctx: StageContext, cfg: TrainConfig) -> StageResult:
    """Produce the stage model for ``ctx.method`` and record the stage in ``history``.

    ``history`` holds the datasets of stages before this one; on return the
    current dataset (and, for EWC, its Fisher snapshot) has been appended.
    """
    meth = ctx.method
    if dataset.modality_id != ctx.modality:
        raise ValueError(f"stage {ctx.stage} expects {ctx.modality}, got {dataset.modality_id}")
    model = register_for_stage(prev, ctx)
    seen = history.datasets + [dataset]
    res = StageResult(model=model)

    if meth.name in ("ft", "mera"):
        vanilla = train_stage_standard(model, dataset, ctx.stage, ctx.seed, cfg)
    elif meth.name == "eproj":
        vanilla = train_stage_standard(model, dataset, ctx.stage, ctx.seed, cfg, freeze_agnostic=True)
    elif meth.name == "replay":
        res.replay = sample_replay(seen, meth.r, derive_seed(ctx.replay_seed, ctx.stage, "rehearsal"),
                                   include_current=False)
        vanilla = train_stage_standard(model, dataset, ctx.stage, ctx.seed, cfg,
                                       extra=groups_from_replay(res.replay))
    else:  # ewc
        penalty = None
        if not history.fisher.empty:
            names = sorted(history.fisher.anchor)
            weights, anchors = history.fisher.summed(), history.fisher.anchor

            def penalty(g: Graph):
                return g.quadratic_penalty(names, weights, anchors, meth.ewc_lambda)
        vanilla = train_stage_standard(model, dataset, ctx.stage, ctx.seed, cfg, penalty=penalty)
    res.vanilla = vanilla

    if meth.name == "mera":
        res.merged, res.merge_record = merge(prev, vanilla, ctx.stage)
        res.realign_replay = realign_replay_for(ctx, seen, meth.r)
        res.model = realign(res.merged, res.realign_replay, ctx.realign_seed, cfg)
    elif meth.realign:
        res.realign_replay = realign_replay_for(ctx, seen, meth.realign_r)
        res.model = realign(vanilla, res.realign_replay, ctx.realign_seed, cfg)
    else:
        res.model = vanilla

    if meth.name == "ewc":
        subset = sample_replay([dataset], meth.fisher_frac, derive_seed(ctx.fisher_seed, ctx.stage))
        history.fisher.add(ctx.stage, fisher_estimate(res.model, groups_from_replay(subset)), res.model)
    history.datasets.append(dataset)
    return res
