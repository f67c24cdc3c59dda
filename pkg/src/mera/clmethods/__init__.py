"""Training procedures: standard stage training, merging, realigning, and baselines."""
from mera.clmethods.diagnose import DIAGNOSTIC_TAP, DriftEntry, diagnose_misalignment, probe_inputs
from mera.clmethods.ewc import FisherState, diagonal_fisher, ewc_loss, ewc_penalty, fisher_estimate
from mera.clmethods.merging import MergeRecord, merge
from mera.clmethods.methods import (
    METHODS,
    History,
    MethodConfig,
    StageContext,
    StageResult,
    realign_replay_for,
    register_for_stage,
    run_method_stage,
)
from mera.clmethods.training import (
    Group,
    TrainConfig,
    fit,
    groups_from_dataset,
    groups_from_replay,
    mean_loss,
    realign,
    train_stage_standard,
)
