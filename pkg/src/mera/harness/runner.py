"""Full modality-incremental runs: experts, stages, evaluation, artifacts on disk."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from mera.clmethods import (
    DIAGNOSTIC_TAP,
    DriftEntry,
    History,
    MethodConfig,
    StageContext,
    StageResult,
    diagnose_misalignment,
    probe_inputs,
    run_method_stage,
)
from mera.harness.checkpoint import save_checkpoint
from mera.harness.config import RunConfig, dump_config, to_flat
from mera.metrics import METRIC_CONVENTIONS, GainReport, ScoreTable, gain_report, score_accuracy
from mera.modalities import ModalityDataset, generate_modality
from mera.model import FeatureProbe, ModelDims, MultimodalModel, snapshot_probe
from mera.seeding import derive_seed

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("stage", "modality", "task", "score", "sup_score", "relative_gain")
OUTPUT_ROOT_ENV = "MERA_OUTPUT_ROOT"


def resolve_output_dir(path: str | Path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def model_dims(cfg: RunConfig) -> ModelDims:
    d = cfg.dims
    return ModelDims(feat_dim=d.feat, embed_dim=d.embed, encoder_hidden=d.encoder_hidden,
                     classes=(("capA", d.classes), ("qaA", d.classes)))


def build_datasets(cfg: RunConfig) -> dict[str, ModalityDataset]:
    s = cfg.resolved_seeds
    sizes = {"train": cfg.data.train_size, "test": cfg.data.test_size}
    classes = {"capA": cfg.dims.classes, "qaA": cfg.dims.classes}
    return {m: generate_modality(cfg.modalities[m], cfg.dims.latent, sizes, s.task, classes, s.data)
            for m in cfg.order}


def encoder_seed(cfg: RunConfig) -> int:
    return derive_seed(cfg.resolved_seeds.init, "encoders")


def initial_model(cfg: RunConfig) -> MultimodalModel:
    return MultimodalModel.fresh(model_dims(cfg), cfg.resolved_seeds.init)


def stage_context(cfg: RunConfig, stage: int, method: MethodConfig | None = None) -> StageContext:
    s = cfg.resolved_seeds
    m = cfg.order[stage - 1]
    return StageContext(stage=stage, order=tuple(cfg.order), method=method or cfg.method,
                        seed=s.train, replay_seed=s.replay, fisher_seed=s.fisher,
                        encoder_seed=encoder_seed(cfg), input_dim=cfg.modalities[m].input_dim,
                        spec=cfg.modalities[m], latent_dim=cfg.dims.latent)


def evaluate(model: MultimodalModel, ds: ModalityDataset) -> dict[str, float]:
    return {t: score_accuracy(model, ds.modality_id, t, ds.test(t).x, ds.test(t).y) for t in ds.tasks}


# ---------------------------------------------------------------------------
# experts
# ---------------------------------------------------------------------------

def train_expert(cfg: RunConfig, modality: str, dataset: ModalityDataset) -> MultimodalModel:
    """Standard two-phase recipe on one modality alone, seeded by (expert, modality)."""
    s = cfg.resolved_seeds
    dims = model_dims(cfg)
    base = MultimodalModel.fresh(dims, derive_seed(s.init, "expert", modality))
    ctx = StageContext(stage=1, order=(modality,), method=MethodConfig(name="ft"),
                       seed=derive_seed(s.train, "expert", modality), replay_seed=s.replay,
                       fisher_seed=s.fisher, encoder_seed=encoder_seed(cfg),
                       input_dim=cfg.modalities[modality].input_dim,
                       spec=cfg.modalities[modality], latent_dim=cfg.dims.latent)
    return run_method_stage(base, dataset, History(), ctx, cfg.train).model


def expert_scores(cfg: RunConfig, datasets: dict[str, ModalityDataset] | None = None,
                  cache_dir: str | Path | None = None) -> dict[tuple[str, str], float]:
    """Upper-bound scores for every modality in ``cfg.order``; cached by config hash."""
    cache = None
    if cache_dir is not None:
        cache = Path(cache_dir) / f"experts-{cfg.expert_key()}.json"
        if cache.exists():
            raw = json.loads(cache.read_text())
            have = {(r["modality"], r["task"]): r["score"] for r in raw["scores"]}
            if all(any(k[0] == m for k in have) for m in cfg.order):
                return {k: v for k, v in have.items() if k[0] in cfg.order}
    datasets = datasets or build_datasets(cfg)
    scores = {}
    for m in sorted(set(cfg.order)):
        model = train_expert(cfg, m, datasets[m])
        for t, v in evaluate(model, datasets[m]).items():
            scores[(m, t)] = v
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        rows = [{"modality": m, "task": t, "score": v} for (m, t), v in sorted(scores.items())]
        cache.write_text(json.dumps({"expert_key": cfg.expert_key(), "scores": rows}, indent=1))
    return scores


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    config: RunConfig
    table: ScoreTable
    report: GainReport
    rows: list[dict]
    stages: list[StageResult] = field(default_factory=list)
    probes: dict[str, FeatureProbe] = field(default_factory=dict)
    drift: dict[int, list[DriftEntry]] = field(default_factory=dict)

    def results_csv(self) -> str:
        return format_results_csv(self.rows)


def format_results_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def summary_document(cfg: RunConfig, table: ScoreTable, report: GainReport,
                     drift: dict[int, list[DriftEntry]], complete: bool) -> dict:
    doc = {
        "run_id": cfg.run_id(),
        "method": cfg.method.name,
        "method_label": cfg.method.label,
        "order": list(cfg.order),
        "seed": cfg.seed,
        "complete": complete,
        "stages_done": len(report.bw),
        **report.to_json(),
        "expert_scores": [{"modality": m, "task": t, "score": v} for (m, t), v in sorted(table.sup.items())],
        "misalignment": {str(i): [{"modality": e.modality_id, "drift": e.drift, "test_loss": e.loss_before}
                                  for e in entries] for i, entries in sorted(drift.items())},
        "conventions": METRIC_CONVENTIONS,
        "config": to_flat(cfg),
    }
    doc["config"].pop("output_dir", None)
    return doc


def _write_json(path: Path, doc) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


def run_experiment(cfg: RunConfig, out_dir: str | Path | None = None,
                   experts: dict[tuple[str, str], float] | None = None,
                   datasets: dict[str, ModalityDataset] | None = None,
                   keep_models: bool = False, diagnose: bool = True) -> RunResult:
    """Train stages 1..m of ``cfg.method`` and score every learned modality after each stage.

    With ``out_dir`` the run writes, after every stage: ``results.csv``
    (appended), ``summary.json`` (rewritten), ``checkpoints/stage<i>.ckpt``
    and, when a realigning stage ran, ``replay/stage<i>.json`` with the replay
    indices.  Timestamps go only to ``run.log``.
    """
    datasets = datasets or build_datasets(cfg)
    experts = experts if experts is not None else expert_scores(cfg, datasets)
    out = None
    if out_dir is not None:
        out = resolve_output_dir(out_dir)
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump_config(cfg))
        (out / "results.csv").write_text(",".join(RESULT_COLUMNS) + "\n")
        runlog = open(out / "run.log", "a")
    table = ScoreTable(order=list(cfg.order))
    for (m, t), v in experts.items():
        if m in cfg.order:
            table.set_sup(m, t, v)
    history = History()
    model = initial_model(cfg)
    rows: list[dict] = []
    result = RunResult(cfg, table, None, rows)
    probes: dict[str, FeatureProbe] = {}
    drift: dict[int, list[DriftEntry]] = {}
    try:
        for i, m in enumerate(cfg.order, start=1):
            t0 = time.perf_counter()
            ctx = stage_context(cfg, i)
            res = run_method_stage(model, datasets[m], history, ctx, cfg.train)
            model = res.model
            new_rows = []
            for j in cfg.order[:i]:
                for t, score in evaluate(model, datasets[j]).items():
                    table.set_score(i, j, t, score)
                    sup = table.sup[(j, t)]
                    new_rows.append({"stage": i, "modality": j, "task": t, "score": score,
                                     "sup_score": sup, "relative_gain": 100.0 * score / sup if sup else float("nan")})
            rows.extend(new_rows)
            if diagnose:
                by_id = {d.modality_id: d for d in history.datasets}
                drift[i] = diagnose_misalignment(model, probes, None, by_id)
                probes[m] = snapshot_probe(model, m, probe_inputs(datasets[m]), tap=DIAGNOSTIC_TAP)
            if keep_models:
                result.stages.append(res)
            report = gain_report(table, range(1, i + 1))
            if out is not None:
                _persist_stage(out, cfg, i, res, new_rows, table, report, drift,
                               complete=i == len(cfg.order))
                runlog.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} stage {i} ({m}) "
                             f"done in {time.perf_counter() - t0:.2f}s bw={report.bw[-1]:.2f}\n")
                runlog.flush()
            log.info("%s stage %d (%s): bw=%.2f fw=%.2f", cfg.run_id(), i, m, report.bw[-1], report.fw[-1])
    finally:
        if out is not None:
            runlog.close()
    result.report = gain_report(table, range(1, len(cfg.order) + 1))
    result.probes = probes
    result.drift = drift
    return result


def _persist_stage(out: Path, cfg: RunConfig, stage: int, res: StageResult, new_rows: list[dict],
                   table: ScoreTable, report: GainReport, drift, complete: bool) -> None:
    meta = {"stage": stage, "run_id": cfg.run_id(), "method": cfg.method.name,
            "order": list(cfg.order),
            "seeds": {k: getattr(cfg.resolved_seeds, k) for k in ("data", "task", "init", "train", "replay", "fisher")},
            "realign_seed": stage_context(cfg, stage).realign_seed,
            "merge_record": res.merge_record.to_json() if res.merge_record else None}
    ck = out / "checkpoints"
    save_checkpoint(ck / f"stage{stage}.ckpt", res.model, dict(meta, kind="final"))
    if res.merge_record is not None:
        save_checkpoint(ck / f"stage{stage}_vanilla.ckpt", res.vanilla, dict(meta, kind="vanilla"))
    if res.realign_replay is not None:
        (out / "replay").mkdir(exist_ok=True)
        rep = res.realign_replay
        _write_json(out / "replay" / f"stage{stage}.json", {
            "stage": stage, "fraction": rep.fraction, "seed": rep.seed, "sources": rep.sources,
            "realign_seed": stage_context(cfg, stage).realign_seed,
            "groups": [{"modality": g.modality_id, "task": g.task_id, "indices": g.indices.tolist()}
                       for g in rep.groups],
            "mislabels": [{"modality": g.modality_id, "task": g.task_id, "labels": g.y.tolist()}
                          for g in rep.groups] if rep.meta.get("corrupted") else None,
        })
    with open(out / "results.csv", "a", newline="") as fh:
        body = format_results_csv(new_rows)
        fh.write(body.split("\n", 1)[1])
    _write_json(out / "summary.json", summary_document(cfg, table, report, drift, complete))
