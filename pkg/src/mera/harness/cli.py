"""Command-line entry point: ``mera <subcommand> ...``.

Every configuration key can be given as ``--dotted.key value`` (or
``--dotted.key=value``); a few common ones have short aliases.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from mera.clmethods import merge, realign
from mera.errors import ConfigError, MeraError
from mera.harness.checkpoint import load_checkpoint, save_checkpoint
from mera.harness.config import known_key, load_config, order_label
from mera.harness.runner import (
    build_datasets,
    evaluate,
    expert_scores,
    resolve_output_dir,
    run_experiment,
)
from mera.metrics import ScoreTable, aggregate, gain_report
from mera.modalities import replay_from_indices

ALIASES = {"order": "order", "method": "method.name", "replay_frac": "method.r",
           "seed": "seed", "out": "output_dir"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'dotted.key = value' file")
    p.add_argument("--order", help="sequential, reverse or a comma-separated list")
    p.add_argument("--method", help="ft, replay, ewc, eproj or mera")
    p.add_argument("--replay-frac", dest="replay_frac", help="replay fraction r")
    p.add_argument("--seed", help="master seed")
    p.add_argument("--out", help="output directory")


def _split_overrides(extra: list[str]) -> dict[str, str]:
    """Parse leftover ``--key value`` / ``--key=value`` pairs into config overrides."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise UsageError(f"flag --{key} needs a value")
            value = extra[i + 1]
            i += 1
        if not known_key(key):
            raise UsageError(f"unknown flag --{key}")
        out[key] = value
        i += 1
    return out


def _load(args, extra: list[str]):
    overrides = _split_overrides(extra)
    for attr, key in ALIASES.items():
        v = getattr(args, attr, None)
        if v is not None:
            overrides[key] = v
    return load_config(getattr(args, "config", None), overrides)


def _scores_csv(scores: dict[tuple[str, str], float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["modality", "task", "score"])
    for (m, t), v in sorted(scores.items()):
        w.writerow([m, t, repr(v)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_run(args, extra) -> int:
    cfg = _load(args, extra)
    out = resolve_output_dir(cfg.output_dir)
    experts = expert_scores(cfg, cache_dir=args.experts_cache) if args.experts_cache else None
    res = run_experiment(cfg, out_dir=out, experts=experts)
    print(f"{cfg.run_id()}: bw_mean={res.report.mean:.4f} bw_std={res.report.std:.4f} -> {out}")
    return 0


def cmd_experts(args, extra) -> int:
    cfg = _load(args, extra)
    scores = expert_scores(cfg, cache_dir=args.cache)
    sys.stdout.write(_scores_csv(scores))
    return 0


def cmd_merge(args, extra) -> int:
    if extra:
        raise UsageError(f"unknown arguments {extra}")
    vanilla, vmeta = load_checkpoint(args.vanilla)
    if args.previous is None:
        if args.stage != 1:
            raise UsageError("--previous is required for stage > 1")
        previous = vanilla
    else:
        previous, _ = load_checkpoint(args.previous)
    merged, record = merge(previous, vanilla, args.stage)
    meta = {k: v for k, v in vmeta.items() if k != "model"}
    meta.update(kind="merged", stage=args.stage, merge_record=record.to_json())
    save_checkpoint(args.output, merged, meta)
    print(f"merged stage {args.stage} with coefficients {record.coefficients} -> {args.output}")
    return 0


def load_replay_spec(path: str | Path, datasets) -> tuple:
    """Replay set and realign seed from a ``replay/stage<i>.json`` document."""
    doc = json.loads(Path(path).read_text())
    index_sets = {(g["modality"], g["task"]): g["indices"] for g in doc["groups"]}
    labels = None
    if doc.get("mislabels"):
        labels = {(g["modality"], g["task"]): g["labels"] for g in doc["mislabels"]}
    rep = replay_from_indices(list(datasets.values()), index_sets, doc["fraction"], doc["seed"], labels)
    return rep, doc.get("realign_seed")


def cmd_realign(args, extra) -> int:
    cfg = _load(args, extra)
    model, meta = load_checkpoint(args.checkpoint)
    cfg = cfg.with_overrides({"order": ",".join(model.modalities)})
    datasets = build_datasets(cfg)
    replay, seed = load_replay_spec(args.replay, datasets)
    if args.realign_seed is not None:
        seed = args.realign_seed
    if seed is None:
        raise UsageError("replay spec has no realign_seed; pass --realign-seed")
    out = realign(model, replay, seed, cfg.train)
    meta = {k: v for k, v in meta.items() if k != "model"}
    meta.update(kind="realigned", realign_seed=seed, replay_size=len(replay))
    save_checkpoint(args.output, out, meta)
    print(f"realigned {len(model.modalities)} connectors on {len(replay)} samples -> {args.output}")
    return 0


def cmd_eval(args, extra) -> int:
    cfg = _load(args, extra)
    model, _ = load_checkpoint(args.checkpoint)
    mods = args.modalities.split(",") if args.modalities else list(model.modalities)
    unknown = [m for m in mods if m not in model.modalities]
    if unknown:
        raise UsageError(f"checkpoint has no modality {unknown[0]!r}")
    cfg = cfg.with_overrides({"order": ",".join(mods)})
    datasets = build_datasets(cfg)
    scores = {(m, t): v for m in mods for t, v in evaluate(model, datasets[m]).items()}
    sys.stdout.write(_scores_csv(scores))
    return 0


def read_run(run_dir: Path) -> dict:
    """Summary metadata plus gains recomputed from the raw ``results.csv``."""
    summary = json.loads((run_dir / "summary.json").read_text())
    table = ScoreTable(order=list(summary["order"]))
    with open(run_dir / "results.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            stage = int(row["stage"])
            table.set_sup(row["modality"], row["task"], float(row["sup_score"]))
            table.set_score(stage, row["modality"], row["task"], float(row["score"]))
    stages = sorted({s for s, _, _ in table.stages})
    return {"summary": summary, "report": gain_report(table, stages)}


def cmd_report(args, extra) -> int:
    if extra:
        raise UsageError(f"unknown arguments {extra}")
    runs = []
    for d in args.runs:
        d = Path(d)
        if (d / "summary.json").exists():
            runs.append(read_run(d))
        else:
            found = sorted(p.parent for p in d.glob("*/summary.json"))
            if not found:
                raise UsageError(f"no run found under {d}")
            runs.extend(read_run(p) for p in found)
    out = resolve_output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)

    runs.sort(key=lambda r: r["summary"]["run_id"])
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "method", "order", "seed", "stages", "bw_mean", "bw_std", "bw_std_sample"])
        for r in runs:
            s, rep = r["summary"], r["report"]
            w.writerow([s["run_id"], s["method_label"], order_label(s["order"]), s["seed"], len(rep.bw),
                        repr(rep.mean), repr(rep.std), repr(rep.std_sample)])

    # one row per (method, order), plus an "all" row per method pooling every order
    groups: dict[tuple[str, str], list] = {}
    for r in runs:
        s = r["summary"]
        groups.setdefault((s["method_label"], order_label(s["order"])), []).append(r["report"])
        groups.setdefault((s["method_label"], "all"), []).append(r["report"])
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "order", "runs", "bw_mean", "bw_std", "bw_mean_seed_std"])
        for (label, order), reps in sorted(groups.items()):
            means = [rp.mean for rp in reps]
            m, sd = aggregate(means)
            std_avg = aggregate([rp.std for rp in reps])[0]
            w.writerow([label, order, len(reps), repr(m), repr(std_avg), repr(sd)])

    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "method", "order", "seed", "stage", "bw_relative_gain", "fw_relative_gain"])
        for r in runs:
            s, rep = r["summary"], r["report"]
            for i, (bw, fw) in enumerate(zip(rep.bw, rep.fw), start=1):
                w.writerow([s["run_id"], s["method_label"], order_label(s["order"]), s["seed"], i,
                            repr(bw), repr(fw)])
    print(f"{len(runs)} run(s) -> {out}/summary.csv, table.csv, curves.csv")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mera", description="Modality-incremental continual learning experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    r = sub.add_parser("run", help="train all stages of one method and write artifacts")
    _config_args(r)
    r.add_argument("--experts-cache", help="directory for cached expert scores")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("experts", help="train or load single-modality upper bounds")
    _config_args(e)
    e.add_argument("--cache", help="cache directory")
    e.set_defaults(func=cmd_experts)

    m = sub.add_parser("merge", help="merge a vanilla stage checkpoint into the previous model")
    m.add_argument("--stage", type=int, required=True)
    m.add_argument("--previous", help="stage i-1 checkpoint (optional for stage 1)")
    m.add_argument("--vanilla", required=True)
    m.add_argument("--output", "-o", required=True)
    m.set_defaults(func=cmd_merge)

    a = sub.add_parser("realign", help="retrain all connectors of a checkpoint on a replay spec")
    _config_args(a)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--replay", required=True, help="replay/stage<i>.json from a run")
    a.add_argument("--realign-seed", type=int)
    a.add_argument("--output", "-o", required=True)
    a.set_defaults(func=cmd_realign)

    v = sub.add_parser("eval", help="score a checkpoint on test splits")
    _config_args(v)
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--modalities", help="comma-separated; default all in the checkpoint")
    v.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="aggregate run directories into summary and curve CSVs")
    rp.add_argument("runs", nargs="+", help="run directories, or parents of run directories")
    rp.add_argument("--out", default="report")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError("mera: error: a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args, extra)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"mera: config error at {exc.path}: {exc}", file=sys.stderr)
        return 2
    except (MeraError, OSError, KeyError, ValueError) as exc:
        print(f"mera: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
