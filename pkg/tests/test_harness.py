import csv
import json
import struct

import numpy as np
import pytest

from mera.errors import ConfigError, FormatError, VersionError
from mera.harness.checkpoint import decode, encode, load_checkpoint, save_checkpoint
from mera.harness.cli import main
from mera.harness.config import (
    RunConfig,
    dump_config,
    known_key,
    load_config,
    order_label,
    parse_config_text,
)
from mera.harness.runner import build_datasets, expert_scores, initial_model, run_experiment
from mera.metrics import aggregate
from mera.nnkernel import ParameterSet

SMALL = ["--data.train_size", "200", "--data.test_size", "50"]
SMALL_FLAT = {"data.train_size": "200", "data.test_size": "50"}


# -- config --------------------------------------------------------------------------

def test_config_round_trips_through_flat_text(tmp_path):
    cfg = load_config(None, {"order": "reverse", "method.name": "replay", "method.r": "0.05",
                             "modality.audio.gain": "0.7", "train.lr_realign_connector": "0.02"})
    assert cfg.order == ("pointcloud", "audio", "video", "image")
    assert cfg.modalities["audio"].gain == 0.7
    p = tmp_path / "c.txt"
    p.write_text("# comment\n" + dump_config(cfg))
    assert load_config(p) == cfg
    assert order_label(cfg.order) == "reverse" and order_label(("image", "audio")) == "image,audio"


def test_config_errors_name_the_key():
    with pytest.raises(ConfigError) as e:
        load_config(None, {"method.r": "1.5", "method.name": "replay"})
    assert e.value.path == "method.r"
    with pytest.raises(ConfigError) as e:
        load_config(None, {"train.finetune_epochs": "three"})
    assert e.value.path == "train.finetune_epochs"
    with pytest.raises(ConfigError) as e:
        parse_config_text("method.colour = red\n")
    assert e.value.path == "method.colour"
    with pytest.raises(ConfigError):
        load_config(None, {"order": "image,image"})
    assert known_key("modality.video.noise_sigma") and not known_key("modality.video.colour")


def test_run_id_is_stable_and_seed_specific():
    a = RunConfig()
    assert a.run_id() == RunConfig().run_id()
    assert a.run_id() != a.with_overrides({"seed": "1"}).run_id()


# -- checkpoint ----------------------------------------------------------------------

def test_checkpoint_round_trip_is_bitwise(tmp_path):
    cfg = RunConfig(order=("image", "video")).with_overrides(SMALL_FLAT)
    m = initial_model(cfg).register_modality("image", 24, 1, 2).register_modality("video", 32, 1, 3)
    m.params["backbone.w1"][0, 0] = -0.0
    save_checkpoint(tmp_path / "a.ckpt", m, {"note": "x"})
    back, meta = load_checkpoint(tmp_path / "a.ckpt")
    assert back.params.digest() == m.params.digest()
    assert list(back.modalities.items()) == list(m.modalities.items())
    assert meta["note"] == "x"
    assert (tmp_path / "a.ckpt").read_bytes() == encode(back.params, meta)


def test_checkpoint_corruption_is_reported_with_offset():
    buf = encode(ParameterSet({"a.w": np.ones((2, 3), np.float32)}), {"k": 1})
    with pytest.raises(FormatError) as e:
        decode(buf[:-5])
    assert e.value.offset > 0 and "truncated" in str(e.value)
    with pytest.raises(VersionError) as e:
        decode(buf[:4] + struct.pack("<B", 9) + buf[5:])
    assert e.value.offset == 4
    with pytest.raises(FormatError) as e:
        decode(b"XERA" + buf[4:])
    assert e.value.offset == 0
    params, meta = decode(buf)
    assert meta == {"k": 1} and params["a.w"].shape == (2, 3)


# -- runs ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def experts_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("experts")


def test_single_modality_run_has_only_the_convention_row(tmp_path, experts_dir):
    cfg = RunConfig(order=("audio",)).with_overrides(SMALL_FLAT)
    res = run_experiment(cfg, tmp_path, experts=expert_scores(cfg, cache_dir=experts_dir))
    assert res.report.bw == [100.0] and res.report.std == 0.0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["complete"] and len(summary["per_stage"]) == 1


def test_results_are_byte_identical_across_runs(tmp_path, experts_dir):
    cfg = RunConfig(order=("image", "video")).with_overrides(dict(SMALL_FLAT, **{"method.name": "mera"}))
    ex = expert_scores(cfg, cache_dir=experts_dir)
    run_experiment(cfg, tmp_path / "a", experts=ex)
    run_experiment(cfg, tmp_path / "b", experts=ex)
    for f in ("results.csv", "summary.json", "checkpoints/stage2.ckpt", "replay/stage2.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_expert_cache_is_reused(tmp_path):
    cfg = RunConfig(order=("image",)).with_overrides(SMALL_FLAT)
    first = expert_scores(cfg, cache_dir=tmp_path)
    assert len(list(tmp_path.glob("experts-*.json"))) == 1
    assert expert_scores(cfg, datasets={}, cache_dir=tmp_path) == first


# -- cli -----------------------------------------------------------------------------

def test_cli_rejects_unknown_flags_and_commands(capsys):
    assert main(["run", "--no-such-flag", "1"]) == 2
    assert main(["frobnicate"]) == 2
    assert main([]) == 2
    assert main(["run", "--method", "mera", "--method.realign", "true"]) == 2
    assert "unknown flag" in capsys.readouterr().err


def test_cli_merge_at_stage_one_is_the_vanilla(tmp_path):
    cfg = RunConfig(order=("image",)).with_overrides(SMALL_FLAT)
    m = initial_model(cfg).register_modality("image", 24, 1, 2)
    save_checkpoint(tmp_path / "v.ckpt", m)
    assert main(["merge", "--stage", "1", "--vanilla", str(tmp_path / "v.ckpt"), "-o", str(tmp_path / "m.ckpt")]) == 0
    merged, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert merged.params.digest() == m.params.digest()
    assert meta["merge_record"]["coefficients"] == [0.0, 1.0]
    assert main(["merge", "--stage", "2", "--vanilla", str(tmp_path / "v.ckpt"), "-o", str(tmp_path / "x")]) == 2


@pytest.fixture(scope="module")
def cli_runs(tmp_path_factory, experts_dir):
    root = tmp_path_factory.mktemp("runs")
    for seed in ("0", "1"):
        code = main(["run", "--order", "image,video", "--method", "mera", "--seed", seed,
                     "--out", str(root / f"s{seed}"), "--experts-cache", str(experts_dir), *SMALL])
        assert code == 0
    return root


def test_cli_report_matches_recomputation(cli_runs, tmp_path):
    assert main(["report", str(cli_runs), "--out", str(tmp_path / "rep")]) == 0
    with open(tmp_path / "rep" / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    for row in rows:
        run = cli_runs / f"s{row['seed']}"
        bw = [100.0]
        with open(run / "results.csv") as fh:
            res = list(csv.DictReader(fh))
        old = [float(r["score"]) / float(r["sup_score"]) for r in res if r["stage"] == "2" and r["modality"] == "image"]
        bw.append(100.0 * sum(old) / len(old))
        mean, std = aggregate(bw)
        assert abs(float(row["bw_mean"]) - mean) < 1e-9
        assert abs(float(row["bw_std"]) - std) < 1e-9
    with open(tmp_path / "rep" / "curves.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4
    with open(tmp_path / "rep" / "table.csv") as fh:
        assert [r["order"] for r in csv.DictReader(fh)] == ["all", "image,video"]


def test_cli_offline_merge_and_realign_reproduce_the_run(cli_runs, tmp_path):
    run = cli_runs / "s0"
    ck = run / "checkpoints"
    assert main(["merge", "--stage", "2", "--previous", str(ck / "stage1.ckpt"),
                 "--vanilla", str(ck / "stage2_vanilla.ckpt"), "-o", str(tmp_path / "m.ckpt")]) == 0
    assert main(["realign", "--checkpoint", str(tmp_path / "m.ckpt"), "--replay", str(run / "replay" / "stage2.json"),
                 "-o", str(tmp_path / "r.ckpt"), *SMALL]) == 0
    ours, _ = load_checkpoint(tmp_path / "r.ckpt")
    theirs, _ = load_checkpoint(ck / "stage2.ckpt")
    assert ours.params.digest() == theirs.params.digest()


def test_cli_eval_and_experts(cli_runs, capsys, experts_dir):
    assert main(["eval", "--checkpoint", str(cli_runs / "s0" / "checkpoints" / "stage2.ckpt"), *SMALL]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "modality,task,score" and len(lines) == 5
    assert main(["eval", "--checkpoint", str(cli_runs / "s0" / "checkpoints" / "stage1.ckpt"),
                 "--modalities", "video", *SMALL]) == 2
    assert main(["experts", "--order", "image", "--cache", str(experts_dir), *SMALL]) == 0
    assert capsys.readouterr().out.count("\n") == 3


def test_output_root_env_prefixes_relative_dirs(tmp_path, monkeypatch, experts_dir):
    monkeypatch.setenv("MERA_OUTPUT_ROOT", str(tmp_path))
    assert main(["run", "--order", "image", "--out", "rel", "--experts-cache", str(experts_dir), *SMALL]) == 0
    assert (tmp_path / "rel" / "results.csv").exists()
