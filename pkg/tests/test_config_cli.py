from __future__ import annotations

import csv
import filecmp
import json
from pathlib import Path

import pytest
import yaml

from fedgfm import cli
from fedgfm.config import ExperimentConfig, config_from_dict, dump_config, load_config
from fedgfm.errors import ConfigError

SMALL = {
    "data": {"synthetic": {"domains": 3, "node_count": 40, "feature_dim": 16}},
    "model": {"d": 16, "heads": 2, "tokens": 8},
    "federation": {"rounds": 2, "optimizer": "adam", "lr": 1.0e-3},
    "finetune": {"seeds": [0, 1, 2], "max_epochs": 30},
}


def write_cfg(tmp_path: Path, raw: dict, name: str = "cfg.yaml") -> Path:
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw), encoding="utf-8")
    return path


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


# ---------------------------------------------------------------------------
# config


def test_defaults_carry_the_published_schedule():
    cfg = ExperimentConfig()
    assert (cfg.federation.rounds, cfg.federation.epochs, cfg.federation.lr) == (25, 2, 1e-4)
    assert (cfg.model.heads, cfg.model.tokens, cfg.adadpp.prompt_count) == (4, 128, 3)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="learning_rate"):
        config_from_dict({"federation": {"learning_rate": 0.1}})
    with pytest.raises(ConfigError):
        config_from_dict({"modle": {}})


def test_config_round_trip(tmp_path):
    cfg = config_from_dict(SMALL)
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml").to_dict() == cfg.to_dict()


def test_missing_container_named(tmp_path):
    path = write_cfg(tmp_path, {**SMALL, "data": {"containers": ["nowhere"]}})
    with pytest.raises(ConfigError, match="nowhere"):
        load_config(path)


# ---------------------------------------------------------------------------
# CLI end to end


def test_pipeline_end_to_end(tmp_path, capsys):
    cfg = write_cfg(tmp_path, SMALL)
    out = tmp_path / "run"
    assert run("pretrain", "--config", cfg, "--out", out, "--deterministic") == 0
    assert (out / "checkpoints" / "seed_0" / "manifest.json").exists()
    assert run("finetune", "--config", cfg, "--out", out) == 0
    lines = (out / "metrics.ndjson").read_text().splitlines()
    # 3 single-domain clients x 3 fine-tune seeds, one record each
    assert len(lines) == 9
    per_dataset = {}
    for line in lines:
        rec = json.loads(line)
        per_dataset[rec["dataset"]] = per_dataset.get(rec["dataset"], 0) + 1
        assert 0.0 <= rec["value"] <= 1.0
    assert sorted(per_dataset.values()) == [3, 3, 3]
    assert run("evaluate", "--config", cfg, "--out", out) == 0
    a = {(r["client"], r["seed"]): r["value"] for r in map(json.loads, lines)}
    b = {(r["client"], r["seed"]): r["value"] for r in map(json.loads, (out / "eval_metrics.ndjson").read_text().splitlines())}
    assert a == b
    report = json.loads((out / "run_report.json").read_text())
    assert report["command"] == "evaluate" and report["config"]["model"]["d"] == 16
    assert not (out / ".fedgfm.lock").exists()


def test_three_clients_per_dataset_times_three_seeds(tmp_path):
    raw = {**SMALL, "data": {**SMALL["data"], "partition": "louvain", "clients": 3}}
    raw["data"]["synthetic"] = {"domains": 1, "node_count": 90, "feature_dim": 16}
    cfg = write_cfg(tmp_path, raw)
    out = tmp_path / "run"
    assert run("partition", "--config", cfg, "--out", out) == 0
    assert len(json.loads((out / "partition" / "clients.json").read_text())) == 3
    assert run("pretrain", "--config", cfg, "--out", out, "--deterministic") == 0
    assert run("finetune", "--config", cfg, "--out", out) == 0
    assert len((out / "metrics.ndjson").read_text().splitlines()) == 9


def test_partition_rerun_bitwise(tmp_path):
    raw = {**SMALL, "data": {"synthetic": {"domains": 1, "node_count": 60, "feature_dim": 16}, "partition": "louvain"}}
    cfg = write_cfg(tmp_path, raw)
    run("partition", "--config", cfg, "--out", tmp_path / "a")
    run("partition", "--config", cfg, "--out", tmp_path / "b")
    for k in range(3):
        d1 = tmp_path / "a" / "partition" / f"client_{k:04d}"
        d2 = tmp_path / "b" / "partition" / f"client_{k:04d}"
        names = sorted(p.name for p in d1.iterdir())
        assert names == sorted(p.name for p in d2.iterdir())
        assert all(filecmp.cmp(d1 / n, d2 / n, shallow=False) for n in names)


def test_deterministic_pretrain_and_resume(tmp_path):
    cfg = write_cfg(tmp_path, {**SMALL, "federation": {**SMALL["federation"], "rounds": 3}})
    for name in ("a", "b"):
        assert run("pretrain", "--config", cfg, "--out", tmp_path / name, "--deterministic") == 0
    assert run("pretrain", "--config", cfg, "--out", tmp_path / "c", "--deterministic", "--until", "1") == 0
    assert run("pretrain", "--config", cfg, "--out", tmp_path / "c", "--deterministic", "--resume") == 0
    files = ["global/params.bin", "global/params.json", "manifest.json", "rounds.ndjson", "prototypes.bin"]
    ck = lambda n: tmp_path / n / "checkpoints" / "seed_0"  # noqa: E731
    for f in files:
        assert filecmp.cmp(ck("a") / f, ck("b") / f, shallow=False), f
        assert filecmp.cmp(ck("a") / f, ck("c") / f, shallow=False), f


def test_diagnose_tables_and_figures(tmp_path):
    cfg = write_cfg(tmp_path, SMALL)
    out = tmp_path / "run"
    run("pretrain", "--config", cfg, "--out", out, "--deterministic")
    assert run("diagnose", "--config", cfg, "--out", out, "--reference", out / "checkpoints" / "seed_0") == 0
    diag = out / "diagnose"
    rows = list(csv.reader(open(diag / "similarity_federated.csv")))
    names = rows[0][1:]
    m = [[float(x) for x in r[1:]] for r in rows[1:]]
    assert len(names) == 3
    assert all(m[i][i] == 1.0 for i in range(3))
    assert all(m[i][j] == m[j][i] for i in range(3) for j in range(3))
    for f in ("similarity_raw_features.csv", "similarity_centralized_reference.csv", "degree_histogram.csv",
              "degree_histogram.png", "similarity_federated.png"):
        assert (diag / f).stat().st_size > 0
    deg = list(csv.reader(open(diag / "degree_histogram.csv")))
    assert int(deg[-1][0]) <= 30


def test_sweep_rows_and_paired_seeds(tmp_path):
    raw = {**SMALL, "federation": {**SMALL["federation"], "rounds": 1}, "finetune": {"seeds": [0], "max_epochs": 10}}
    cfg = write_cfg(tmp_path, raw)
    out = tmp_path / "run"
    assert run("sweep", "--config", cfg, "--out", out, "--axis", "prompt_count") == 0
    rows = list(csv.DictReader(open(out / "sweep_prompt_count.csv")))
    assert [r["value"] for r in rows] == ["1", "2", "3", "4", "8"]
    assert len({r["seeds"] for r in rows}) == 1
    assert run("sweep", "--config", cfg, "--out", out, "--axis", "ablation") == 0
    rows = list(csv.DictReader(open(out / "sweep_ablation.csv")))
    assert [r["value"] for r in rows] == ["full", "wo_ancdai", "wo_adadpp"]
    assert 128 in cli.SWEEP_GRIDS["codebook_tokens"]


def test_few_shot_flag(tmp_path):
    cfg = write_cfg(tmp_path, SMALL)
    out = tmp_path / "run"
    run("pretrain", "--config", cfg, "--out", out, "--deterministic")
    assert run("finetune", "--config", cfg, "--out", out, "--shots", "2") == 0
    rec = json.loads((out / "metrics.ndjson").read_text().splitlines()[0])
    assert rec["ablation_flags"]["shots"] == 2


# ---------------------------------------------------------------------------
# failure modes


def test_exit_codes(tmp_path):
    assert run("pretrain", "--config", tmp_path / "missing.yaml", "--out", tmp_path / "o") == 2
    bad = write_cfg(tmp_path, {"federation": {"rouns": 3}}, "bad.yaml")
    assert run("pretrain", "--config", bad, "--out", tmp_path / "o") == 2
    cfg = write_cfg(tmp_path, SMALL)
    assert run("evaluate", "--config", cfg, "--out", tmp_path / "empty") == 2
    assert run("sweep", "--config", cfg, "--out", tmp_path / "o", "--axis", "sigma", "--values", "a,b") == 2
    ck = tmp_path / "broken"
    (ck / "checkpoints" / "seed_0").mkdir(parents=True)
    (ck / "checkpoints" / "seed_0" / "manifest.json").write_text("{nope")
    assert run("finetune", "--config", cfg, "--out", ck) == 3


def test_output_lock(tmp_path):
    cfg = write_cfg(tmp_path, SMALL)
    out = tmp_path / "run"
    out.mkdir()
    (out / ".fedgfm.lock").write_text("12345")
    assert run("pretrain", "--config", cfg, "--out", out) == 2
