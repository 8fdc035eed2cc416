"""Command-line entry point: partition, pretrain, finetune, evaluate, diagnose, sweep."""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import downstream as ds
from . import pipeline as pl
from .config import ExperimentConfig, config_from_dict, load_config
from .data import degree_distribution, save_collection, save_graph
from .data.graph import GraphCollection
from .errors import ConfigError, FedGFMError
from .federation import ClientState, resume, run_pretraining, save_checkpoint

log = logging.getLogger("fedgfm")

LOCK_NAME = ".fedgfm.lock"
SWEEP_GRIDS = {
    "codebook_tokens": [32, 64, 128, 256],
    "prompt_count": [1, 2, 3, 4, 8],
    "sigma": [0.01, 0.05, 0.1, 0.2],
}
ABLATIONS = {
    "full": {"ancdai_enabled": True, "adadpp_enabled": True},
    "wo_ancdai": {"ancdai_enabled": False, "adadpp_enabled": True},
    "wo_adadpp": {"ancdai_enabled": True, "adadpp_enabled": False},
}


@contextmanager
def output_lock(out: Path):
    """One experiment process per output directory."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        owner = lock.read_text(encoding="utf-8").strip() or "?"
        raise ConfigError(f"{out} is locked by another run (pid {owner}); remove {lock} if that run is gone") from None
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _git_stamp() -> str:
    try:
        res = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_report(out: Path, command: str, cfg: ExperimentConfig, summaries=None, artifacts=None, extra=None) -> Path:
    report = {
        "command": command,
        "version": __version__,
        "git": _git_stamp(),
        "config": cfg.to_dict(),
        "summaries": summaries or [],
        "artifacts": sorted(str(a) for a in (artifacts or [])),
        **(extra or {}),
    }
    path = out / "run_report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True, default=str), encoding="utf-8")
    return path


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({}).validate()
    if args.seed is not None:
        cfg.federation.seeds = [args.seed]
    return cfg


def _checkpoint_dir(out: Path, seed: int) -> Path:
    return out / "checkpoints" / f"seed_{seed}"


# ---------------------------------------------------------------------------
# subcommands


def cmd_partition(args, cfg: ExperimentConfig, out: Path) -> list[Path]:
    datasets = pl.load_datasets(cfg)
    clients = pl.make_clients(cfg, datasets, cfg.federation.seeds[0])
    root = out / "partition"
    entries, written = [], []
    for c in clients:
        path = root / f"client_{c.client_id:04d}"
        if isinstance(c.data, GraphCollection):
            save_collection(c.data, path)
        else:
            save_graph(c.data, path)
        entries.append({"id": c.client_id, "dataset": c.dataset, "path": str(path.relative_to(out))})
        written.append(path)
    (root / "clients.json").write_text(json.dumps(entries, indent=2), encoding="utf-8")
    print(f"wrote {len(clients)} client containers under {root}")
    return written


def cmd_pretrain(args, cfg: ExperimentConfig, out: Path) -> list[Path]:
    datasets = pl.load_datasets(cfg)
    written = []
    for seed in cfg.federation.seeds:
        clients = pl.make_clients(cfg, datasets, seed)
        ckpt = _checkpoint_dir(out, seed)
        if args.resume and (ckpt / "manifest.json").exists():
            states = [ClientState(c.client_id, c.data) for c in clients]
            fc, server = resume(ckpt, states)
            if args.deterministic:
                fc = replace(fc, deterministic=True)
            server, _ = run_pretraining(fc, states, server=server, until=args.until)
            save_checkpoint(ckpt, fc, server, states)
        else:
            server, states, fc = pl.pretrain(cfg, clients, seed, args.deterministic, ckpt, until=args.until)
        last = server.records[-1] if server.records else None
        if last and last.losses:
            mean = float(np.mean([b.total for b in last.losses.values()]))
            print(f"seed {seed}: round {server.round}/{fc.rounds}, mean client loss {mean:.4f}, checkpoint {ckpt}")
        else:
            print(f"seed {seed}: round {server.round}/{fc.rounds}, checkpoint {ckpt}")
        written.append(ckpt)
    return written


def _finetune_all(cfg: ExperimentConfig, out: Path, checkpoint: Path | None, heads: bool) -> list[pl.MetricRecord]:
    datasets = pl.load_datasets(cfg)
    records = []
    for seed in cfg.federation.seeds:
        ckpt = checkpoint or _checkpoint_dir(out, seed)
        fc, gfm, pool = pl.load_model(ckpt)
        clients = pl.make_clients(cfg, datasets, fc.seed)
        flags = {"ancdai": fc.ancdai_enabled, "adadpp": fc.adadpp_enabled, "shots": cfg.finetune.shots}
        records += pl.finetune_eval(cfg, gfm, pool, clients, fc.seed, flags, out / "heads" if heads else None)
        if checkpoint is not None:
            break
    return records


def cmd_finetune(args, cfg: ExperimentConfig, out: Path) -> tuple[list[Path], list[dict]]:
    if args.shots is not None:
        cfg.finetune.shots = args.shots
    records = _finetune_all(cfg, out, Path(args.checkpoint) if args.checkpoint else None, heads=True)
    summary = pl.summarize(records)
    paths = [pl.write_records(records, out / "metrics.ndjson"), pl.write_csv(summary, out / "summary.csv")]
    for row in summary:
        print(f"{row['dataset']}: {row['metric_name']} {row['mean']:.4f} +/- {row['std']:.4f} ({row['runs']} runs)")
    return paths + [out / "heads"], summary


def cmd_evaluate(args, cfg: ExperimentConfig, out: Path) -> tuple[list[Path], list[dict]]:
    """Re-score saved heads on their test indices."""
    heads = sorted((out / "heads").glob("head_*.npz"))
    if not heads:
        raise ConfigError(f"no saved heads under {out / 'heads'}; run finetune first")
    datasets = pl.load_datasets(cfg)
    records = []
    cache: dict[int, tuple] = {}
    for h in heads:
        stem = h.stem.split("_")  # head_p{seed}_c{client}_s{seed}
        pseed, cid, fseed = int(stem[1][1:]), int(stem[2][1:]), int(stem[3][1:])
        if pseed not in cache:
            fc, gfm, pool = pl.load_model(Path(args.checkpoint) if args.checkpoint else _checkpoint_dir(out, pseed))
            cache[pseed] = (fc, gfm, pool, {c.client_id: c for c in pl.make_clients(cfg, datasets, pseed)})
        fc, gfm, pool, clients = cache[pseed]
        c = clients[cid]
        blob = np.load(h)
        head = ds.TaskHead(str(blob["kind"]), blob["weight"], blob["bias"])
        sp = ds.DataSplit(np.array([], dtype=np.int64), np.array([], dtype=np.int64), blob["test"])
        value = ds.evaluate(gfm, pool, head, c.data, sp)
        metric = "auc" if head.kind == "graph_cls_multitask" else "accuracy"
        flags = {"ancdai": fc.ancdai_enabled, "adadpp": fc.adadpp_enabled}
        records.append(pl.MetricRecord(c.dataset, cid, head.kind, metric, float(value), fseed, pseed, flags))
    summary = pl.summarize(records)
    paths = [pl.write_records(records, out / "eval_metrics.ndjson"), pl.write_csv(summary, out / "eval_summary.csv")]
    for row in summary:
        print(f"{row['dataset']}: {row['metric_name']} {row['mean']:.4f} +/- {row['std']:.4f}")
    return paths, summary


def cmd_diagnose(args, cfg: ExperimentConfig, out: Path) -> list[Path]:
    from . import plotting

    datasets = pl.load_datasets(cfg)
    seed = cfg.federation.seeds[0]
    fc, gfm, pool = pl.load_model(Path(args.checkpoint) if args.checkpoint else _checkpoint_dir(out, seed))
    reference = None
    if args.reference:
        _, reference, _ = pl.load_model(Path(args.reference))
    names = [d.name for d in datasets]
    report = ds.entanglement_diagnostic(
        gfm, pool, [d.data for d in datasets], names, reference, quantized=not args.encoder
    )
    diag = out / "diagnose"
    diag.mkdir(parents=True, exist_ok=True)
    written = []
    for name, table in report.tables().items():
        written.append(pl.write_table(table, diag / f"similarity_{name}.csv"))
    max_deg = None if args.max_degree <= 0 else args.max_degree
    dists = {d.name: degree_distribution(d.graph, max_deg) for d in datasets}
    top = max((max(v) for v in dists.values() if v), default=0)
    deg_table = [["degree", *names]] + [[k, *[dists[n].get(k, 0) for n in names]] for k in range(0, top + 1)]
    written.append(pl.write_table(deg_table, diag / "degree_histogram.csv"))
    if not args.no_figures:
        written.append(plotting.degree_histogram(dists, diag / "degree_histogram.png", max_deg))
        written.append(plotting.similarity_heatmap(report.raw, names, diag / "similarity_raw_features.png", "raw features"))
        written.append(
            plotting.similarity_heatmap(report.federated, names, diag / "similarity_federated.png", "federated embeddings")
        )
        if report.reference is not None:
            written.append(
                plotting.similarity_heatmap(report.reference, names, diag / "similarity_reference.png", "reference embeddings")
            )
    print(
        f"mean off-diagonal cosine: raw {report.mean_off_diagonal('raw'):.4f}, "
        f"federated ({report.representation}) {report.mean_off_diagonal('federated'):.4f}"
    )
    return written


def _apply_axis(cfg: ExperimentConfig, axis: str, value) -> tuple[ExperimentConfig, dict]:
    """Copy of ``cfg`` with one axis point applied, plus FedConfig overrides."""
    c = config_from_dict(cfg.to_dict())
    c.data.containers = list(cfg.data.containers)
    if axis == "codebook_tokens":
        c.model.tokens = int(value)
        return c, {}
    if axis == "prompt_count":
        c.adadpp.prompt_count = int(value)
        return c, {}
    if axis == "sigma":
        c.ancdai.sigma_rel = float(value)
        return c, {}
    if axis == "ablation":
        return c, dict(ABLATIONS[value])
    raise ConfigError(f"unknown sweep axis {axis!r}")


def cmd_sweep(args, cfg: ExperimentConfig, out: Path) -> tuple[list[Path], list[dict]]:
    axis = args.axis
    if args.values:
        cast = {"ablation": str, "sigma": float}.get(axis, int)
        try:
            values = [cast(v.strip()) for v in args.values.split(",")]
        except ValueError:
            raise ConfigError(f"bad --values for axis {axis}: {args.values!r}") from None
        if axis == "ablation" and any(v not in ABLATIONS for v in values):
            raise ConfigError(f"ablation values must be among {list(ABLATIONS)}")
    else:
        values = list(ABLATIONS) if axis == "ablation" else SWEEP_GRIDS[axis]
    datasets = pl.load_datasets(cfg)
    rows, all_records = [], []
    for value in values:
        point, overrides = _apply_axis(cfg, axis, value)
        records = []
        # the same pretrain and fine-tune seeds at every point, for paired comparison
        for seed in point.federation.seeds:
            clients = pl.make_clients(point, datasets, seed)
            server, states, fc = pl.pretrain(point, clients, seed, args.deterministic, **overrides)
            pool = pl.pool_from([s.prompts for s in states], fc.top_k) if fc.adadpp_enabled else None
            flags = {"axis": axis, "value": value, "ancdai": fc.ancdai_enabled, "adadpp": fc.adadpp_enabled}
            records += pl.finetune_eval(point, server.params, pool, clients, seed, flags)
        vals = np.array([r.value for r in records])
        row = {
            "axis": axis,
            "value": value,
            "mean": float(vals.mean()),
            "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
            "runs": int(vals.size),
            "seeds": ";".join(str(s) for s in point.federation.seeds),
        }
        rows.append(row)
        all_records += records
        print(f"{axis}={value}: {row['mean']:.4f} +/- {row['std']:.4f}")
    paths = [pl.write_csv(rows, out / f"sweep_{axis}.csv"), pl.write_records(all_records, out / f"sweep_{axis}.ndjson")]
    return paths, rows


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON experiment config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override federation seeds with a single seed")
    common.add_argument("--out", default="runs/default", help="output directory")
    common.add_argument("--deterministic", action="store_true", help="bitwise-reproducible run records")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fedgfm", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("partition", parents=[common], help="split datasets into client containers")

    sp = sub.add_parser("pretrain", parents=[common], help="federated pre-training")
    sp.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    sp.add_argument("--until", type=int, help="stop after this round")

    sp = sub.add_parser("finetune", parents=[common], help="fine-tune task heads and evaluate")
    sp.add_argument("--checkpoint", help="checkpoint directory (default: --out/checkpoints/seed_S)")
    sp.add_argument("--shots", type=int, help="few-shot: labelled training units per class")

    sp = sub.add_parser("evaluate", parents=[common], help="re-score heads saved by finetune")
    sp.add_argument("--checkpoint")

    sp = sub.add_parser("diagnose", parents=[common], help="inter-domain similarity and degree tables")
    sp.add_argument("--checkpoint")
    sp.add_argument("--reference", help="checkpoint of a centralised reference model")
    sp.add_argument("--max-degree", type=int, default=30, help="histogram cut-off (<= 0 for none)")
    sp.add_argument("--encoder", action="store_true", help="pool encoder output instead of quantised output")
    sp.add_argument("--no-figures", action="store_true", help="write CSV tables only")

    sp = sub.add_parser("sweep", parents=[common], help="sensitivity grid or ablation table")
    sp.add_argument("--axis", required=True, choices=[*SWEEP_GRIDS, "ablation"])
    sp.add_argument("--values", help="comma-separated grid (defaults per axis)")
    return p


COMMANDS = {
    "partition": cmd_partition,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    out = Path(args.out)
    try:
        cfg = _config(args)
        with output_lock(out):
            result = COMMANDS[args.command](args, cfg, out)
            artifacts, summaries = result if isinstance(result, tuple) else (result, [])
            write_report(out, args.command, cfg, summaries, artifacts, {"deterministic": args.deterministic})
    except FedGFMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
