"""Experiment plumbing shared by the CLI and sweeps: datasets -> clients -> pretrain -> fine-tune."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import downstream as ds
from .adadpp import PromptPool, build_pool
from .config import ExperimentConfig
from .data import (
    GraphCollection,
    TextAttributedGraph,
    client_collections,
    client_subgraphs,
    load_any,
    louvain_partition,
    random_allocate,
    separated_domains,
    split,
    synth_domain,
)
from .data.split import SPLIT_PRESETS
from .errors import ConfigError, ContractViolation
from .federation import ClientState, FedConfig, ServerState, load_checkpoint, run_pretraining, save_checkpoint
from .gvqvae import GfmParams, ModelConfig

log = logging.getLogger(__name__)

DEFAULT_RATIOS = (0.6, 0.2, 0.2)


@dataclass
class Dataset:
    name: str
    data: TextAttributedGraph | GraphCollection

    @property
    def graph(self) -> TextAttributedGraph:
        return self.data.union() if isinstance(self.data, GraphCollection) else self.data


@dataclass
class ClientData:
    client_id: int
    dataset: str
    data: TextAttributedGraph | GraphCollection


def load_datasets(cfg: ExperimentConfig) -> list[Dataset]:
    out = []
    for p in cfg.data.containers:
        out.append(Dataset(Path(p).name, load_any(p)))
    syn = cfg.data.synthetic
    if syn is not None:
        specs = separated_domains(
            syn.domains,
            node_count=syn.node_count,
            feature_dim=syn.feature_dim,
            class_count=syn.class_count,
            seed=syn.seed,
            offset=syn.offset,
            row_normalize=syn.row_normalize,
            shared_scale=syn.shared_scale,
        )
        out.extend(Dataset(s.domain_tag, synth_domain(s)) for s in specs)
    names = [d.name for d in out]
    if len(set(names)) != len(names):
        raise ConfigError(f"dataset names must be unique, got {names}")
    for d in out:
        if d.graph.d != cfg.model.d:
            raise ConfigError(f"dataset {d.name} has feature dim {d.graph.d}, model.d is {cfg.model.d}")
    return out


def _clients_for(cfg: ExperimentConfig, name: str) -> int:
    k = cfg.data.clients
    if isinstance(k, dict):
        if name not in k:
            raise ConfigError(f"data.clients has no entry for dataset {name!r}")
        return int(k[name])
    return int(k)


def make_clients(cfg: ExperimentConfig, datasets: list[Dataset], seed: int = 0) -> list[ClientData]:
    """One client per dataset, or a partition of each dataset into K clients."""
    clients: list[ClientData] = []
    for ds_ in datasets:
        if cfg.data.partition == "none":
            clients.append(ClientData(len(clients), ds_.name, ds_.data))
            continue
        k = _clients_for(cfg, ds_.name)
        if isinstance(ds_.data, GraphCollection):
            parts = client_collections(ds_.data, random_allocate(ds_.data, k, seed))
        elif cfg.data.partition == "random":
            raise ConfigError(f"random allocation needs a graph collection; {ds_.name} is a single graph")
        else:
            parts, dropped = client_subgraphs(ds_.data, louvain_partition(ds_.data, k, seed))
            log.info("%s: louvain split into %d clients, %d cross-client edges dropped", ds_.name, k, dropped)
        for part in parts:
            clients.append(ClientData(len(clients), ds_.name, part))
    return clients


def model_config(cfg: ExperimentConfig) -> ModelConfig:
    m = cfg.model
    return ModelConfig(
        d=m.d,
        heads=m.heads,
        tokens=m.tokens,
        metric=m.metric,
        nonlinearity=m.nonlinearity,
        gamma=m.gamma,
        beta=m.beta,
        dense_threshold=m.dense_threshold,
        token_init_scale=m.token_init_scale,
    )


def fed_config(cfg: ExperimentConfig, seed: int, deterministic: bool = False, **overrides) -> FedConfig:
    f = cfg.federation
    base = FedConfig(
        rounds=f.rounds,
        epochs=f.epochs,
        lr=f.lr,
        optimizer=f.optimizer,
        ancdai_enabled=cfg.ancdai.enabled,
        adadpp_enabled=cfg.adadpp.enabled,
        prompt_count=cfg.adadpp.prompt_count,
        top_k=cfg.adadpp.top_k,
        sigma=cfg.ancdai.sigma,
        sigma_rel=cfg.ancdai.sigma_rel,
        seed=seed,
        participation=f.participation,
        weight_unit=f.weight_unit,
        deterministic=deterministic,
    )
    return replace(base, **overrides)


def pretrain(
    cfg: ExperimentConfig,
    clients: list[ClientData],
    seed: int,
    deterministic: bool = False,
    checkpoint: Path | None = None,
    until: int | None = None,
    **overrides,
) -> tuple[ServerState, list[ClientState], FedConfig]:
    fc = fed_config(cfg, seed, deterministic, **overrides)
    states = [ClientState(c.client_id, c.data) for c in clients]
    init = GfmParams.init(model_config(cfg), seed)
    server, _ = run_pretraining(fc, states, init, until=until)
    if checkpoint is not None:
        save_checkpoint(checkpoint, fc, server, states)
    return server, states, fc


def pool_from(prompts: dict[int, object] | list, top_k: int | None) -> PromptPool | None:
    sets = list(prompts.values()) if isinstance(prompts, dict) else [p for p in prompts if p is not None]
    return build_pool(sets, top_k) if sets else None


def load_model(checkpoint) -> tuple[FedConfig, GfmParams, PromptPool | None]:
    fc, server, prompts = load_checkpoint(checkpoint)
    pool = pool_from(prompts, fc.top_k) if fc.adadpp_enabled else None
    return fc, server.params, pool


# ---------------------------------------------------------------------------
# fine-tuning


def task_units(data) -> tuple[np.ndarray, np.ndarray | None]:
    """Indices the split is drawn over, plus stratification labels when defined."""
    g = data.union() if isinstance(data, GraphCollection) else data
    if g.label_level == "graph":
        return np.arange(g.num_graphs), None
    if g.label_level == "none":
        raise ContractViolation("data carries no labels to fine-tune on")
    y = np.asarray(g.labels, dtype=np.int64)
    return np.arange(y.size), y


def ratios_for(cfg: ExperimentConfig, name: str) -> tuple[float, float, float]:
    s = cfg.data.split
    if isinstance(s, str):
        if s == "auto":
            return SPLIT_PRESETS.get(name.lower(), DEFAULT_RATIOS)
        return SPLIT_PRESETS[s.lower()]
    return tuple(float(r) for r in s)


@dataclass
class MetricRecord:
    dataset: str
    client: int
    task: str
    metric_name: str
    value: float
    seed: int
    pretrain_seed: int
    ablation_flags: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "client": self.client,
            "task": self.task,
            "metric_name": self.metric_name,
            "value": self.value,
            "seed": self.seed,
            "pretrain_seed": self.pretrain_seed,
            "ablation_flags": self.ablation_flags,
            "notes": self.notes,
        }


def finetune_eval(
    cfg: ExperimentConfig,
    gfm: GfmParams,
    pool: PromptPool | None,
    clients: list[ClientData],
    pretrain_seed: int,
    flags: dict,
    heads_dir: Path | None = None,
) -> list[MetricRecord]:
    """Per client and fine-tune seed: split, optional few-shot, head training, test metric."""
    ft = cfg.finetune
    records = []
    for c in clients:
        g = c.data.union() if isinstance(c.data, GraphCollection) else c.data
        kind = ds.task_kind_for(g)
        metric = "auc" if kind == "graph_cls_multitask" else "accuracy"
        units, strata = task_units(g)
        Z = ds.node_embeddings(gfm, g, pool)
        for s in ft.seeds:
            sp = split(units, ratios_for(cfg, c.dataset), seed=s, labels=strata)
            notes = list(sp.warnings)
            if ft.shots is not None:
                if kind == "graph_cls_multitask":
                    log.warning("client %d: few-shot skipped for multi-task graph labels", c.client_id)
                    continue
                sp = ds.few_shot_subsample(sp, strata, ds.FewShotSpec(ft.shots, s), kind)
            arity = g.num_classes
            head = ds.make_head(kind, gfm.d, arity, seed=s)
            if ft.lr_grid:
                res = ds.finetune_grid(gfm, pool, head, g, sp, grid=ft.lr_grid, epochs=ft.max_epochs, patience=ft.patience)
            else:
                res = ds.finetune(gfm, pool, head, g, sp, lr=ft.lr, epochs=ft.max_epochs, patience=ft.patience, embeddings=Z)
            value = ds.evaluate(gfm, pool, res.head, g, sp, embeddings=Z)
            notes += res.head.notes
            if heads_dir is not None:
                heads_dir.mkdir(parents=True, exist_ok=True)
                np.savez(
                    heads_dir / f"head_p{pretrain_seed}_c{c.client_id}_s{s}.npz",
                    weight=res.head.weight,
                    bias=res.head.bias,
                    kind=kind,
                    test=sp.test,
                    lr=res.lr,
                )
            records.append(MetricRecord(c.dataset, c.client_id, kind, metric, float(value), s, pretrain_seed, dict(flags), notes))
    return records


def write_records(records: list[MetricRecord], path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.as_dict(), sort_keys=True) + "\n")
    return path


def summarize(records: list[MetricRecord], keys=("dataset", "metric_name")) -> list[dict]:
    """Mean and sample std per group (std is 0 for a single run)."""
    groups: dict[tuple, list[float]] = {}
    for r in records:
        groups.setdefault(tuple(getattr(r, k) for k in keys), []).append(r.value)
    rows = []
    for key, vals in sorted(groups.items()):
        v = np.asarray(vals)
        rows.append({**dict(zip(keys, key)), "mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else 0.0, "runs": int(v.size)})
    return rows


def write_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    if not rows:
        path.write_text("", encoding="utf-8")
        return path
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return path


def write_table(table: list[list], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for row in table:
            w.writerow([f"{x:.6f}" if isinstance(x, float) else x for x in row])
    return path
