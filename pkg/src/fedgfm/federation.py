"""FedAvg pre-training loop: broadcast, local updates, sample-weighted aggregation.

Communication is simulated in-process, but parameters always cross the
client/server boundary as serialised float64 buffers.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ancdai
from .adadpp import PromptSet, local_augmenter
from .data.graph import GraphCollection, TextAttributedGraph
from .errors import ContractViolation, DataFormatError, SchemaError
from .gvqvae import GfmParams, LossBreakdown, load_params, local_pretrain_step, save_params

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = "fedgfm-checkpoint/1"


@dataclass
class FedConfig:
    rounds: int = 25
    epochs: int = 2
    lr: float = 1e-4
    optimizer: str = "sgd"
    ancdai_enabled: bool = True
    adadpp_enabled: bool = True
    prompt_count: int = 3
    top_k: int | None = None
    sigma: float | None = None
    sigma_rel: float = ancdai.DEFAULT_SIGMA_REL
    seed: int = 0
    participation: float = 1.0
    weight_unit: str = "nodes"
    deterministic: bool = True

    def __post_init__(self):
        if self.rounds < 0:
            raise ContractViolation("rounds must be >= 0")
        if self.epochs < 1:
            raise ContractViolation("epochs must be >= 1")
        if not 0 < self.participation <= 1:
            raise ContractViolation("participation must lie in (0, 1]")
        if self.weight_unit not in ("nodes", "graphs"):
            raise ContractViolation("weight_unit must be 'nodes' or 'graphs'")

    # schedule presets
    @classmethod
    def fedgfm_plus(cls, **kw) -> "FedConfig":
        return cls(**{"rounds": 25, "epochs": 2, "lr": 1e-4, **kw})

    @classmethod
    def gfm_baseline(cls, **kw) -> "FedConfig":
        return cls(**{"rounds": 50, "epochs": 2, "ancdai_enabled": False, "adadpp_enabled": False, **kw})


@dataclass
class ClientState:
    client_id: int
    data: TextAttributedGraph | GraphCollection
    params: GfmParams | None = None
    prompts: PromptSet | None = None
    weight_unit: str = "nodes"

    @property
    def graph(self) -> TextAttributedGraph:
        return self.data.union() if isinstance(self.data, GraphCollection) else self.data

    @property
    def sample_count(self) -> int:
        if isinstance(self.data, GraphCollection):
            n = len(self.data) if self.weight_unit == "graphs" else sum(g.n for g in self.data.graphs)
        else:
            n = self.data.n
        if n < 1:
            raise ContractViolation(f"client {self.client_id} holds no samples")
        return n


@dataclass
class RoundRecord:
    round: int
    losses: dict[int, LossBreakdown]
    digest_before: str
    digest_after: str
    duration_ms: float
    dropped: list[int] = field(default_factory=list)

    def rows(self) -> list[dict]:
        out = []
        for cid, b in sorted(self.losses.items()):
            out.append({"round": self.round, "client": cid, **b.as_record(), "duration_ms": self.duration_ms})
        for cid in self.dropped:
            out.append({"round": self.round, "client": cid, "dropped": True, "duration_ms": self.duration_ms})
        return out


@dataclass
class ServerState:
    params: GfmParams
    round: int = 0
    rounds_total: int = 0
    prototypes: list[ancdai.DomainPrototype] = field(default_factory=list)
    sigma: float | None = None
    records: list[RoundRecord] = field(default_factory=list)
    init_digest: str = ""


def _ship(params: GfmParams) -> GfmParams:
    """Pass parameters through the wire format (flat little-endian float64)."""
    buf = params.flatten().astype("<f8").tobytes()
    return params.unflatten(np.frombuffer(buf, dtype="<f8"))


def broadcast(server: ServerState, clients: list[ClientState]) -> list[ClientState]:
    for c in clients:
        c.params = _ship(server.params)
    return clients


def aggregate(clients: list[ClientState], weights: dict[int, float] | None = None) -> GfmParams:
    """Sample-weighted coordinatewise mean of the clients' backbone parameters.

    Computed as theta_ref + sum_k w_k (theta_k - theta_ref) in client-id order,
    with theta_ref the lowest-id client, so identical inputs come back
    bitwise and client order does not matter. Results are clipped to the
    per-coordinate client range to absorb rounding.
    """
    if not clients:
        raise ContractViolation("nothing to aggregate")
    ordered = sorted(clients, key=lambda c: c.client_id)
    cfg = ordered[0].params.config
    names = ordered[0].params.names()
    for c in ordered[1:]:
        if c.params.config != cfg or c.params.names() != names:
            raise ContractViolation(f"client {c.client_id} has a different parameter schema")
    counts = np.array(
        [weights[c.client_id] if weights else c.sample_count for c in ordered], dtype=np.float64
    )
    total = counts.sum()
    if total <= 0:
        raise ContractViolation("total sample count must be positive")
    w = counts / total
    flats = [_ship(c.params).flatten() for c in ordered]
    ref = flats[0]
    acc = np.zeros_like(ref)
    for wk, fk in zip(w, flats):
        acc += wk * (fk - ref)
    out = ref + acc
    stack = np.stack(flats)
    out = np.clip(out, stack.min(axis=0), stack.max(axis=0))
    return ordered[0].params.unflatten(out)


def client_rng(seed: int, client: int, rnd: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed % 2**32, client % 2**32, rnd % 2**32]))


def prepare(config: FedConfig, clients: list[ClientState], global_init: GfmParams) -> ServerState:
    """Round-0 server state: AncDAI codebook swap and client prompt sets when enabled."""
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ContractViolation("client ids must be unique")
    for c in clients:
        c.weight_unit = config.weight_unit
    params = global_init.copy()
    server = ServerState(params, 0, config.rounds, init_digest=global_init.digest())
    if config.ancdai_enabled:
        params, protos, sigma = ancdai.ancdai_initialize(
            global_init, [c.data for c in clients], config.sigma, config.sigma_rel, config.seed
        )
        for p, c in zip(protos, clients):
            p.client_id = c.client_id
        server.params, server.prototypes, server.sigma = params, protos, sigma
    if config.adadpp_enabled:
        for c in clients:
            if c.prompts is None:
                seed = np.random.SeedSequence([config.seed % 2**32, c.client_id, 7919])
                c.prompts = PromptSet.init(c.client_id, config.prompt_count, global_init.d, seed)
    return server


def run_round(config: FedConfig, server: ServerState, clients: list[ClientState]) -> RoundRecord:
    rnd = server.round + 1
    start = time.perf_counter()
    digest_before = server.params.digest()
    broadcast(server, clients)
    active = sorted(clients, key=lambda c: c.client_id)
    if config.participation < 1:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed % 2**32, rnd, 104729]))
        keep = max(1, int(round(config.participation * len(active))))
        pick = np.sort(rng.choice(len(active), size=keep, replace=False))
        active = [active[i] for i in pick]
    augment = local_augmenter(config.top_k) if config.adadpp_enabled else None
    trained, losses, dropped = [], {}, []
    for c in active:
        extra = c.prompts.arrays() if (config.adadpp_enabled and c.prompts is not None) else None
        res = local_pretrain_step(
            c.params,
            c.graph,
            config.lr,
            config.epochs,
            config.optimizer,
            extra=extra,
            augment=augment if extra is not None else None,
            rng=client_rng(config.seed, c.client_id, rnd),
        )
        if res.aborted:
            log.warning("client %d diverged in round %d: %s", c.client_id, rnd, res.error)
            dropped.append(c.client_id)
            continue
        c.params = res.params
        if extra is not None:
            c.prompts = c.prompts.with_arrays(res.extra)
        trained.append(c)
        losses[c.client_id] = res.history[-1]
    if trained:
        server.params = aggregate(trained)
    server.round = rnd
    elapsed = 0.0 if config.deterministic else (time.perf_counter() - start) * 1000.0
    record = RoundRecord(rnd, losses, digest_before, server.params.digest(), elapsed, dropped)
    server.records.append(record)
    return record


def run_pretraining(
    config: FedConfig,
    clients: list[ClientState],
    global_init: GfmParams | None = None,
    server: ServerState | None = None,
    until: int | None = None,
    on_round=None,
) -> tuple[ServerState, list[RoundRecord]]:
    """R rounds of broadcast / local update / aggregate.

    Pass ``server`` (from :func:`load_checkpoint`) to resume; ``until`` stops
    early at that round.
    """
    if server is None:
        if global_init is None:
            raise ContractViolation("global_init is required when not resuming")
        server = prepare(config, clients, global_init)
    stop = config.rounds if until is None else min(until, config.rounds)
    while server.round < stop:
        record = run_round(config, server, clients)
        log.info("round %d/%d done, clients=%s", record.round, config.rounds, sorted(record.losses))
        if on_round is not None:
            on_round(server, clients, record)
    return server, list(server.records)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, config: FedConfig, server: ServerState, clients: list[ClientState]) -> Path:
    path = Path(path)
    (path / "clients").mkdir(parents=True, exist_ok=True)
    save_params(server.params, path / "global")
    client_meta = []
    for c in sorted(clients, key=lambda c: c.client_id):
        entry = {"id": c.client_id, "sample_count": c.sample_count, "prompts": None}
        if c.prompts is not None:
            fname = f"clients/client_{c.client_id:04d}.bin"
            np.concatenate([c.prompts.prompts.reshape(-1), c.prompts.projections.reshape(-1)]).astype("<f8").tofile(
                path / fname
            )
            entry["prompts"] = {"file": fname, "shape": list(c.prompts.prompts.shape), "digest": c.prompts.digest()}
        client_meta.append(entry)
    if server.prototypes:
        ancdai.save_prototypes(server.prototypes, path / "prototypes.bin")
    manifest = {
        "schema": CHECKPOINT_SCHEMA,
        "round": server.round,
        "rounds_total": server.rounds_total,
        "config": asdict(config),
        "sigma": server.sigma,
        "init_digest": server.init_digest,
        "global_digest": server.params.digest(),
        "clients": client_meta,
        # client k in round r draws from SeedSequence([seed, k, r]); the cursor is the next round
        "rng": {"scheme": "seedsequence(seed, client, round)", "seed": config.seed, "next_round": server.round + 1},
        "prototypes": "prototypes.bin" if server.prototypes else None,
    }
    with open(path / "rounds.ndjson", "w", encoding="utf-8") as fh:
        for rec in server.records:
            for row in rec.rows():
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_checkpoint(path) -> tuple[FedConfig, ServerState, dict[int, PromptSet]]:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise DataFormatError(f"no checkpoint manifest in {path}")
    try:
        m = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"corrupt checkpoint manifest: {exc}", offset=exc.pos) from None
    if not isinstance(m, dict) or m.get("schema") != CHECKPOINT_SCHEMA:
        found = m.get("schema") if isinstance(m, dict) else None
        raise SchemaError(f"checkpoint schema {found!r} does not match supported {CHECKPOINT_SCHEMA!r}")
    try:
        config = FedConfig(**m["config"])
        params = load_params(path / "global")
        server = ServerState(params, int(m["round"]), int(m["rounds_total"]), sigma=m.get("sigma"), init_digest=m.get("init_digest", ""))
        prompts = {}
        for entry in m["clients"]:
            meta = entry.get("prompts")
            if meta:
                shape = tuple(meta["shape"])
                flat = np.fromfile(path / meta["file"], dtype="<f8")
                size = int(np.prod(shape))
                if flat.size != 2 * size:
                    raise DataFormatError(f"{meta['file']} holds {flat.size * 8} bytes, expected {16 * size}", offset=flat.size * 8)
                prompts[entry["id"]] = PromptSet(entry["id"], flat[:size].reshape(shape), flat[size:].reshape(shape))
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"checkpoint manifest is missing {exc}") from None
    if params.digest() != m.get("global_digest"):
        raise DataFormatError("global parameter blob does not match the digest recorded in the manifest")
    if m.get("prototypes"):
        server.prototypes = ancdai.load_prototypes(path / m["prototypes"])
    server.records = _load_records(path / "rounds.ndjson")
    return config, server, prompts


def _load_records(path: Path) -> list[RoundRecord]:
    if not path.exists():
        return []
    by_round: dict[int, RoundRecord] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        rec = by_round.setdefault(row["round"], RoundRecord(row["round"], {}, "", "", row.get("duration_ms", 0.0)))
        if row.get("dropped"):
            rec.dropped.append(row["client"])
            continue
        rec.losses[row["client"]] = LossBreakdown(
            total=row["loss_total"],
            feat=row["loss_feat"],
            topo=row["loss_topo"],
            codebook_term=row["loss_codebook"],
            commitment_term=row["loss_commit"],
            gamma=float("nan"),
            beta=float("nan"),
        )
    return [by_round[k] for k in sorted(by_round)]


def resume(path, clients: list[ClientState]) -> tuple[FedConfig, ServerState]:
    """Load a checkpoint and restore client prompt sets in place."""
    config, server, prompts = load_checkpoint(path)
    for c in clients:
        c.weight_unit = config.weight_unit
        if c.client_id in prompts:
            c.prompts = prompts[c.client_id]
    return config, server
