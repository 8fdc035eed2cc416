"""Anchor-based domain-aware codebook initialisation.

Each client mean-pools its node embeddings under the round-0 global model
into a domain prototype; the server scatters Gaussian perturbations of the
prototypes over the codebook slots. Also hosts the Monte-Carlo checks of the
two separability claims.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data.graph import GraphCollection, TextAttributedGraph
from .data.synth import SyntheticDomainSpec, synth_domain
from .errors import ContractViolation, DataFormatError
from .gvqvae import GfmParams, ModelConfig, block_average, encode, nearest_tokens

DEFAULT_SIGMA_REL = 0.05


@dataclass
class DomainPrototype:
    client_id: int
    vector: np.ndarray
    params_digest: str
    graph_digest: str = ""

    @property
    def source_digest(self) -> str:
        return hashlib.sha256(f"{self.graph_digest}|{self.params_digest}".encode()).hexdigest()


@dataclass
class AnchorSet:
    prototype: DomainPrototype
    count: int
    sigma: float
    seed: int
    anchors: np.ndarray


@dataclass
class Codebook:
    tokens: list[np.ndarray]
    proj: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int]:
        return len(self.tokens), self.tokens[0].shape[0], self.tokens[0].shape[1]

    def apply_to(self, params: GfmParams) -> GfmParams:
        """Copy of ``params`` with this codebook swapped in."""
        m, t, d = self.shape
        cfg = params.config
        if (m, t, d) != (cfg.heads, cfg.tokens, cfg.d):
            raise ContractViolation(f"codebook shape {(m, t, d)} does not fit model {(cfg.heads, cfg.tokens, cfg.d)}")
        updates = {f"cb.tokens.{i}": tok for i, tok in enumerate(self.tokens)}
        updates["cb.proj"] = self.proj
        return params.with_arrays(**updates)


def embed(params: GfmParams, data: TextAttributedGraph | GraphCollection, X=None) -> np.ndarray:
    graph = data.union() if isinstance(data, GraphCollection) else data
    tape = T.Tape()
    return encode(params.on_tape(tape), graph, params.config, X).value


def extract_prototype(global_params: GfmParams, data, client_id: int = 0) -> DomainPrototype:
    """Mean node embedding under the broadcast (untrained) global model."""
    graph = data.union() if isinstance(data, GraphCollection) else data
    if graph.n == 0:
        raise ContractViolation("cannot extract a prototype from an empty graph")
    z = embed(global_params, graph)
    return DomainPrototype(client_id, z.mean(axis=0), global_params.digest(), graph.digest())


def synthesize_anchors(prototype: DomainPrototype, count: int, sigma: float, seed: int = 0) -> AnchorSet:
    if count < 0 or sigma < 0:
        raise ContractViolation("anchor count and sigma must be non-negative")
    p = prototype.vector
    eps = np.random.default_rng(seed).standard_normal((count, p.size))
    anchors = p[None, :] + sigma * eps if sigma else np.tile(p, (count, 1))
    return AnchorSet(prototype, count, float(sigma), seed, anchors)


def default_sigma(prototypes: list[DomainPrototype], rel: float = DEFAULT_SIGMA_REL) -> float:
    return rel * float(np.mean([np.linalg.norm(p.vector) for p in prototypes]))


def init_codebook(
    prototypes: list[DomainPrototype],
    shape: tuple[int, int, int],
    sigma: float | None = None,
    seed: int = 0,
    random_scale: float = 1.0,
) -> Codebook:
    """Per head: floor(T/K) anchors per prototype (prototype-major), then Gaussian leftovers.

    Heads draw independent noise. The shared projection starts as the block
    average, so step-0 quantised outputs sit among the anchors.
    """
    if not prototypes:
        raise ContractViolation("init_codebook needs at least one prototype")
    heads, tokens, d = shape
    k = len(prototypes)
    if tokens < k:
        raise ContractViolation(
            f"{tokens} tokens per head cannot hold anchors for {k} prototypes; raise the token count to >= {k}"
        )
    ids = [p.client_id for p in prototypes]
    if len(set(ids)) != len(ids):
        raise ContractViolation("duplicate client ids among prototypes")
    if any(p.vector.shape != (d,) for p in prototypes):
        raise ContractViolation(f"prototype dimension does not match d={d}")
    sigma = default_sigma(prototypes) if sigma is None else float(sigma)
    per = tokens // k
    ordered = sorted(prototypes, key=lambda p: p.client_id)
    out = []
    for m in range(heads):
        rows = []
        for p in ordered:
            rows.append(synthesize_anchors(p, per, sigma, seed=_seed(seed, m, p.client_id)).anchors)
        leftover = tokens - per * k
        rng = np.random.default_rng(_seed(seed, m, -1))
        rows.append(random_scale * rng.standard_normal((leftover, d)))
        out.append(np.concatenate(rows, axis=0))
    return Codebook(out, block_average(heads, d))


def random_codebook(shape: tuple[int, int, int], seed: int = 0, scale: float = 1.0) -> Codebook:
    heads, tokens, d = shape
    rng = np.random.default_rng(seed)
    return Codebook([scale * rng.standard_normal((tokens, d)) for _ in range(heads)], block_average(heads, d))


def _seed(*parts: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([p % (2**32) for p in parts])


def check_binding(prototypes: list[DomainPrototype], global_params: GfmParams) -> None:
    """Refuse prototypes extracted under a different global initialisation."""
    digest = global_params.digest()
    stale = [p.client_id for p in prototypes if p.params_digest != digest]
    if stale:
        raise ContractViolation(f"prototypes of clients {stale} were extracted under a different global init")


def ancdai_initialize(
    global_params: GfmParams,
    clients_data: list,
    sigma: float | None = None,
    sigma_rel: float = DEFAULT_SIGMA_REL,
    seed: int = 0,
) -> tuple[GfmParams, list[DomainPrototype], float]:
    """Full server-side flow: prototypes, anchors, codebook swap."""
    protos = [extract_prototype(global_params, data, k) for k, data in enumerate(clients_data)]
    check_binding(protos, global_params)
    if sigma is None:
        sigma = default_sigma(protos, sigma_rel)
    cfg = global_params.config
    book = init_codebook(protos, (cfg.heads, cfg.tokens, cfg.d), sigma, seed, cfg.token_scale)
    return book.apply_to(global_params), protos, sigma


# ---------------------------------------------------------------------------
# prototype records


_HEADER = struct.Struct("<ii64s")


def save_prototypes(prototypes: list[DomainPrototype], path) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        for p in prototypes:
            fh.write(_HEADER.pack(p.client_id, p.vector.size, p.params_digest.encode("ascii")[:64].ljust(64, b"0")))
            fh.write(np.asarray(p.vector, dtype="<f8").tobytes())
    return path


def load_prototypes(path) -> list[DomainPrototype]:
    raw = Path(path).read_bytes()
    out, pos = [], 0
    while pos < len(raw):
        if pos + _HEADER.size > len(raw):
            raise DataFormatError("truncated prototype header", offset=pos)
        cid, d, digest = _HEADER.unpack_from(raw, pos)
        pos += _HEADER.size
        if d < 0 or pos + 8 * d > len(raw):
            raise DataFormatError("truncated prototype vector", offset=pos)
        vec = np.frombuffer(raw, dtype="<f8", count=d, offset=pos).astype(np.float64)
        pos += 8 * d
        out.append(DomainPrototype(cid, vec, digest.decode("ascii")))
    return out


# ---------------------------------------------------------------------------
# separability checks


@dataclass
class SeparabilityReport:
    trials: int
    pairs: list[tuple[int, int]] = field(default_factory=list)
    mean_sq_distance: dict[str, float] = field(default_factory=dict)
    feature_gap: dict[str, float] = field(default_factory=dict)
    adjacency_gap: dict[str, float] = field(default_factory=dict)
    ratios: dict[str, list[float]] = field(default_factory=dict)
    empirical_alpha: float = float("nan")
    ancdai_rates: list[float] = field(default_factory=list)
    random_rates: list[float] = field(default_factory=list)
    # same-domain code disagreement, the floor a codebook reaches with no domain signal
    ancdai_within: list[float] = field(default_factory=list)
    random_within: list[float] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def win_rate(self) -> float:
        if not self.ancdai_rates:
            return float("nan")
        return float(np.mean(np.asarray(self.ancdai_rates) >= np.asarray(self.random_rates)))

    @property
    def mean_difference(self) -> float:
        return float(np.mean(np.asarray(self.ancdai_rates) - np.asarray(self.random_rates)))

    def excess(self, which: str = "ancdai") -> np.ndarray:
        """Cross-domain rate minus within-domain rate, per trial."""
        if which == "ancdai":
            return np.asarray(self.ancdai_rates) - np.asarray(self.ancdai_within)
        return np.asarray(self.random_rates) - np.asarray(self.random_within)

    def records(self) -> list[dict]:
        rows = []
        for a, b in self.pairs:
            key = f"{a}-{b}"
            rows.append(
                {
                    "pair": key,
                    "mean_sq_distance": self.mean_sq_distance.get(key),
                    "feature_gap": self.feature_gap.get(key),
                    "adjacency_gap": self.adjacency_gap.get(key),
                    "min_ratio": min(self.ratios[key]) if self.ratios.get(key) else None,
                }
            )
        if self.ancdai_rates:
            rows.append(
                {
                    "trials": self.trials,
                    "ancdai_rate_mean": float(np.mean(self.ancdai_rates)),
                    "random_rate_mean": float(np.mean(self.random_rates)),
                    "win_rate": self.win_rate,
                    "mean_difference": self.mean_difference,
                    "ancdai_excess_mean": float(self.excess("ancdai").mean()),
                    "random_excess_mean": float(self.excess("random").mean()),
                }
            )
        if not np.isnan(self.empirical_alpha):
            rows.append({"trials": self.trials, "empirical_alpha": self.empirical_alpha})
        return rows


def _graphs(domains) -> list[TextAttributedGraph]:
    return [synth_domain(s) if isinstance(s, SyntheticDomainSpec) else s for s in domains]


def check_theorem1(domains, trials: int = 50, config: ModelConfig | None = None, seed: int = 0) -> SeparabilityReport:
    """Ratio of squared prototype distance to the feature+adjacency gap, per trial.

    Gaps are taken on the first min(n_a, n_b) nodes when sizes differ. The
    reported empirical alpha is the smallest ratio over all pairs and trials.
    """
    graphs = _graphs(domains)
    if len(graphs) < 2:
        raise ContractViolation("at least two domains are required")
    if trials < 20:
        raise ContractViolation("at least 20 trials are required")
    cfg = config or ModelConfig(d=graphs[0].d, heads=1, tokens=max(2, len(graphs)))
    report = SeparabilityReport(trials)
    pairs = [(a, b) for a in range(len(graphs)) for b in range(a + 1, len(graphs))]
    report.pairs = pairs
    for a, b in pairs:
        ga, gb = graphs[a], graphs[b]
        n = min(ga.n, gb.n)
        if ga.n != gb.n:
            report.notes.append(f"pair {a}-{b}: gaps computed on the first {n} nodes")
        xa = ga.features[:n].astype(np.float64)
        xb = gb.features[:n].astype(np.float64)
        key = f"{a}-{b}"
        report.feature_gap[key] = float(np.sum((xa - xb) ** 2))
        report.adjacency_gap[key] = float(np.sum((ga.adjacency()[:n, :n] - gb.adjacency()[:n, :n]) ** 2))
        report.ratios[key] = []
    dists = {f"{a}-{b}": [] for a, b in pairs}
    for t in range(trials):
        params = GfmParams.init(cfg, seed=_trial_seed(seed, t))
        protos = [extract_prototype(params, g, k).vector for k, g in enumerate(graphs)]
        for a, b in pairs:
            key = f"{a}-{b}"
            dist = float(np.sum((protos[a] - protos[b]) ** 2))
            dists[key].append(dist)
            gap = report.feature_gap[key] + report.adjacency_gap[key]
            report.ratios[key].append(dist / gap if gap > 0 else float("inf") if dist > 0 else float("nan"))
    for key, vals in dists.items():
        report.mean_sq_distance[key] = float(np.mean(vals))
    finite = [r for rs in report.ratios.values() for r in rs if np.isfinite(r)]
    report.empirical_alpha = float(min(finite)) if finite else float("nan")
    return report


def _trial_seed(seed: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, t]).generate_state(1)[0])


def codes(z: np.ndarray, book: Codebook, metric: str = "cosine") -> np.ndarray:
    """Per-node code: the tuple of per-head nearest-token indices, as (n, M)."""
    return np.stack([nearest_tokens(z, tok, metric)[0] for tok in book.tokens], axis=1)


def separation_rate(code_sets: list[np.ndarray]) -> float:
    """P[code(z_a) != code(z_b)] over all node pairs from different domains."""
    keyed = [[tuple(row) for row in c.tolist()] for c in code_sets]
    different = total = 0
    for a in range(len(keyed)):
        for b in range(a + 1, len(keyed)):
            counts: dict[tuple, int] = {}
            for k in keyed[b]:
                counts[k] = counts.get(k, 0) + 1
            same = sum(counts.get(k, 0) for k in keyed[a])
            pairs = len(keyed[a]) * len(keyed[b])
            different += pairs - same
            total += pairs
    return different / total if total else float("nan")


def within_rate(code_set: np.ndarray) -> float:
    """P[code(z_i) != code(z_j)] over all ordered node pairs of one domain, i == j included."""
    _, counts = np.unique(code_set, axis=0, return_counts=True)
    n = code_set.shape[0]
    return 1.0 - float(np.sum(counts.astype(np.float64) ** 2)) / (n * n)


def _headwise_rate(held: list[np.ndarray], book: Codebook, metric: str) -> tuple[float, float]:
    """Cross-domain and mean within-domain rates of each head on its own, averaged over heads."""
    per_head = [c for c in zip(*[codes(z, book, metric).T for z in held])]
    cross = np.mean([separation_rate([h[:, None] for h in head]) for head in per_head])
    within = np.mean([np.mean([within_rate(h[:, None]) for h in head]) for head in per_head])
    return float(cross), float(within)


def check_theorem2(
    domains,
    sigma: float | None = None,
    trials: int = 20,
    config: ModelConfig | None = None,
    seed: int = 0,
    sigma_rel: float = DEFAULT_SIGMA_REL,
    holdout: float = 0.5,
) -> SeparabilityReport:
    """Cross-domain codeword separation: AncDAI-initialised vs Gaussian codebook.

    Prototypes come from a random ``1 - holdout`` share of each domain's
    nodes; rates are measured on the remaining nodes. Each head is scored as
    a codebook of its own and the rates are averaged over heads. The
    within-domain rates give the floor each codebook reaches without any
    domain signal; ``report.excess`` subtracts it.
    """
    graphs = _graphs(domains)
    if len(graphs) < 2:
        raise ContractViolation("at least two domains are required")
    if trials < 20:
        raise ContractViolation("at least 20 trials are required")
    cfg = config or ModelConfig(d=graphs[0].d)
    if cfg.tokens < len(graphs):
        raise ContractViolation(f"{cfg.tokens} tokens per head cannot hold anchors for {len(graphs)} prototypes")
    report = SeparabilityReport(trials)
    shape = (cfg.heads, cfg.tokens, cfg.d)
    # ids and hold-out draws keyed on content so the result ignores domain order
    digests = [g.digest() for g in graphs]
    order = sorted(range(len(digests)), key=lambda i: digests[i])
    rank = {i: r for r, i in enumerate(order)}
    for t in range(trials):
        ts = _trial_seed(seed, t)
        params = GfmParams.init(cfg, seed=ts)
        protos, held = [], []
        for i, (g, dg) in enumerate(zip(graphs, digests)):
            k = rank[i]
            z = embed(params, g)
            perm = np.random.default_rng([ts, int(dg[:8], 16)]).permutation(g.n)
            cut = max(1, int(round((1 - holdout) * g.n)))
            fit, test = perm[:cut], perm[cut:] if cut < g.n else perm
            protos.append(DomainPrototype(k, z[fit].mean(axis=0), params.digest(), g.digest()))
            held.append(z[test])
        s = default_sigma(protos, sigma_rel) if sigma is None else sigma
        anc = init_codebook(protos, shape, s, seed=ts, random_scale=cfg.token_scale)
        rnd = random_codebook(shape, seed=ts + 1, scale=1.0)  # isotropic standard Gaussian baseline
        for book, rates, within in ((anc, report.ancdai_rates, report.ancdai_within), (rnd, report.random_rates, report.random_within)):
            cross, same = _headwise_rate(held, book, cfg.metric)
            rates.append(cross)
            within.append(same)
    return report
