"""Synthetic multi-domain graphs: SBM topology with class-conditioned Gaussian features."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ContractViolation
from .graph import GraphCollection, TextAttributedGraph


@dataclass
class SyntheticDomainSpec:
    node_count: int = 300
    block_sizes: list[int] | None = None
    p_intra: float = 0.1
    p_inter: float = 0.01
    class_count: int = 3
    feature_dim: int = 64
    mean_scale: float = 1.0
    cov_scale: float = 0.5
    seed: int = 0
    # optional (C, d) class means; generated from the seed otherwise
    class_means: list | None = None
    # shift added to every node feature, scalar or length-d
    feature_offset: float | list | None = None
    # [lo, hi) coordinates that may be non-zero; None means all
    feature_support: tuple[int, int] | None = None
    edge_feature_dim: int = 0
    # (d,) vector added to every node outside the support mask: a component
    # shared by all domains, as in anisotropic sentence-encoder spaces
    shared_component: list | None = None
    # scale each feature row to unit L2 norm, like sentence-encoder outputs
    row_normalize: bool = False
    domain_tag: str = "synthetic"
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.block_sizes is None:
            k = max(1, self.class_count)
            base, rem = divmod(self.node_count, k)
            self.block_sizes = [base + (1 if i < rem else 0) for i in range(k)]
        self.block_sizes = [int(b) for b in self.block_sizes]
        self.validate()

    def validate(self) -> None:
        if sum(self.block_sizes) != self.node_count:
            raise ContractViolation(
                f"block sizes sum to {sum(self.block_sizes)}, expected node_count={self.node_count}"
            )
        for name in ("p_intra", "p_inter"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ContractViolation(f"{name}={p} is not a probability")
        if self.class_count < 1 or self.feature_dim < 1:
            raise ContractViolation("class_count and feature_dim must be positive")
        if self.cov_scale < 0:
            raise ContractViolation("cov_scale must be non-negative")
        if self.feature_support is not None:
            lo, hi = self.feature_support
            if not 0 <= lo < hi <= self.feature_dim:
                raise ContractViolation(f"feature_support {self.feature_support} out of range")

    def to_dict(self) -> dict:
        return asdict(self)


def _sbm_edges(block_of: np.ndarray, p_intra: float, p_inter: float, rng: np.random.Generator) -> np.ndarray:
    n = block_of.size
    iu, ju = np.triu_indices(n, k=1)
    p = np.where(block_of[iu] == block_of[ju], p_intra, p_inter)
    keep = rng.random(iu.size) < p
    return np.stack([iu[keep], ju[keep]], axis=1)


def synth_domain(spec: SyntheticDomainSpec) -> TextAttributedGraph:
    """Deterministic under ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, d, c = spec.node_count, spec.feature_dim, spec.class_count
    block_of = np.repeat(np.arange(len(spec.block_sizes)), spec.block_sizes)
    labels = block_of % c

    edges = _sbm_edges(block_of, spec.p_intra, spec.p_inter, rng)

    mask = np.ones(d)
    if spec.feature_support is not None:
        lo, hi = spec.feature_support
        mask = np.zeros(d)
        mask[lo:hi] = 1.0
    if spec.class_means is not None:
        means = np.asarray(spec.class_means, dtype=np.float64)
        if means.shape != (c, d):
            raise ContractViolation(f"class_means must have shape {(c, d)}")
    else:
        means = spec.mean_scale * rng.standard_normal((c, d))
    means = means * mask
    noise = spec.cov_scale * rng.standard_normal((n, d)) * mask
    x = means[labels] + noise
    if spec.feature_offset is not None:
        x = x + np.asarray(spec.feature_offset, dtype=np.float64) * mask
    if spec.shared_component is not None:
        shared = np.asarray(spec.shared_component, dtype=np.float64)
        if shared.shape != (d,):
            raise ContractViolation(f"shared_component must have length {d}")
        x = x + shared
    if spec.row_normalize:
        x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)

    edge_features = None
    if spec.edge_feature_dim:
        # intra/inter-block indicator in the first two slots plus small noise
        same = (block_of[edges[:, 0]] == block_of[edges[:, 1]]).astype(np.float64)
        ef = 0.1 * rng.standard_normal((edges.shape[0], spec.edge_feature_dim))
        ef[:, 0] += same
        if spec.edge_feature_dim > 1:
            ef[:, 1] += 1.0 - same
        edge_features = ef

    return TextAttributedGraph(
        features=x.astype(np.float32),
        edges=edges,
        labels=labels.astype(np.int64),
        label_level="node",
        num_classes=c,
        edge_features=edge_features,
        domain_tag=spec.domain_tag,
    )


def synth_collection(
    spec: SyntheticDomainSpec,
    graph_count: int,
    task_count: int,
    missing_rate: float = 0.1,
    seed: int = 0,
) -> GraphCollection:
    """Small SBM graphs with multi-task binary labels and NaN-missing entries.

    Task t is positive when the graph's mean feature projects positively on a
    random direction shared by the collection.
    """
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((task_count, spec.feature_dim))
    graphs = []
    for i in range(graph_count):
        sub = SyntheticDomainSpec(**{**spec.to_dict(), "seed": int(rng.integers(2**31)), "block_sizes": None})
        g = synth_domain(sub)
        score = directions @ g.features.mean(axis=0).astype(np.float64)
        y = (score > 0).astype(np.float32)
        y[rng.random(task_count) < missing_rate] = np.nan
        graphs.append(
            TextAttributedGraph(
                features=g.features,
                edges=g.edges,
                labels=y,
                label_level="graph",
                num_classes=task_count,
                edge_features=g.edge_features,
                domain_tag=spec.domain_tag,
            )
        )
    return GraphCollection(graphs)


def separated_domains(
    count: int = 3,
    node_count: int = 300,
    feature_dim: int = 64,
    class_count: int = 3,
    seed: int = 0,
    offset: float = 2.0,
    row_normalize: bool = False,
    shared_scale: float = 0.0,
) -> list[SyntheticDomainSpec]:
    """Specs for ``count`` domains with disjoint feature supports and contrasting topology.

    Domain k uses coordinates [k*w, (k+1)*w), a positive offset on that support
    and its own edge density, so both feature and structural gaps are present.
    ``shared_scale`` > 0 adds one random direction to every domain's features,
    with norm ``shared_scale`` times that of the per-domain offset.
    """
    width = feature_dim // count
    if width < 1:
        raise ContractViolation("feature_dim must be at least the domain count")
    shared = None
    if shared_scale > 0:
        u = np.random.default_rng([seed, 977]).standard_normal(feature_dim)
        shared = (shared_scale * offset * np.sqrt(width) * u / np.linalg.norm(u)).tolist()
    densities = [(0.08, 0.005), (0.02, 0.002), (0.3, 0.05), (0.05, 0.05), (0.15, 0.0)]
    specs = []
    for k in range(count):
        p_in, p_out = densities[k % len(densities)]
        specs.append(
            SyntheticDomainSpec(
                node_count=node_count,
                p_intra=p_in,
                p_inter=p_out,
                class_count=class_count,
                feature_dim=feature_dim,
                mean_scale=1.0,
                cov_scale=0.5,
                seed=seed * 1000 + k,
                feature_support=(k * width, (k + 1) * width),
                feature_offset=offset,
                shared_component=shared,
                row_normalize=row_normalize,
                domain_tag=f"domain{k}",
            )
        )
    return specs
