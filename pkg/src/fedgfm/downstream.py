"""Fine-tuning task heads on a frozen backbone, metrics, and the entanglement diagnostic."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .adadpp import PromptPool, apply_pool
from .data.graph import GraphCollection, TextAttributedGraph
from .data.split import DataSplit
from .errors import ContractViolation
from .gvqvae import Adam, GfmParams, encode, quantize

log = logging.getLogger(__name__)

TASK_KINDS = ("node_cls", "edge_cls", "graph_cls_multitask")
LR_GRID = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1)


@dataclass
class TaskHead:
    kind: str
    weight: np.ndarray  # (d, arity)
    bias: np.ndarray  # (arity,)
    notes: list[str] = field(default_factory=list)

    @property
    def arity(self) -> int:
        return self.weight.shape[1]

    def logits(self, R: np.ndarray) -> np.ndarray:
        return R @ self.weight + self.bias

    def copy(self) -> "TaskHead":
        return TaskHead(self.kind, self.weight.copy(), self.bias.copy(), list(self.notes))


def make_head(kind: str, d: int, arity: int, seed=0, scale: float | None = None) -> TaskHead:
    if kind not in TASK_KINDS:
        raise ContractViolation(f"task kind must be one of {TASK_KINDS}")
    if arity < 1:
        raise ContractViolation("head arity must be at least 1")
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(d) if scale is None else scale
    return TaskHead(kind, scale * rng.standard_normal((d, arity)), np.zeros(arity))


def task_kind_for(graph: TextAttributedGraph) -> str:
    return {"node": "node_cls", "edge": "edge_cls", "graph": "graph_cls_multitask"}[graph.label_level]


# ---------------------------------------------------------------------------
# representations


def node_embeddings(gfm: GfmParams, graph: TextAttributedGraph, pool: PromptPool | None = None, quantized: bool = False) -> np.ndarray:
    """Frozen forward pass: optional pool augmentation, then encode (and quantise)."""
    X = graph.features.astype(np.float64)
    if pool is not None:
        X = apply_pool(pool, X)
    tape = T.Tape()
    P = gfm.on_tape(tape)
    z = encode(P, graph, gfm.config, X)
    if quantized:
        return quantize(P, z, gfm.config).z_q.value
    return z.value


def readout(kind: str, Z: np.ndarray, graph: TextAttributedGraph) -> np.ndarray:
    """Rows the head sees: nodes, edge endpoint means, or per-graph mean pools."""
    if kind == "node_cls":
        return Z
    if kind == "edge_cls":
        return 0.5 * (Z[graph.edges[:, 0]] + Z[graph.edges[:, 1]])
    blocks = graph.graph_blocks()
    return np.stack([Z[b].mean(axis=0) if b.size else np.zeros(Z.shape[1]) for b in blocks])


def _as_graph(data) -> TextAttributedGraph:
    return data.union() if isinstance(data, GraphCollection) else data


def _labels(graph: TextAttributedGraph, kind: str) -> np.ndarray:
    y = graph.labels
    if kind == "graph_cls_multitask":
        return np.asarray(y, dtype=np.float64).reshape(graph.num_graphs, -1)
    return np.asarray(y, dtype=np.int64)


# ---------------------------------------------------------------------------
# metrics


def accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    if labels.size == 0:
        raise ContractViolation("accuracy of an empty set")
    return float(np.mean(pred == labels))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted one half. NaN for single-class input."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos = int(labels.sum())
    neg = labels.size - pos
    if pos == 0 or neg == 0:
        return float("nan")
    ranks = rankdata(scores)  # average ranks: ties share the midpoint
    # rank sums are multiples of 1/2, so the numerator is exact in float64
    u = float(ranks[labels].sum()) - pos * (pos + 1) / 2.0
    return u / (pos * neg)


def multitask_auc(scores: np.ndarray, labels: np.ndarray) -> tuple[float, list[int]]:
    """Mean AUC over tasks with NaN labels masked; returns (mean, skipped task ids)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    aucs, skipped = [], []
    for t in range(labels.shape[1]):
        ok = ~np.isnan(labels[:, t])
        a = roc_auc(scores[ok, t], labels[ok, t]) if ok.any() else float("nan")
        if np.isnan(a):
            skipped.append(t)
        else:
            aucs.append(a)
    return (float(np.mean(aucs)) if aucs else float("nan")), skipped


def _metric(head: TaskHead, R: np.ndarray, y: np.ndarray) -> float:
    logits = head.logits(R)
    if head.kind == "graph_cls_multitask":
        return multitask_auc(logits, y)[0]
    return accuracy(np.argmax(logits, axis=1), y)


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class FinetuneResult:
    head: TaskHead
    best_val: float
    epochs_run: int
    train_metric: float
    lr: float


def finetune(
    gfm: GfmParams,
    pool: PromptPool | None,
    head: TaskHead,
    data,
    split: DataSplit,
    lr: float = 1e-2,
    epochs: int = 1000,
    patience: int = 20,
    embeddings: np.ndarray | None = None,
) -> FinetuneResult:
    """Train only the head on frozen embeddings; keep the best-validation head.

    The backbone and pool are read, never written. Early stopping tracks
    validation accuracy (or mean AUC for multi-task graph labels).
    """
    graph = _as_graph(data)
    if len(split.train) == 0:
        raise ContractViolation("fine-tuning needs a non-empty training split")
    Z = node_embeddings(gfm, graph, pool) if embeddings is None else embeddings
    R = readout(head.kind, Z, graph)
    y = _labels(graph, head.kind)
    tr, va = split.train, split.val
    head = head.copy()
    if head.kind == "graph_cls_multitask":
        empty = [t for t in range(y.shape[1]) if np.all(np.isnan(y[tr, t]))]
        if empty:
            head.notes.append(f"skipped all-NaN label columns {empty}")
    opt = Adam(lr)
    arrays = {"w": head.weight, "b": head.bias}
    best = (-np.inf, head.copy(), 0)
    stale = 0
    epoch = 0
    for epoch in range(1, epochs + 1):
        tape = T.Tape()
        w = tape.param(arrays["w"], "w")
        b = tape.param(arrays["b"], "b")
        logits = T.add(T.matmul(R[tr], w), b)
        if head.kind == "graph_cls_multitask":
            loss = T.masked_bce_with_logits(logits, y[tr])
        else:
            loss = T.cross_entropy(logits, y[tr])
        grads = T.backward(tape, loss)
        arrays = opt.step(arrays, grads)
        head.weight, head.bias = arrays["w"], arrays["b"]
        score = _metric(head, R[va], y[va]) if len(va) else -float(loss.value)
        if np.isnan(score):
            score = -np.inf
        if score > best[0]:
            best = (score, head.copy(), epoch)
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    chosen = best[1]
    return FinetuneResult(chosen, float(best[0]), epoch, _metric(chosen, R[tr], y[tr]), lr)


def finetune_grid(gfm, pool, head, data, split, grid=LR_GRID, **kw) -> FinetuneResult:
    """Run :func:`finetune` per learning rate; keep the best validation score."""
    graph = _as_graph(data)
    Z = node_embeddings(gfm, graph, pool)
    results = [finetune(gfm, pool, head, graph, split, lr=lr, embeddings=Z, **kw) for lr in grid]
    return max(results, key=lambda r: (r.best_val, -r.lr))


def evaluate(gfm: GfmParams, pool: PromptPool | None, head: TaskHead, data, split: DataSplit, embeddings=None) -> float:
    """Test accuracy (node/edge) or mean-over-tasks ROC-AUC (graph)."""
    if len(split.test) == 0:
        raise ContractViolation("evaluation needs a non-empty test split")
    graph = _as_graph(data)
    Z = node_embeddings(gfm, graph, pool) if embeddings is None else embeddings
    R = readout(head.kind, Z, graph)
    y = _labels(graph, head.kind)
    return _metric(head, R[split.test], y[split.test])


# ---------------------------------------------------------------------------
# few-shot


@dataclass
class FewShotSpec:
    shots: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.shots < 1:
            raise ContractViolation("shots must be at least 1")


def few_shot_subsample(split: DataSplit, labels, spec: FewShotSpec, kind: str = "node_cls") -> DataSplit:
    """Keep at most ``shots`` training units per class; val and test untouched."""
    if kind == "graph_cls_multitask":
        raise ContractViolation("few-shot subsampling is not defined for multi-task graph classification")
    labels = np.asarray(labels)
    rng = np.random.default_rng(spec.seed)
    train = split.train
    y = labels[train]
    keep = []
    for c in np.unique(y):
        members = train[y == c]
        take = min(spec.shots, members.size)
        keep.append(rng.choice(members, size=take, replace=False))
    kept = np.concatenate(keep) if keep else train[:0]
    return DataSplit(kept, split.val.copy(), split.test.copy(), list(split.warnings))


# ---------------------------------------------------------------------------
# entanglement diagnostic


@dataclass
class EntanglementReport:
    domains: list[str]
    raw: np.ndarray
    federated: np.ndarray
    reference: np.ndarray | None = None
    representation: str = "quantized"

    def mean_off_diagonal(self, which: str = "federated") -> float:
        m = getattr(self, which)
        k = m.shape[0]
        return float((m.sum() - np.trace(m)) / (k * (k - 1)))

    def tables(self) -> dict[str, list[list]]:
        out = {"raw_features": _table(self.domains, self.raw), "federated": _table(self.domains, self.federated)}
        if self.reference is not None:
            out["centralized_reference"] = _table(self.domains, self.reference)
        return out


def _table(names: list[str], m: np.ndarray) -> list[list]:
    return [["domain", *names]] + [[names[i], *m[i].tolist()] for i in range(len(names))]


def cosine_matrix(vectors: np.ndarray) -> np.ndarray:
    """Pairwise cosine with a clamped denominator, symmetrised, unit diagonal."""
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.maximum(np.linalg.norm(v, axis=1), T.NORM_CLAMP)
    u = v / norms[:, None]
    m = u @ u.T
    m = 0.5 * (m + m.T)
    np.fill_diagonal(m, 1.0)
    return np.clip(m, -1.0, 1.0)


def entanglement_diagnostic(
    gfm: GfmParams,
    pool: PromptPool | None,
    domains: list,
    names: list[str] | None = None,
    reference: GfmParams | None = None,
    quantized: bool = True,
) -> EntanglementReport:
    """Inter-domain cosine of mean-pooled node representations.

    ``quantized`` selects the codebook output (the model's discrete
    representation); otherwise raw encoder output is pooled.
    """
    graphs = [_as_graph(d) for d in domains]
    if len(graphs) < 2:
        raise ContractViolation("the diagnostic needs at least two domains")
    names = names or [g.domain_tag or f"domain{i}" for i, g in enumerate(graphs)]
    raw = cosine_matrix(np.stack([g.features.astype(np.float64).mean(axis=0) for g in graphs]))
    fed = cosine_matrix(np.stack([node_embeddings(gfm, g, pool, quantized).mean(axis=0) for g in graphs]))
    ref = None
    if reference is not None:
        ref = cosine_matrix(np.stack([node_embeddings(reference, g, pool, quantized).mean(axis=0) for g in graphs]))
    return EntanglementReport(names, raw, fed, ref, "quantized" if quantized else "encoder")
