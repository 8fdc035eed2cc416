"""Graph VQ-VAE backbone: mean-aggregation encoder, multi-head codebook, MLP decoder.

Parameters live in :class:`GfmParams` as an ordered name -> array mapping so
that the federated layer can treat the model as one flat vector.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data.graph import TextAttributedGraph
from .errors import ContractViolation, DataFormatError, NumericError, SchemaError
from .tensor import Tape, Tensor

PARAM_SCHEMA = "fedgfm-params/1"
METRICS = ("cosine", "l2")


@dataclass
class ModelConfig:
    d: int = 768
    heads: int = 4
    tokens: int = 128
    metric: str = "cosine"
    nonlinearity: str = "relu"
    edge_dim: int = 0
    gamma: float = 2.0
    beta: float = 0.25
    dense_threshold: int = 2000
    # std of random token entries; None means 1/sqrt(d), i.e. unit expected norm
    token_init_scale: float | None = None

    @property
    def token_scale(self) -> float:
        return 1.0 / math.sqrt(self.d) if self.token_init_scale is None else self.token_init_scale

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ContractViolation(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.nonlinearity not in T.NONLINEARITIES:
            raise ContractViolation(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.tokens < 1 or self.heads < 1 or self.d < 1:
            raise ContractViolation("d, heads and tokens must be positive")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d
    shapes: dict[str, tuple[int, ...]] = {}
    for layer in range(2):
        shapes[f"enc.{layer}.w_self"] = (d, d)
        shapes[f"enc.{layer}.w_nbr"] = (d, d)
        if cfg.edge_dim:
            shapes[f"enc.{layer}.w_edge"] = (cfg.edge_dim, d)
        shapes[f"enc.{layer}.bias"] = (d,)
    for m in range(cfg.heads):
        shapes[f"cb.tokens.{m}"] = (cfg.tokens, d)
    shapes["cb.proj"] = (cfg.heads * d, d)
    shapes["dec.w1"] = (d, d)
    shapes["dec.b1"] = (d,)
    shapes["dec.w2"] = (d, d)
    shapes["dec.b2"] = (d,)
    return shapes


def block_average(heads: int, d: int) -> np.ndarray:
    """(M*d, d) map that averages M concatenated d-vectors."""
    return np.tile(np.eye(d), (heads, 1)) / heads


@dataclass
class GfmParams:
    """Encoder + codebook + decoder weights with a stable flat ordering."""

    config: ModelConfig
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if list(self.arrays) != list(shapes):
            missing = set(shapes) ^ set(self.arrays)
            raise ContractViolation(f"parameter schema mismatch: {sorted(missing) or 'ordering differs'}")
        for k, s in shapes.items():
            if self.arrays[k].shape != s:
                raise ContractViolation(f"{k} has shape {self.arrays[k].shape}, expected {s}")

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "GfmParams":
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shape in param_shapes(cfg).items():
            if name.startswith("cb.tokens"):
                arrays[name] = cfg.token_scale * rng.standard_normal(shape)
            elif name == "cb.proj":
                arrays[name] = block_average(cfg.heads, cfg.d)
            elif len(shape) == 1:
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
        return cls(cfg, arrays)

    @property
    def d(self) -> int:
        return self.config.d

    def names(self) -> list[str]:
        return list(self.arrays)

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays.values()])

    def unflatten(self, flat: np.ndarray) -> "GfmParams":
        flat = np.asarray(flat, dtype=np.float64)
        need = sum(a.size for a in self.arrays.values())
        if flat.shape != (need,):
            raise ContractViolation(f"flat vector has shape {flat.shape}, schema needs ({need},)")
        out, pos = {}, 0
        for k, a in self.arrays.items():
            out[k] = flat[pos : pos + a.size].reshape(a.shape).copy()
            pos += a.size
        return GfmParams(self.config, out)

    def copy(self) -> "GfmParams":
        return GfmParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def with_arrays(self, **updates: np.ndarray) -> "GfmParams":
        arrays = {k: v.copy() for k, v in self.arrays.items()}
        arrays.update({k: np.array(v, dtype=np.float64) for k, v in updates.items()})
        return GfmParams(self.config, arrays)

    def digest(self) -> str:
        return _digest(self.arrays)

    def tokens(self, head: int) -> np.ndarray:
        return self.arrays[f"cb.tokens.{head}"]

    def on_tape(self, tape: Tape) -> dict[str, Tensor]:
        return {k: tape.param(v, k) for k, v in self.arrays.items()}


def _digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k, a in arrays.items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# forward pieces


def _features(graph: TextAttributedGraph, X) -> Tensor | np.ndarray:
    return graph.features.astype(np.float64) if X is None else X


def encode(P: dict[str, Tensor], graph: TextAttributedGraph, cfg: ModelConfig, X=None) -> Tensor:
    """Two mean-aggregation layers; the nonlinearity follows the first only.

    ``X`` overrides the graph's own features (prompt-augmented input).
    """
    h = _features(graph, X)
    if np.shape(h.value if isinstance(h, Tensor) else h)[1] != cfg.d:
        raise ContractViolation(f"graph feature dim does not match model d={cfg.d}")
    agg = graph.mean_aggregator()
    edge_msg = None
    if cfg.edge_dim and graph.edge_features is not None and graph.num_edges:
        if graph.edge_features.shape[1] != cfg.edge_dim:
            raise ContractViolation("edge feature dim does not match model edge_dim")
        edge_msg = np.asarray(graph.edge_mean_aggregator() @ graph.edge_features.astype(np.float64))
    act = T.NONLINEARITIES[cfg.nonlinearity]
    for layer in range(2):
        nbr = T.spmm(agg, h)
        if edge_msg is not None:
            nbr = T.add(nbr, T.matmul(edge_msg, P[f"enc.{layer}.w_edge"]))
        h = T.add(
            T.add(T.matmul(h, P[f"enc.{layer}.w_self"]), T.matmul(nbr, P[f"enc.{layer}.w_nbr"])),
            P[f"enc.{layer}.bias"],
        )
        if layer == 0:
            h = act(h)
    return h


@dataclass
class Quantized:
    z_q: Tensor
    indices: np.ndarray  # (n, M)
    l2_fallbacks: int = 0


def nearest_tokens(z: np.ndarray, tokens: np.ndarray, metric: str) -> tuple[np.ndarray, int]:
    """Index of the nearest token per row; ties go to the lowest index.

    Under cosine, rows with zero norm fall back to L2; the count is returned.
    """
    if metric == "l2":
        dist = np.sum(z * z, axis=1, keepdims=True) - 2.0 * z @ tokens.T + np.sum(tokens * tokens, axis=1)
        return np.argmin(dist, axis=1), 0
    tn = np.linalg.norm(tokens, axis=1)
    if np.any(tn == 0):
        raise ContractViolation("codebook holds a zero-norm token under the cosine metric")
    zn = np.linalg.norm(z, axis=1)
    sims = (z @ tokens.T) / (np.maximum(zn, T.NORM_CLAMP)[:, None] * tn[None, :])
    idx = np.argmax(sims, axis=1)
    zero = zn == 0
    if zero.any():
        sub, _ = nearest_tokens(z[zero], tokens, "l2")
        idx[zero] = sub
    return idx, int(zero.sum())


def quantize(P: dict[str, Tensor], z: Tensor, cfg: ModelConfig, indices: np.ndarray | None = None) -> Quantized:
    """Per-head nearest-token lookup, concatenated and projected back to d.

    Passing ``indices`` freezes the assignment (used by gradient checks).
    """
    zv = z.value if isinstance(z, Tensor) else np.asarray(z)
    if not np.all(np.isfinite(zv)):
        raise NumericError("non-finite embedding passed to quantize", component="quantize")
    n = zv.shape[0]
    fallbacks = 0
    if indices is None:
        cols = []
        for m in range(cfg.heads):
            idx, fb = nearest_tokens(zv, P[f"cb.tokens.{m}"].value, cfg.metric)
            cols.append(idx)
            fallbacks += fb
        indices = np.stack(cols, axis=1) if cols else np.zeros((n, 0), dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    tape = z.tape if isinstance(z, Tensor) else None
    if tape is not None:
        tape.mark_discrete("codebook", indices)
    heads = [T.take_rows(P[f"cb.tokens.{m}"], indices[:, m]) for m in range(cfg.heads)]
    stacked = heads[0] if cfg.heads == 1 else T.concat(heads, axis=1)
    z_q = T.matmul(stacked, P["cb.proj"])
    return Quantized(z_q, indices, fallbacks)


def decode_features(P: dict[str, Tensor], z_q: Tensor, cfg: ModelConfig) -> Tensor:
    act = T.NONLINEARITIES[cfg.nonlinearity]
    hidden = act(T.add(T.matmul(z_q, P["dec.w1"]), P["dec.b1"]))
    return T.add(T.matmul(hidden, P["dec.w2"]), P["dec.b2"])


def loss_feat(X, X_hat, gamma: float) -> Tensor:
    """Mean over nodes of (1 - cos(x_i, x_hat_i)) ** gamma."""
    cos = T.cosine_rows(X, X_hat)
    return T.mean(T.power(T.sub(np.ones(cos.shape), cos), gamma))


def loss_topo(
    A: np.ndarray | None,
    X_hat: Tensor,
    graph: TextAttributedGraph | None = None,
    dense_threshold: int = 2000,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Squared Frobenius norm of A - sigmoid(X_hat X_hat^T), summed over member graphs.

    Graphs above ``dense_threshold`` nodes use an edge-sampled estimate: all
    positive entries plus as many uniformly drawn zero entries, the latter
    rescaled to the full count of zero entries.
    """
    if graph is None:
        return _topo_dense(np.asarray(A, dtype=np.float64), X_hat)
    total = None
    blocks = graph.graph_blocks()
    adj = graph.adjacency() if graph.n <= dense_threshold or len(blocks) > 1 else None
    for nodes in blocks:
        xb = X_hat if len(blocks) == 1 else T.take_rows(X_hat, nodes)
        if nodes.size > dense_threshold:
            term = _topo_sampled(graph, nodes, xb, rng or np.random.default_rng(0))
        else:
            a = adj[np.ix_(nodes, nodes)] if adj is not None else graph.adjacency()
            term = _topo_dense(a, xb)
        total = term if total is None else T.add(total, term)
    return total


def _topo_dense(A: np.ndarray, X_hat: Tensor) -> Tensor:
    recon = T.sigmoid(T.matmul(X_hat, T.transpose(X_hat)))
    return T.sum_all(T.square(T.sub(A, recon)))


def _topo_sampled(graph: TextAttributedGraph, nodes: np.ndarray, X_hat: Tensor, rng: np.random.Generator) -> Tensor:
    n = nodes.size
    local = np.full(graph.n, -1, dtype=np.int64)
    local[nodes] = np.arange(n)
    e = graph.edges
    inside = (local[e[:, 0]] >= 0) & (local[e[:, 1]] >= 0)
    u, v = local[e[inside, 0]], local[e[inside, 1]]
    off = u != v
    pos_i = np.concatenate([u, v[off]])
    pos_j = np.concatenate([v, u[off]])
    pos_keys = set((pos_i * n + pos_j).tolist())
    neg_total = n * n - len(pos_keys)
    want = min(len(pos_keys), neg_total)
    neg: list[int] = []
    seen: set[int] = set()
    while len(neg) < want:
        draw = rng.integers(0, n * n, size=2 * (want - len(neg)) + 8)
        for key in draw.tolist():
            if key not in pos_keys and key not in seen:
                seen.add(key)
                neg.append(key)
                if len(neg) == want:
                    break
    neg_arr = np.asarray(neg, dtype=np.int64)
    ni, nj = neg_arr // n, neg_arr % n
    pos_s = T.sigmoid(T.rowdot(T.take_rows(X_hat, pos_i), T.take_rows(X_hat, pos_j)))
    pos_term = T.sum_all(T.square(T.sub(np.ones(pos_i.size), pos_s)))
    if want == 0:
        return pos_term
    neg_s = T.sigmoid(T.rowdot(T.take_rows(X_hat, ni), T.take_rows(X_hat, nj)))
    neg_term = T.scale(T.sum_all(T.square(neg_s)), neg_total / want)
    return T.add(pos_term, neg_term)


@dataclass
class LossBreakdown:
    total: float
    feat: float
    topo: float
    codebook_term: float
    commitment_term: float
    gamma: float
    beta: float
    utilization: float = float("nan")
    l2_fallbacks: int = 0

    def as_record(self) -> dict:
        return {
            "loss_total": self.total,
            "loss_feat": self.feat,
            "loss_topo": self.topo,
            "loss_codebook": self.codebook_term,
            "loss_commit": self.commitment_term,
        }


@dataclass
class PretrainForward:
    """Tensors of one end-to-end pass, kept for gradient routing checks."""

    total: Tensor
    feat: Tensor
    topo: Tensor
    codebook_term: Tensor
    commitment_term: Tensor
    z: Tensor
    z_q: Tensor
    routed: Tensor
    x_hat: Tensor
    quantized: Quantized

    def breakdown(self, cfg: ModelConfig) -> LossBreakdown:
        idx = self.quantized.indices
        used = sum(np.unique(idx[:, m]).size for m in range(idx.shape[1]))
        return LossBreakdown(
            total=float(self.total.value),
            feat=float(self.feat.value),
            topo=float(self.topo.value),
            codebook_term=float(self.codebook_term.value),
            commitment_term=float(self.commitment_term.value),
            gamma=cfg.gamma,
            beta=cfg.beta,
            utilization=used / (cfg.heads * cfg.tokens),
            l2_fallbacks=self.quantized.l2_fallbacks,
        )


def pretrain_forward(
    P: dict[str, Tensor],
    graph: TextAttributedGraph,
    cfg: ModelConfig,
    X_in=None,
    indices: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> PretrainForward:
    """Feature + topology reconstruction, codebook and commitment terms.

    The reconstruction target is always the graph's own features, also when
    ``X_in`` (prompt-augmented) feeds the encoder.
    """
    target = graph.features.astype(np.float64)
    with _component("encoder"):
        z = encode(P, graph, cfg, X_in)
    with _component("quantize"):
        q = quantize(P, z, cfg, indices)
        routed = T.straight_through(z, q.z_q)
    with _component("decoder"):
        x_hat = decode_features(P, routed, cfg)
    with _component("feat"):
        feat = loss_feat(target, x_hat, cfg.gamma)
    with _component("topo"):
        topo = loss_topo(None, x_hat, graph, cfg.dense_threshold, rng)
    with _component("codebook"):
        cb = T.mean(T.row_sq_norm(T.sub(T.stop_gradient(z), q.z_q)))
    with _component("commitment"):
        commit = T.mean(T.row_sq_norm(T.sub(z, T.stop_gradient(q.z_q))))
        total = T.add(T.add(T.add(feat, topo), cb), T.scale(commit, cfg.beta))
    return PretrainForward(total, feat, topo, cb, commit, z, q.z_q, routed, x_hat, q)


class _component:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is NumericError and exc.component is None:
            exc.component = self.name
            exc.args = (f"{self.name}: {exc.args[0]}",)
        return False


def loss_pretrain(params: GfmParams, graph: TextAttributedGraph, gamma: float | None = None, beta: float | None = None) -> LossBreakdown:
    cfg = params.config
    if gamma is not None or beta is not None:
        cfg = replace(cfg, gamma=cfg.gamma if gamma is None else gamma, beta=cfg.beta if beta is None else beta)
    tape = Tape()
    fwd = pretrain_forward(params.on_tape(tape), graph, cfg)
    return fwd.breakdown(cfg)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class Adam:
    lr: float
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.step_count += 1
        out = {}
        c1 = 1 - self.b1**self.step_count
        c2 = 1 - self.b2**self.step_count
        for k, w in arrays.items():
            g = grads[k]
            if self.weight_decay:
                g = g + self.weight_decay * w
            m = self.m.get(k, np.zeros_like(w)) * self.b1 + (1 - self.b1) * g
            v = self.v.get(k, np.zeros_like(w)) * self.b2 + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = w - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


@dataclass
class SGD:
    lr: float

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        if self.lr == 0:
            return {k: w.copy() for k, w in arrays.items()}
        return {k: w - self.lr * grads[k] for k, w in arrays.items()}


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ContractViolation(f"unknown optimizer {name!r} (sgd or adam)")


@dataclass
class LocalResult:
    params: GfmParams
    history: list[LossBreakdown]
    extra: dict[str, np.ndarray] = field(default_factory=dict)
    aborted: bool = False
    error: str | None = None


def local_pretrain_step(
    state: GfmParams,
    graph: TextAttributedGraph,
    lr: float,
    epochs: int,
    optimizer: str = "sgd",
    extra: dict[str, np.ndarray] | None = None,
    augment=None,
    rng: np.random.Generator | None = None,
) -> LocalResult:
    """``epochs`` full-graph gradient steps on the pre-training loss.

    ``extra`` holds additional trainable arrays (client prompts) and
    ``augment(tensors, X)`` maps them plus raw features to encoder input.
    A non-finite loss stops training and returns the last good state.
    """
    if lr < 0:
        raise ContractViolation("learning rate must be non-negative")
    if epochs < 1:
        raise ContractViolation("epochs must be at least 1")
    cfg = state.config
    opt = make_optimizer(optimizer, lr)
    arrays = {k: v.copy() for k, v in state.arrays.items()}
    extra = {k: v.copy() for k, v in (extra or {}).items()}
    history: list[LossBreakdown] = []
    for _ in range(epochs):
        tape = Tape()
        P = {k: tape.param(v, k) for k, v in arrays.items()}
        E = {k: tape.param(v, k) for k, v in extra.items()}
        try:
            X_in = augment(E, graph.features.astype(np.float64)) if augment is not None else None
            fwd = pretrain_forward(P, graph, cfg, X_in, rng=rng)
            grads = T.backward(tape, fwd.total)
        except NumericError as exc:
            return LocalResult(GfmParams(cfg, arrays), history, extra, aborted=True, error=str(exc))
        history.append(fwd.breakdown(cfg))
        updated = opt.step({**arrays, **extra}, grads)
        arrays = {k: updated[k] for k in arrays}
        extra = {k: updated[k] for k in extra}
    return LocalResult(GfmParams(cfg, arrays), history, extra)


# ---------------------------------------------------------------------------
# checkpoint


def save_params(params: GfmParams, path, extra_meta: dict | None = None) -> Path:
    """Write ``params.bin`` (float64 LE, flat) and ``params.json`` under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params.flatten().astype("<f8").tofile(path / "params.bin")
    manifest = {
        "schema": PARAM_SCHEMA,
        "names": params.names(),
        "shapes": [list(a.shape) for a in params.arrays.values()],
        "config": asdict(params.config),
        "digest": params.digest(),
    }
    if extra_meta:
        manifest["meta"] = extra_meta
    (path / "params.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


def load_params(path) -> GfmParams:
    path = Path(path)
    try:
        manifest = json.loads((path / "params.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataFormatError(f"no params.json in {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"corrupt parameter manifest in {path}: {exc}", offset=exc.pos) from None
    if not isinstance(manifest, dict) or manifest.get("schema") != PARAM_SCHEMA:
        found = manifest.get("schema") if isinstance(manifest, dict) else None
        raise SchemaError(f"parameter schema {found!r} does not match {PARAM_SCHEMA!r}")
    cfg = ModelConfig(**manifest["config"])
    shapes = param_shapes(cfg)
    if manifest["names"] != list(shapes):
        raise SchemaError("parameter ordering in manifest does not match this version's schema")
    count = sum(int(np.prod(s)) for s in shapes.values())
    raw = path / "params.bin"
    size = raw.stat().st_size
    if size != 8 * count:
        raise DataFormatError(f"params.bin holds {size} bytes, schema needs {8 * count}", offset=min(size, 8 * count))
    flat = np.fromfile(raw, dtype="<f8")
    template = GfmParams(cfg, {k: np.zeros(s) for k, s in shapes.items()})
    return template.unflatten(flat)
