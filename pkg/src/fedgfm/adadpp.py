"""Domain-sensitive feature prompts.

During pre-training each client learns ``lam`` prompt vectors and as many
projection vectors; a node's input is shifted by the softmax-weighted sum of
prompts. At fine-tuning time every client's prompts form one frozen pool and a
single softmax runs over all of them.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractViolation
from .tensor import Tensor

PROMPT_INIT_SCALE = 0.01
PHI = "prompt.phi"
PROJ = "prompt.w"


@dataclass
class PromptSet:
    client_id: int
    prompts: np.ndarray  # (lam, d)
    projections: np.ndarray  # (lam, d)

    def __post_init__(self):
        self.prompts = np.asarray(self.prompts, dtype=np.float64)
        self.projections = np.asarray(self.projections, dtype=np.float64)
        if self.prompts.ndim != 2 or self.prompts.shape[0] < 1:
            raise ContractViolation("a prompt set needs at least one prompt")
        if self.prompts.shape != self.projections.shape:
            raise ContractViolation("prompts and projections must have the same shape")

    @classmethod
    def init(cls, client_id: int, count: int, d: int, seed=0, scale: float = PROMPT_INIT_SCALE) -> "PromptSet":
        if count < 1:
            raise ContractViolation("prompt count must be at least 1")
        rng = np.random.default_rng(seed)
        return cls(client_id, scale * rng.standard_normal((count, d)), scale * rng.standard_normal((count, d)))

    @property
    def count(self) -> int:
        return self.prompts.shape[0]

    @property
    def d(self) -> int:
        return self.prompts.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {PHI: self.prompts.copy(), PROJ: self.projections.copy()}

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "PromptSet":
        return PromptSet(self.client_id, arrays[PHI], arrays[PROJ])

    def digest(self) -> str:
        return _digest([self.prompts, self.projections], str(self.client_id))


def _digest(arrays, tag: str = "") -> str:
    h = hashlib.sha256(tag.encode())
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()


def _top_k_mask(logits: np.ndarray, k: int) -> np.ndarray:
    """Additive mask keeping the k largest logits per row (lowest index wins ties)."""
    order = np.argsort(-logits, axis=1, kind="stable")
    mask = np.full(logits.shape, -np.inf)
    np.put_along_axis(mask, order[:, :k], 0.0, axis=1)
    return mask


def prompt_forward(prompts, projections, X, top_k: int | None = None) -> tuple[Tensor, Tensor]:
    """x + softmax(W x) @ Phi per row. Returns (augmented X, attention weights)."""
    logits = T.matmul(X, T.transpose(projections))
    if top_k is not None and top_k < logits.shape[1]:
        mask = _top_k_mask(logits.value, top_k)
        # masked entries get a large negative finite logit so exp underflows to 0
        logits = T.add(logits, np.where(np.isinf(mask), -1e30, 0.0))
    alpha = T.softmax(logits, axis=1)
    return T.add(X, T.matmul(alpha, prompts)), alpha


def apply_prompts_local(pset: PromptSet, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != pset.d:
        raise ContractViolation(f"feature dim {X.shape[1]} does not match prompt dim {pset.d}")
    out, _ = prompt_forward(pset.prompts, pset.projections, X)
    return out.value


def local_augmenter(top_k: int | None = None):
    """Closure for the local trainer: maps prompt tensors + raw X to encoder input."""

    def augment(tensors: dict[str, Tensor], X: np.ndarray) -> Tensor:
        out, _ = prompt_forward(tensors[PHI], tensors[PROJ], X, top_k)
        return out

    return augment


@dataclass
class PromptPool:
    sets: list[PromptSet]
    top_k: int | None = None
    frozen: bool = True

    def __post_init__(self):
        if self.top_k is not None and self.top_k < 1:
            raise ContractViolation("top_k must be positive")

    @property
    def size(self) -> int:
        return sum(s.count for s in self.sets)

    @property
    def d(self) -> int:
        return self.sets[0].d

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """All prompts and projections, client-major, as two (K*lam, d) arrays (copies)."""
        phi = np.concatenate([s.prompts for s in self.sets])
        w = np.concatenate([s.projections for s in self.sets])
        return phi, w

    def digest(self) -> str:
        return _digest([a for s in self.sets for a in (s.prompts, s.projections)], ",".join(str(s.client_id) for s in self.sets))


def build_pool(sets: list[PromptSet], top_k: int | None = None) -> PromptPool:
    if not sets:
        raise ContractViolation("cannot build a prompt pool from zero prompt sets")
    ids = [s.client_id for s in sets]
    if len(set(ids)) != len(ids):
        raise ContractViolation(f"duplicate client ids in prompt sets: {ids}")
    if len({s.d for s in sets}) != 1:
        raise ContractViolation("prompt sets disagree on feature dimension")
    ordered = sorted(sets, key=lambda s: s.client_id)
    copies = [PromptSet(s.client_id, s.prompts.copy(), s.projections.copy()) for s in ordered]
    pool = PromptPool(copies, top_k)
    if top_k is not None and top_k > pool.size:
        raise ContractViolation(f"top_k={top_k} exceeds the pool size {pool.size}")
    return pool


def apply_pool(pool: PromptPool, X) -> np.ndarray:
    """One softmax over all K*lam logits per node; the pool itself is never modified."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != pool.d:
        raise ContractViolation(f"feature dim {X.shape[1]} does not match pool dim {pool.d}")
    phi, w = pool.stacked()
    out, _ = prompt_forward(phi, w, X, pool.top_k)
    return out.value


def attention_weights(prompts_or_pool, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if isinstance(prompts_or_pool, PromptPool):
        phi, w = prompts_or_pool.stacked()
        top_k = prompts_or_pool.top_k
    else:
        phi, w, top_k = prompts_or_pool.prompts, prompts_or_pool.projections, None
    _, alpha = prompt_forward(phi, w, X, top_k)
    return alpha.value
