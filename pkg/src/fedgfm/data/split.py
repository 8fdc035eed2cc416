"""Stratified train/val/test splits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, milp

from ..errors import ContractViolation

# Train/val/test ratios per benchmark
SPLIT_PRESETS: dict[str, tuple[float, float, float]] = {
    "cora": (0.05, 0.20, 0.40),
    "pubmed": (0.05, 0.20, 0.40),
    "wikics": (0.80, 0.10, 0.10),
    "arxiv": (0.80, 0.10, 0.10),
    "wn18rr": (0.80, 0.10, 0.10),
    "fb15k237": (0.80, 0.10, 0.10),
    "hiv": (0.80, 0.10, 0.10),
    "pcba": (0.80, 0.10, 0.10),
}


@dataclass
class DataSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        for name in ("train", "val", "test"):
            setattr(self, name, np.sort(np.asarray(getattr(self, name), dtype=np.int64)))
        a, b, c = set(self.train.tolist()), set(self.val.tolist()), set(self.test.tolist())
        if a & b or a & c or b & c:
            raise ContractViolation("split parts overlap")

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def _floor(x: float) -> int:
    # 0.29 * 100 evaluates to 28.999999999999996
    return int(math.floor(x + 1e-9))


def _apportion(target: int, wanted: np.ndarray, avail: np.ndarray) -> np.ndarray:
    """Integer counts near ``wanted`` summing to ``target`` with count <= avail.

    Largest-remainder: everyone gets floor(wanted), leftovers go to the
    largest fractional parts (lowest class index on ties).
    """
    base = np.minimum(np.floor(wanted + 1e-9).astype(np.int64), avail)
    left = target - int(base.sum())
    frac = wanted - np.floor(wanted + 1e-9)
    order = sorted(range(len(wanted)), key=lambda c: (-frac[c], c))
    while left > 0:
        progressed = False
        for c in order:
            if left == 0:
                break
            if base[c] < avail[c]:
                base[c] += 1
                left -= 1
                progressed = True
        if not progressed:
            break
        # second pass (only reached when caps forced redistribution) picks any spare room
        order = sorted(range(len(wanted)), key=lambda c: (-(avail[c] - base[c]), c))
    return base


def _round_jointly(totals: list[int], wanted: np.ndarray, sizes: np.ndarray) -> np.ndarray | None:
    """Round the parts x classes table ``wanted`` to floor or ceil entrywise.

    Row j sums to totals[j] and no class is over-drawn. Rounding part by part
    can leave the last part a residual more than one away from its share, so
    all parts are rounded at once. The constraint matrix is a bipartite
    incidence matrix, so the program has integral vertices and solves fast.
    None when no such rounding exists; the caller then falls back to greedy.
    """
    parts, classes = wanted.shape
    base = np.floor(wanted + 1e-9).astype(np.int64)
    frac = wanted - base
    upper = (frac > 1e-9).astype(float)
    # prefer rounding up the largest remainders, lowest class index on ties
    cost = -(frac.ravel() + 1e-7 * (classes - np.tile(np.arange(classes), parts)) / classes)
    rows = np.kron(np.eye(parts), np.ones((1, classes)))
    cols = np.tile(np.eye(classes), (1, parts))
    need = np.asarray(totals) - base.sum(axis=1)
    room = sizes - base.sum(axis=0)
    if need.min() < 0 or room.min() < 0:
        return None
    res = milp(
        cost,
        constraints=[LinearConstraint(rows, need, need), LinearConstraint(cols, -np.inf, room)],
        integrality=np.ones(parts * classes),
        bounds=Bounds(0, upper.ravel()),
    )
    if res.status != 0:
        return None
    return base + np.rint(res.x).astype(np.int64).reshape(parts, classes)


def split(
    units,
    ratios: tuple[float, float, float],
    seed: int = 0,
    labels=None,
) -> DataSplit:
    """Random split of ``units`` honouring ``ratios``; stratified by ``labels`` if given.

    Each part's total is floor(ratio * N); per-class counts stay within one
    element of ratio * class_size. Units left over are unassigned.
    """
    units = np.asarray(units, dtype=np.int64)
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) > 1 + 1e-9:
        raise ContractViolation(f"ratios must be three non-negative numbers summing to <= 1, got {ratios}")
    rng = np.random.default_rng(seed)
    n = units.size
    if labels is None:
        strata = np.zeros(n, dtype=np.int64)
    else:
        labels = np.asarray(labels)
        if labels.shape[0] != n:
            raise ContractViolation("labels must align with units")
        _, strata = np.unique(labels, return_inverse=True)
    classes = int(strata.max()) + 1 if n else 0
    pools = [rng.permutation(units[strata == c]) for c in range(classes)]
    sizes = np.array([p.size for p in pools], dtype=np.int64)
    totals = [_floor(r * n) for r in ratios]
    table = _round_jointly(totals, np.outer(ratios, sizes), sizes) if classes else None
    used = np.zeros(classes, dtype=np.int64)
    parts = []
    for j, r in enumerate(ratios):
        if table is not None:
            counts = table[j]
        else:
            target = min(totals[j], int((sizes - used).sum()))
            counts = _apportion(target, r * sizes, sizes - used)
        parts.append(np.concatenate([pools[c][used[c] : used[c] + counts[c]] for c in range(classes)]) if classes else units[:0])
        used += counts
    warnings = []
    if labels is not None and ratios[0] > 0:
        train_counts = _count(parts[0], units, strata, classes)
        for c in np.flatnonzero(train_counts == 0):
            warnings.append(f"class {c} has no training members")
    return DataSplit(parts[0], parts[1], parts[2], warnings)


def _count(part: np.ndarray, units: np.ndarray, strata: np.ndarray, classes: int) -> np.ndarray:
    lookup = dict(zip(units.tolist(), strata.tolist()))
    return np.bincount([lookup[u] for u in part.tolist()], minlength=classes)


def split_preset(name: str) -> tuple[float, float, float]:
    try:
        return SPLIT_PRESETS[name.lower()]
    except KeyError:
        raise ContractViolation(f"unknown split preset {name!r}; known: {sorted(SPLIT_PRESETS)}") from None
