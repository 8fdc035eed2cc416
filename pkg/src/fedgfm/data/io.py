"""On-disk graph containers.

A container is a directory holding::

    manifest            JSON: n, num_edges, d, label_level, num_classes, domain_tag, ...
    features.bin        little-endian float32, row-major n x d
    edges.bin           little-endian uint32 pairs
    labels.bin          int32 (node/edge) or float32 with NaN (graph multi-task)
    edge_features.bin   optional, float32 |E| x d_e

A collection container has a manifest with ``"kind": "collection"`` and one
sub-container per member graph.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from ..errors import DataFormatError, ValidationError
from .graph import GraphCollection, TextAttributedGraph

FORMAT_VERSION = 1
MANIFEST = "manifest"


def _read_exact(path: Path, dtype: str, count: int) -> np.ndarray:
    itemsize = np.dtype(dtype).itemsize
    expected = count * itemsize
    try:
        size = path.stat().st_size
    except FileNotFoundError:
        raise DataFormatError(f"missing {path.name} in container {path.parent}") from None
    if size != expected:
        # first offset at which the file departs from the manifest
        raise DataFormatError(
            f"{path.name}: manifest implies {expected} bytes, file has {size}", offset=min(size, expected)
        )
    return np.fromfile(path, dtype=dtype, count=count)


def is_container(path) -> bool:
    return (Path(path) / MANIFEST).is_file()


def read_manifest(path) -> dict:
    mpath = Path(path) / MANIFEST
    if not mpath.is_file():
        raise DataFormatError(f"no manifest in {path}")
    raw = mpath.read_bytes()
    try:
        manifest = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        offset = getattr(exc, "pos", getattr(exc, "start", 0))
        raise DataFormatError(f"unreadable manifest in {path}: {exc}", offset=offset) from None
    if not isinstance(manifest, dict):
        raise DataFormatError(f"manifest in {path} is not a mapping", offset=0)
    return manifest


def load_graph(path) -> TextAttributedGraph:
    path = Path(path)
    m = read_manifest(path)
    try:
        n, e, d = int(m["n"]), int(m["num_edges"]), int(m["d"])
        level = m.get("label_level", "none")
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"manifest in {path} lacks field {exc}", offset=0) from None
    if m.get("version", FORMAT_VERSION) != FORMAT_VERSION:
        raise DataFormatError(f"container version {m.get('version')} unsupported (expected {FORMAT_VERSION})")
    features = _read_exact(path / "features.bin", "<f4", n * d).reshape(n, d)
    edges = _read_exact(path / "edges.bin", "<u4", 2 * e).reshape(e, 2).astype(np.int64)
    labels = None
    if level in ("node", "edge"):
        count = n if level == "node" else e
        labels = _read_exact(path / "labels.bin", "<i4", count).astype(np.int64)
    elif level == "graph":
        t = int(m.get("num_tasks", m.get("num_classes", 0)))
        labels = _read_exact(path / "labels.bin", "<f4", t)
    edge_features = None
    de = m.get("edge_feature_dim")
    if de:
        edge_features = _read_exact(path / "edge_features.bin", "<f4", e * int(de)).reshape(e, int(de))
    if e and edges.max(initial=0) >= n:
        row = int(np.argwhere((edges >= n).any(axis=1))[0, 0])
        raise ValidationError(f"edge {row} = {tuple(edges[row])} dangles outside a {n}-node graph")
    return TextAttributedGraph(
        features=features,
        edges=edges,
        labels=labels,
        label_level=level,
        num_classes=int(m.get("num_classes", 0)),
        edge_features=edge_features,
        domain_tag=str(m.get("domain_tag", "")),
    )


def save_graph(graph: TextAttributedGraph, path) -> Path:
    if graph.batch is not None:
        raise ValidationError("batched unions are saved as collections")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": "graph",
        "version": FORMAT_VERSION,
        "n": graph.n,
        "num_edges": graph.num_edges,
        "d": graph.d,
        "label_level": graph.label_level,
        "num_classes": graph.num_classes,
        "domain_tag": graph.domain_tag,
        "edge_feature_dim": None if graph.edge_features is None else int(graph.edge_features.shape[1]),
    }
    graph.features.astype("<f4").tofile(path / "features.bin")
    graph.edges.astype("<u4").tofile(path / "edges.bin")
    if graph.labels is not None and graph.label_level in ("node", "edge"):
        graph.labels.astype("<i4").tofile(path / "labels.bin")
    elif graph.labels is not None and graph.label_level == "graph":
        labels = np.asarray(graph.labels, dtype="<f4").reshape(-1)
        manifest["num_tasks"] = int(labels.size)
        labels.tofile(path / "labels.bin")
    if graph.edge_features is not None:
        graph.edge_features.astype("<f4").tofile(path / "edge_features.bin")
    _write_json(path / MANIFEST, manifest)
    return path


def save_collection(collection: GraphCollection, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = [f"g{i:05d}" for i in range(len(collection))]
    for name, g in zip(names, collection.graphs):
        save_graph(g, path / name)
    _write_json(path / MANIFEST, {"kind": "collection", "version": FORMAT_VERSION, "graphs": names})
    return path


def load_collection(path) -> GraphCollection:
    path = Path(path)
    m = read_manifest(path)
    if m.get("kind") != "collection":
        raise DataFormatError(f"{path} is not a collection container")
    return GraphCollection([load_graph(path / name) for name in m["graphs"]])


def load_any(path) -> TextAttributedGraph | GraphCollection:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"container path does not exist: {path}")
    if read_manifest(path).get("kind") == "collection":
        return load_collection(path)
    return load_graph(path)


def _write_json(path: Path, payload) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    os.replace(tmp, path)
