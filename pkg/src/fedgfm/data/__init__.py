from .graph import GraphCollection, TextAttributedGraph, degree_distribution
from .io import load_any, load_collection, load_graph, save_collection, save_graph
from .partition import (
    PartitionAssignment,
    client_collections,
    client_subgraphs,
    louvain_communities,
    louvain_partition,
    modularity,
    random_allocate,
)
from .split import SPLIT_PRESETS, DataSplit, split, split_preset
from .synth import SyntheticDomainSpec, separated_domains, synth_collection, synth_domain

__all__ = [
    "DataSplit",
    "GraphCollection",
    "PartitionAssignment",
    "SPLIT_PRESETS",
    "SyntheticDomainSpec",
    "TextAttributedGraph",
    "client_collections",
    "client_subgraphs",
    "degree_distribution",
    "load_any",
    "load_collection",
    "load_graph",
    "louvain_communities",
    "louvain_partition",
    "modularity",
    "random_allocate",
    "save_collection",
    "save_graph",
    "separated_domains",
    "split",
    "split_preset",
    "synth_collection",
    "synth_domain",
]
