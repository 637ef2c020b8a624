"""Graph-guided retrieval-augmented in-context learning for node classification on text-attributed graphs."""

from .graph import (
    GraphFormatError,
    GraphStats,
    Split,
    TextAttributedGraph,
    edge_homophily,
    graph_stats,
    load_graph,
    make_split,
    neighbors,
    save_graph,
)
from .prompting import (
    PromptRecord,
    Strategy,
    assemble_bundle_labels,
    build_prompt,
    parse_answer,
)
from .retrieval import (
    ContextBundle,
    EmbeddingIndex,
    Member,
    build_index,
    embed_text,
    retrieve,
)

__all__ = [
    "ContextBundle",
    "EmbeddingIndex",
    "GraphFormatError",
    "GraphStats",
    "Member",
    "PromptRecord",
    "Split",
    "Strategy",
    "TextAttributedGraph",
    "assemble_bundle_labels",
    "build_index",
    "build_prompt",
    "edge_homophily",
    "embed_text",
    "graph_stats",
    "load_graph",
    "make_split",
    "neighbors",
    "parse_answer",
    "retrieve",
    "save_graph",
]

__version__ = "0.1.0"
