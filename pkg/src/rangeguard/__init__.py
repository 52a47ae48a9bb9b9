"""Range-restriction hardening and bit-flip fault injection for dataflow-graph DNNs.

Pipeline: profile activation bounds on sample data, rewrite the graph to
insert range-restriction (Clip) operators after activation layers and their
qualifying successors, then quantify the silent-data-corruption reduction
with bit-flip injection campaigns.
"""

from .graph import Graph, GraphError, Node, OpKind, TaskSpec, load_model, save_model
from .numerics import (
    FIXED16,
    FIXED32,
    FLOAT32,
    CorrectionPolicy,
    NumericFormat,
    Tensor,
)

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "GraphError",
    "Node",
    "OpKind",
    "TaskSpec",
    "load_model",
    "save_model",
    "NumericFormat",
    "Tensor",
    "CorrectionPolicy",
    "FLOAT32",
    "FIXED16",
    "FIXED32",
    "__version__",
]
