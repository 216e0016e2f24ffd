"""Differentiable architecture search over factored TDNN supernets."""

from .formats import format_spec, parse_spec
from .search import SearchConfig, TaskData, derive_architecture, exhaustive_oracle, random_search, retrain, run_search
from .supernet import ArchWeights, LayerSpace, SearchSpace, context_space, dim_space, search_space_size
from .tdnnf import CandidateSpec, LayerSpec

__all__ = [
    "ArchWeights", "CandidateSpec", "LayerSpace", "LayerSpec", "SearchConfig", "SearchSpace", "TaskData",
    "context_space", "derive_architecture", "dim_space", "exhaustive_oracle", "format_spec", "parse_spec",
    "random_search", "retrain", "run_search", "search_space_size",
]
