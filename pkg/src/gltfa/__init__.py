"""Sparse Bayesian factor analysis with an unknown number of factors."""

__version__ = "0.1.0"

from .data import load_dataset, simulate_dataset
from .identification import counting_rule_check, is_uglt, max_factors, order_to_glt
from .model import (Dataset, ModelState, PriorConfig, ShrinkageState,
                    SparsityMatrix, classify_columns, collapse_efa_to_cfa,
                    expand_cfa_to_efa, implied_covariance)
from .postprocess import (SummaryReport, communalities, factor_dimension_posterior,
                          filter_variance_identified, summarize)
from .sampler import Chain, ChainConfig, DrawRecord, run_chain
from .store import DrawStore, StoreWriter, read_store, write_store

__all__ = [
    "__version__",
    "Dataset", "SparsityMatrix", "ModelState", "ShrinkageState", "PriorConfig",
    "classify_columns", "implied_covariance", "expand_cfa_to_efa",
    "collapse_efa_to_cfa", "is_uglt", "counting_rule_check", "max_factors",
    "order_to_glt", "Chain", "ChainConfig", "DrawRecord", "run_chain",
    "filter_variance_identified", "factor_dimension_posterior", "communalities",
    "summarize", "SummaryReport", "load_dataset", "simulate_dataset",
    "DrawStore", "StoreWriter", "read_store", "write_store",
]
