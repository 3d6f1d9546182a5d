"""Parametric inference for warranty returns with unknown sales dates."""

from .data import (AuxiliarySample, Claim, DirectCensored, FieldDataset, RunConfig, Scheme,
                   SumClaim, SumUnreturned, Unreturned, dataset_summary, load_dataset,
                   validate_dataset, write_dataset)
from .distributions import (BivariateLognormal, IndependentPair, IndependentTriple, JointModel,
                            ParamSet, family, make_structure)
from .sem import SemConfig, SemEstimate, run_sem

__version__ = "0.1.0"

__all__ = [
    "AuxiliarySample", "BivariateLognormal", "Claim", "DirectCensored", "FieldDataset",
    "IndependentPair", "IndependentTriple", "JointModel", "ParamSet", "RunConfig", "Scheme",
    "SemConfig", "SemEstimate", "SumClaim", "SumUnreturned", "Unreturned", "dataset_summary",
    "family", "load_dataset", "make_structure", "run_sem", "validate_dataset", "write_dataset",
]
