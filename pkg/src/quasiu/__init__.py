"""Quasi-U-statistic homogeneity tests for grouped student cohorts.

Pairwise concordance between an entrance-exam ranking and subject grades is
summarized per (year, subject) cell, combined into group-pair divergences,
and tested with contrast statistics calibrated by label permutation.
"""

__version__ = "0.1.0"

from .cohort import Dataset, GroupScheme, IngestConfig, ingest  # noqa: E402
from .errors import ConfigError, DataError, DegenerateStatisticError, MissingPairError, QuasiUError  # noqa: E402
from .quasi import aggregate_b  # noqa: E402

__all__ = [
    "__version__", "Dataset", "GroupScheme", "IngestConfig", "ingest", "aggregate_b",
    "QuasiUError", "DataError", "ConfigError", "DegenerateStatisticError", "MissingPairError",
]
