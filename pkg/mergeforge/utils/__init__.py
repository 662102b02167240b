"""Utility functions and helper classes."""

from mergeforge.utils.rng import derive_key, derive_seed, keyed_generator
from mergeforge.utils.ranking import competition_ranks
from mergeforge.utils.tables import TableFormatter

__all__ = [
    "derive_key",
    "derive_seed",
    "keyed_generator",
    "competition_ranks",
    "TableFormatter",
]
