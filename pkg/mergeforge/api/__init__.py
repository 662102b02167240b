"""
API package initialization.

Read-only inspection endpoints over the cost model and stored checkpoints.
"""

from mergeforge.api import deps
from mergeforge.api.v1 import checkpoints, cost

__all__ = ["deps", "checkpoints", "cost"]
