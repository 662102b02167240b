"""
API v1 package initialization.
"""

__all__ = ["checkpoints", "cost"]
