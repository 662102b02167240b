"""
Main application package.

mergeforge - trains small task-specific models from a shared pretrained
initialization and merges them into one multi-task model with Task
Arithmetic, DARE, TIES, learned layer-wise merge weights and hierarchical
merging, plus a benchmark harness and an analytic memory/FLOPs cost model.
"""

__version__ = "1.0.0"
__author__ = "mergeforge developers"
__description__ = "Model merging toolkit with learned layer-wise merge weights"
