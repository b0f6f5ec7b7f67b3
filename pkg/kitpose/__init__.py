"""
KITPose - Keypoint-Interactive Transformer pose estimation
Heatmap regression with channel-slice keypoint tokens and body-part prompts
"""

__version__ = "0.1.0"
__author__ = "QuangNew"

__all__ = [
    "checkpoint",
    "config",
    "data",
    "errors",
    "heatmap_codec",
    "inspection",
    "kit_model",
    "layers",
    "losses",
    "metrics",
    "numerics",
    "optim",
    "plotting",
    "prompts",
    "resource_manager",
    "trainer",
    "transforms",
]
