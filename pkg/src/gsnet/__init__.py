"""Grain-size level classifier: window attention guided by a convolutional encoder.

Everything runs on a small numpy-backed autodiff core (``gsnet.tensor``).
"""

from gsnet.metrics import EvalSet, evaluate_all
from gsnet.model import GsnetModel, ModelConfig, build_model

__version__ = "0.1.0"

__all__ = ["EvalSet", "GsnetModel", "ModelConfig", "build_model", "evaluate_all", "__version__"]
