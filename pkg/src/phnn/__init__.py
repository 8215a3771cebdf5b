"""Progressive holistically-nested networks for pathological lung segmentation."""

__version__ = "0.1.0"

from .model import ModelConfig, build_model, forward, param_count  # noqa: E402
from .train import TrainConfig  # noqa: E402

__all__ = ["ModelConfig", "TrainConfig", "build_model", "forward", "param_count", "__version__"]
