"""Active visual exploration driven by the entropy of transformer attention maps."""
from .glimpse import GlimpseSpec, entropy_map, explore, select_ame, select_checkerboard, select_random
from .model import MaeModel, ModelConfig
from .train import TrainConfig, fit

__all__ = ["GlimpseSpec", "MaeModel", "ModelConfig", "TrainConfig", "entropy_map", "explore", "fit",
           "select_ame", "select_checkerboard", "select_random"]
