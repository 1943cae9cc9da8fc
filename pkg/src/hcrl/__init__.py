"""Hierarchically clustered representation learning with numpy."""
from .hierarchy import Hierarchy, TreeNode
from .model import HcrlModel, ModelConfig, load_model, save_model, train, train_vade

__all__ = ["Hierarchy", "TreeNode", "HcrlModel", "ModelConfig", "train", "train_vade", "save_model", "load_model"]
__version__ = "0.1.0"
