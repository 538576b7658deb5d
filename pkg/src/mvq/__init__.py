"""Multi-view Q-learning with sensor dropout on a toy block-insertion world."""

from .world import Task, TaskConfig, make_task_config
from .qnet import Arch, ArchConfig, ViewMask
from .cem import CemConfig
from .config import ExperimentConfig, load_config

__all__ = ["Task", "TaskConfig", "make_task_config", "Arch", "ArchConfig", "ViewMask", "CemConfig",
           "ExperimentConfig", "load_config"]
