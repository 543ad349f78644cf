"""Configuration, orchestration, CSV/SVG output and the command line."""
from .config import ExperimentConfig, config_from_dict, load_config
from .pipeline import RunRecord, Workspace, end_to_end_pipeline

__all__ = ["ExperimentConfig", "config_from_dict", "load_config", "RunRecord", "Workspace",
           "end_to_end_pipeline"]
