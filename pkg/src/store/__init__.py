from .formats import ARTIFACT_VERSION, MANIFEST_SUFFIX, MLP_MAGIC, TOY_COLUMNS
from .checkpoints import (
    load_encoder_pair,
    load_experts,
    load_mlp,
    save_encoder_pair,
    save_experts,
    save_mlp,
)
from .datasets import export_datasets, import_datasets
from .settings import Settings, build_experiment_config, load_config_file, parse_config_text

__all__ = [
    "ARTIFACT_VERSION",
    "MANIFEST_SUFFIX",
    "MLP_MAGIC",
    "TOY_COLUMNS",
    "load_encoder_pair",
    "load_experts",
    "load_mlp",
    "save_encoder_pair",
    "save_experts",
    "save_mlp",
    "export_datasets",
    "import_datasets",
    "Settings",
    "build_experiment_config",
    "load_config_file",
    "parse_config_text",
]
