"""Datasets, configuration and persistence."""

from .checkpoint import CheckpointError, checkpoint_load, checkpoint_save
from .config import (
    ConfigError,
    DataConfig,
    ExperimentConfig,
    ModelSpec,
    OptimizerConfig,
    TrainPlan,
    apply_overrides,
    config_from_dict,
    default_schema,
    dump_config,
    load_config,
)
from .dataset import Dataset, split_permutation
from .idx import IdxFormatError, load_csv, load_idx, load_idx_dataset, parse_idx, write_csv, write_idx
from .records import ScanResult, records_append, records_scan, repair
from .sources import load_data
from .synth import synth

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataConfig",
    "Dataset",
    "ExperimentConfig",
    "IdxFormatError",
    "ModelSpec",
    "OptimizerConfig",
    "ScanResult",
    "TrainPlan",
    "apply_overrides",
    "checkpoint_load",
    "checkpoint_save",
    "config_from_dict",
    "default_schema",
    "dump_config",
    "load_config",
    "load_csv",
    "load_data",
    "load_idx",
    "load_idx_dataset",
    "parse_idx",
    "records_append",
    "records_scan",
    "repair",
    "split_permutation",
    "synth",
    "write_csv",
    "write_idx",
]
