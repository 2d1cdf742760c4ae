"""Experiment runner: configs, presets, run/sweep/verify-theory/report drivers."""

from .config import (SWEEP_AXES, EffectivenessSettings, ExperimentConfig, ProbeSettings, SweepSpec, TheorySettings,
                     config_from_dict, config_to_dict, dump_config, load_config, load_theory, parse_config)
from .main import build_parser, main
from .presets import PRESETS, preset_names, preset_text
from .runner import (IntegrityError, RunArtifact, SweepError, child_config, merge_reports, read_comparison,
                     run_experiment, sha256_file, sweep, verify_manifest, verify_theory, write_manifest)

__all__ = [
    "EffectivenessSettings", "ExperimentConfig", "IntegrityError", "PRESETS", "ProbeSettings", "RunArtifact",
    "SWEEP_AXES", "SweepError", "SweepSpec", "TheorySettings", "build_parser", "child_config", "config_from_dict",
    "config_to_dict", "dump_config", "load_config", "load_theory", "main", "merge_reports", "parse_config",
    "preset_names", "preset_text", "read_comparison", "run_experiment", "sha256_file", "sweep", "verify_manifest",
    "verify_theory", "write_manifest",
]
