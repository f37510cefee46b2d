"""Federated soft-prompt exchange simulator (C++ core)."""

from ._fedsp import (
    ConfigError,
    FormatError,
    MissingCheckpoint,
    aggregate_prompts,
    count_params,
    decode_tensors,
    default_config,
    derive_seed,
    distill,
    encode_tensors,
    init_prompts,
    kd_loss,
    load_tensors,
    pretrain,
    render_report,
    resolve_config,
    run,
    sample_clients,
    save_tensors,
    selected_first_block,
    toy_tasks,
)

__all__ = [
    "ConfigError",
    "FormatError",
    "MissingCheckpoint",
    "aggregate_prompts",
    "count_params",
    "decode_tensors",
    "default_config",
    "derive_seed",
    "distill",
    "encode_tensors",
    "init_prompts",
    "kd_loss",
    "load_tensors",
    "pretrain",
    "render_report",
    "resolve_config",
    "run",
    "sample_clients",
    "save_tensors",
    "selected_first_block",
    "toy_tasks",
]
