"""Three-stream interatomic potential: data, models, training, retrieval and checks."""

import json as _json

from ._tristream import (
    ConfigError,
    DomainError,
    EmbeddingIndex,
    InputError,
    Model,
    Structure,
    cli,
    default_config,
    embed,
    finetune,
    load_dataset,
    pair_potential_dataset,
    pretrain,
    read_xyz,
    retrieval_corpus,
    write_xyz,
)
from ._tristream import _verify_theory_json


def verify_theory(seed=0, trials=20):
    """Runs the energy/force coupling checks; one dict per check."""
    return _json.loads(_verify_theory_json(seed, trials))


__all__ = [
    "ConfigError",
    "DomainError",
    "EmbeddingIndex",
    "InputError",
    "Model",
    "Structure",
    "cli",
    "default_config",
    "embed",
    "finetune",
    "load_dataset",
    "pair_potential_dataset",
    "pretrain",
    "read_xyz",
    "retrieval_corpus",
    "verify_theory",
    "write_xyz",
]
