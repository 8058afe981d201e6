"""Decision Transformer for goal-conditioned point-mass control.

Thin Python layer over the C++ core: environments, dataset recording and
editing, training, evaluation and the ``gdt`` command line.
"""

from __future__ import annotations

import json
from typing import Optional, Sequence

from . import _gdt
from ._gdt import (
    ContractError,
    Dataset,
    DimensionError,
    Env,
    Error,
    FormatError,
    IoError,
    Model,
    RangeError,
    TrainingError,
    compute_reward,
    dataset_from_bytes,
    derive_seed,
    load_dataset,
    load_model,
    mix,
    record,
    returns_to_go,
    subset,
    train,
)

__all__ = [
    "ContractError", "Dataset", "DimensionError", "Env", "Error", "FormatError", "IoError", "Model",
    "RangeError", "TrainingError", "cli", "compute_reward", "dataset_from_bytes", "derive_seed", "env_spec",
    "evaluate", "load_dataset", "load_model", "mix", "record", "returns_to_go", "subset", "train",
]


def env_spec(name: str, reward: str = "sparse") -> dict:
    """Static description of an environment as a dict."""
    return json.loads(_gdt.env_spec_json(name, reward))


def evaluate(model: Model, timesteps: int = 2000, seeds: Sequence[int] = (0, 1, 2), env: str = "",
             reward: str = "", target: Optional[float] = None) -> dict:
    """Rolls the model out for `timesteps` steps per seed and returns the report."""
    return json.loads(model._evaluate_json(timesteps, list(seeds), env, reward, target))


def cli(*args: str) -> tuple[int, str, str]:
    """Runs a ``gdt`` subcommand in-process; returns (exit code, stdout, stderr)."""
    return _gdt._cli([str(a) for a in args])


# Dict-valued views decoded from the JSON the core produces.
Env.spec = property(lambda self: json.loads(self._spec_json()))
Dataset.manifest = property(lambda self: json.loads(self._manifest_json()))
Model.config = property(lambda self: json.loads(self._config_json()))
Model.evaluate = evaluate
