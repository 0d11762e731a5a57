"""Python access to the xpert model selection core."""

from __future__ import annotations

import json
from os import PathLike
from typing import Mapping, Optional, Sequence

from . import _core
from ._core import (
    CALIBRATED_NOISE,
    XpertError,
    distance,
    merge_snapshots,
    minimal_budget,
    snapshot_fingerprint,
    snapshot_parameter_count,
    solve_weights,
    write_stub_snapshot,
)

__all__ = [
    "CALIBRATED_NOISE",
    "XpertError",
    "accuracy_sweep",
    "decompose",
    "distance",
    "find_merge_set",
    "layer_schedule",
    "merge_snapshots",
    "minimal_budget",
    "multilevel_check",
    "rank_models",
    "read_manifest",
    "snapshot_fingerprint",
    "snapshot_parameter_count",
    "solve_weights",
    "write_stub_snapshot",
]


def decompose(
    vector: Sequence[float],
    members: Sequence[tuple[str, Sequence[float]]],
    ortho_threshold: float = 0.1,
    epsilon_fraction: float = 0.2,
) -> dict:
    """Coordinates of `vector` over a basis given as (word, raw direction) pairs."""
    return json.loads(_core.decompose_json(list(vector), [(w, list(d)) for w, d in members],
                                           ortho_threshold, epsilon_fraction))


def rank_models(local: Sequence[float], models: Mapping[str, Sequence[float]], metric: str = "l1") -> dict:
    return json.loads(_core.rank_json(list(local), {k: list(v) for k, v in models.items()}, metric))


def find_merge_set(
    local: Sequence[float],
    models: Mapping[str, Sequence[float]],
    tau: Optional[float] = None,
    k_max: int = 2,
    metric: str = "l1",
) -> dict:
    return json.loads(_core.merge_set_json(list(local), {k: list(v) for k, v in models.items()}, tau, k_max, metric))


def layer_schedule(layer_bytes: Sequence[int], working_bytes: int, budget_bytes: int) -> dict:
    return json.loads(_core.schedule_json(list(layer_bytes), working_bytes, budget_bytes))


def read_manifest(path: str | PathLike) -> dict:
    return json.loads(_core.read_manifest_json(path))


def accuracy_sweep(seed: int, styles: int, dim: int, noise: float, similarities: Sequence[float],
                   models: int, trials: int, prompts: int = 50, local_samples: int = 50,
                   metric: str = "l1") -> list[dict]:
    return json.loads(_core.accuracy_sweep_json(seed, styles, dim, noise, list(similarities), models, trials,
                                                prompts, local_samples, metric))


def multilevel_check(seed: int, styles: int, dim: int, noise: float, levels: int, trials: int,
                     prompts: int = 50, local_samples: int = 50) -> dict:
    return json.loads(_core.multilevel_check_json(seed, styles, dim, noise, levels, trials, prompts, local_samples))
