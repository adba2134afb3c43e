"""Fine-tuning path efficiency over parameter snapshot series.

Efficiency of a trajectory is the L2 norm of the total parameter change
divided by the summed L2 norms of the per-epoch changes:

    efficiency = ||theta_T - theta_0|| / sum_t ||theta_t - theta_{t-1}||

1.0 means a perfectly straight path; values near 0 mean the parameters
wandered far relative to where they ended up. Reported at three
granularities: each dumped group, layer-type rollups, and all matched
parameters jointly.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .container import ParamSnapshotSeries
from .errors import DataError
from .util import matches_name

_LN_RE = re.compile(r"^block\d+\.ln")
_ATTN_RE = re.compile(r"^block\d+\.attn")
_FC_RE = re.compile(r"^block\d+\.mlp")


def layer_type(group: str) -> str:
    """Map a convention group name to its layer type: attn, ln, fc, or other."""
    if _ATTN_RE.match(group):
        return "attn"
    if _LN_RE.match(group):
        return "ln"
    if _FC_RE.match(group):
        return "fc"
    return "other"


@dataclass
class GroupPath:
    name: str
    displacement: float
    path_length: float
    efficiency: float
    stationary: bool


@dataclass
class PathEfficiencyReport:
    model_id: str
    epochs: list[int]
    groups: list[GroupPath]
    layer_types: list[GroupPath]
    total: GroupPath

    def all_entries(self) -> list[GroupPath]:
        return [*self.groups, *self.layer_types, self.total]


def path_stats(matrix: np.ndarray, name: str = "trajectory") -> GroupPath:
    """Displacement, path length, and efficiency of one [T+1, dim] trajectory.

    Rows are parameter vectors per epoch (f64). The path length accumulates
    per-step norms with fsum, in step order.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] < 2:
        raise DataError("trajectory must be a [epochs >= 2, dim] matrix")
    deltas = np.linalg.norm(np.diff(matrix, axis=0), axis=1)
    path_length = math.fsum(deltas)
    displacement = float(np.linalg.norm(matrix[-1] - matrix[0]))
    if path_length == 0.0:
        return GroupPath(name, displacement, path_length, efficiency=1.0, stationary=True)
    # min() guards float noise pushing a collinear path a few ulp above 1
    eff = min(displacement / path_length, 1.0)
    return GroupPath(name, displacement, path_length, efficiency=eff, stationary=False)


def _matched_groups(series: ParamSnapshotSeries, group_filter: str | None) -> list[str]:
    names = [g for g in series.group_names() if matches_name(g, group_filter)]
    if not names:
        raise DataError(f"group filter {group_filter!r} matches no parameter groups")
    return names


def path_efficiency(series: ParamSnapshotSeries, group_filter: str | None = None) -> PathEfficiencyReport:
    """Path-efficiency report for every matched group plus rollups."""
    if len(series.snapshots) < 2:
        raise DataError("path efficiency needs at least 2 snapshots")
    names = _matched_groups(series, group_filter)
    matrices = {name: series.group_matrix(name) for name in names}

    groups = [path_stats(matrices[name], name) for name in names]

    by_type: dict[str, list[str]] = {}
    for name in names:
        by_type.setdefault(layer_type(name), []).append(name)
    layer_types = [
        path_stats(np.hstack([matrices[n] for n in members]), t)
        for t, members in sorted(by_type.items())
    ]
    total = path_stats(np.hstack([matrices[n] for n in names]), "total")
    return PathEfficiencyReport(
        model_id=series.model_id,
        epochs=series.epochs,
        groups=groups,
        layer_types=layer_types,
        total=total,
    )


def per_epoch_deltas(series: ParamSnapshotSeries, group_filter: str | None = None) -> dict[str, np.ndarray]:
    """Per matched group (and "total"), the T per-step L2 norms."""
    if len(series.snapshots) < 2:
        raise DataError("per-epoch deltas need at least 2 snapshots")
    names = _matched_groups(series, group_filter)
    out = {}
    for name in names:
        matrix = series.group_matrix(name)
        out[name] = np.linalg.norm(np.diff(matrix, axis=0), axis=1)
    joint = np.hstack([series.group_matrix(n) for n in names])
    out["total"] = np.linalg.norm(np.diff(joint, axis=0), axis=1)
    return out
