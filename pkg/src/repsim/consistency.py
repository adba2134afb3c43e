"""Functional agreement between two models' classifier outputs.

Works on full per-sample class orderings: Kendall's tau over top-k rankings
(symmetrized across the two models) and the micro-averaged F1 of top-1
agreement, which for single-label predictions equals the agreement fraction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import LabelTable, RankTable, align_samples
from .errors import DataError, NumericError

CONSISTENCY_FILTERS = ("all", "both_correct", "both_incorrect")


def kendall_tau_pair(ranks_a, ranks_b) -> float:
    """Tau-a between two lists of distinct rank positions.

    (concordant - discordant) / (m (m-1) / 2) over all index pairs, with a
    fixed enumeration order (i < j).
    """
    a = np.asarray(ranks_a, dtype=np.int64)
    b = np.asarray(ranks_b, dtype=np.int64)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise DataError("rank position lists must be 1-D and equally long")
    m = a.shape[0]
    if m < 2:
        raise DataError(f"tau needs at least 2 positions, got {m}")
    if len(np.unique(a)) != m or len(np.unique(b)) != m:
        raise DataError("rank positions must be distinct within each list")
    iu, ju = np.triu_indices(m, k=1)
    prod = np.sign(a[iu] - a[ju]) * np.sign(b[iu] - b[ju])
    return float(int(prod.sum()) / (m * (m - 1) / 2))


def _inverse_rows(ranks: np.ndarray) -> np.ndarray:
    """positions[s, c] = rank position of class c in sample s's ordering."""
    n, c = ranks.shape
    pos = np.empty_like(ranks)
    rows = np.arange(n)[:, None]
    pos[rows, ranks] = np.arange(c)[None, :]
    return pos


@dataclass
class ConsistencyResult:
    mean: float
    std: float
    count: int
    top_k: int
    selection: str


def rank_consistency(
    a: RankTable,
    b: RankTable,
    labels: LabelTable | None = None,
    top_k: int = 5,
    selection: str = "all",
) -> ConsistencyResult:
    """Mean +- std of per-sample symmetrized top-k tau between two rank tables.

    Per sample: take one model's top-k classes in order, look up their rank
    positions in the other model's full ordering, compute tau against
    positions 0..k-1, and average the two directions. Selection restricts to
    samples where both models' top-1 equals the label ("both_correct") or
    neither does ("both_incorrect").
    """
    if selection not in CONSISTENCY_FILTERS:
        raise DataError(f"unknown selection {selection!r}; expected one of {CONSISTENCY_FILTERS}")
    if a.num_classes != b.num_classes:
        raise DataError(
            f"class count mismatch: {a.num_classes} vs {b.num_classes}"
        )
    if not 2 <= top_k <= a.num_classes:
        raise DataError(f"top_k={top_k} outside [2, {a.num_classes}]")
    if selection != "all" and labels is None:
        raise DataError(f"selection {selection!r} requires a label table")

    alignment = align_samples(a, b)
    ra = a.ranks[alignment.indices_a]
    rb = b.ranks[alignment.indices_b]
    ids = [a.sample_ids[i] for i in alignment.indices_a]

    if selection != "all":
        y = labels.vector(ids)
        correct_a = ra[:, 0] == y
        correct_b = rb[:, 0] == y
        keep = (correct_a & correct_b) if selection == "both_correct" else (~correct_a & ~correct_b)
        ra, rb = ra[keep], rb[keep]
        if ra.shape[0] == 0:
            raise NumericError(f"selection {selection!r} retained zero samples")

    pos_a = _inverse_rows(ra)
    pos_b = _inverse_rows(rb)
    anchor = np.arange(top_k)
    taus = np.empty(ra.shape[0])
    for s in range(ra.shape[0]):
        forward = kendall_tau_pair(anchor, pos_b[s, ra[s, :top_k]])
        backward = kendall_tau_pair(anchor, pos_a[s, rb[s, :top_k]])
        taus[s] = 0.5 * (forward + backward)
    return ConsistencyResult(
        mean=float(taus.mean()),
        std=float(taus.std()),
        count=int(taus.shape[0]),
        top_k=top_k,
        selection=selection,
    )


def top1_agreement_f1(a: RankTable, b: RankTable) -> float:
    """Micro-averaged F1 of the two models' top-1 predictions.

    For single-label multi-class outputs micro F1 reduces to the exact
    agreement fraction, which also makes it symmetric in a and b.
    """
    if a.num_classes != b.num_classes:
        raise DataError(f"class count mismatch: {a.num_classes} vs {b.num_classes}")
    alignment = align_samples(a, b)
    top_a = a.ranks[alignment.indices_a, 0]
    top_b = b.ranks[alignment.indices_b, 0]
    return float(np.mean(top_a == top_b))
