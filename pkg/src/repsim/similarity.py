"""Linear CKA with the unbiased HSIC estimator, in exact and minibatch form.

The similarity between representation matrices X [n x p1] and Y [n x p2] is
the normalized HSIC of their Gram matrices K = X X^T and L = Y Y^T:

    CKA(K, L) = HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L))

HSIC_1 is the unbiased estimator over zero-diagonal Gram matrices Kt, Lt:

    HSIC_1(K, L) = (1 / (n (n-3))) * ( tr(Kt Lt)
                   + (1^T Kt 1)(1^T Lt 1) / ((n-1)(n-2))
                   - (2 / (n-2)) 1^T Kt Lt 1 )

The minibatch form averages the HSIC_1 terms of k equal-size batches in the
numerator and in each denominator factor separately, which makes the value
independent of batch size. All arithmetic is f64 with fixed accumulation
order; statistics are reported raw (slightly negative values are possible
and meaningful, clamping happens only in plot output).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .container import ActivationSet, align_samples
from .errors import DataError, NumericError, UndefinedSimilarityError
from .probes import FeatureMatrix, pool_features
from .util import matches_name

DEFAULT_BATCH_SIZE = 32
DEFAULT_SAMPLE_COUNT = 1024

_SYM_TOL = 1e-12


def _feature_values(features) -> np.ndarray:
    values = features.values if isinstance(features, FeatureMatrix) else np.asarray(features)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise DataError("features must be a 2-D [samples x features] matrix")
    if values.shape[0] < 4:
        raise DataError(f"HSIC_1 needs n >= 4 samples, got {values.shape[0]}")
    if values.shape[1] < 1:
        raise DataError("features need at least one column")
    if not np.isfinite(values).all():
        raise DataError("features contain non-finite values")
    return values


@dataclass
class GramMatrix:
    """n x n symmetric f64 Gram matrix; n >= 4 for the unbiased estimator."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise DataError("Gram matrix must be square")
        if self.values.shape[0] < 4:
            raise DataError(f"Gram matrix needs n >= 4, got n={self.values.shape[0]}")
        scale = max(1.0, float(np.abs(self.values).max()))
        if float(np.abs(self.values - self.values.T).max()) > _SYM_TOL * scale:
            raise DataError("Gram matrix is not symmetric")

    @property
    def n(self) -> int:
        return self.values.shape[0]


def gram(features) -> GramMatrix:
    """K = X X^T in f64; symmetrized exactly to kill BLAS rounding asymmetry."""
    x = _feature_values(features)
    k = x @ x.T
    k = (k + k.T) * 0.5
    return GramMatrix(k)


def _gram_values(g) -> np.ndarray:
    return g.values if isinstance(g, GramMatrix) else GramMatrix(np.asarray(g)).values


def hsic1(k, l) -> float:
    """Unbiased HSIC of two same-size Gram matrices (zero-diagonal form)."""
    kv = _gram_values(k)
    lv = _gram_values(l)
    n = kv.shape[0]
    if lv.shape[0] != n:
        raise DataError(f"Gram size mismatch: {n} vs {lv.shape[0]}")
    kt = kv.copy()
    lt = lv.copy()
    np.fill_diagonal(kt, 0.0)
    np.fill_diagonal(lt, 0.0)
    trace = float((kt * lt.T).sum())
    sum_k = float(kt.sum())
    sum_l = float(lt.sum())
    cross = float(kt.sum(axis=0) @ lt.sum(axis=1))
    return (
        trace
        + sum_k * sum_l / ((n - 1) * (n - 2))
        - 2.0 * cross / (n - 2)
    ) / (n * (n - 3))


def cka_exact(x, y) -> float:
    """Single-batch linear CKA of two feature matrices over the same samples."""
    xv = _feature_values(x)
    yv = _feature_values(y)
    if xv.shape[0] != yv.shape[0]:
        raise DataError(f"sample count mismatch: {xv.shape[0]} vs {yv.shape[0]}")
    k = gram(xv).values
    l = gram(yv).values
    hxy = hsic1(k, l)
    hxx = hsic1(k, k)
    hyy = hsic1(l, l)
    if hxx <= 0.0 or hyy <= 0.0:
        raise UndefinedSimilarityError(
            f"self-HSIC not positive (x: {hxx:.3e}, y: {hyy:.3e}); features are degenerate"
        )
    return hxy / np.sqrt(hxx * hyy)


def minibatches(values: np.ndarray, batch_size: int):
    """Consecutive row chunks; the trailing chunk may be partial."""
    values = np.asarray(values)
    for start in range(0, values.shape[0], batch_size):
        yield values[start : start + batch_size]


def cka_minibatch(batches_x, batches_y, batch_size: int = DEFAULT_BATCH_SIZE) -> float:
    """Minibatch CKA over two aligned streams of feature batches.

    Both streams must yield the same number of batches with batch_size rows
    each; one trailing partial batch is discarded from both. Accumulation is
    in stream order. The normalization is computed as num / sqrt(da * db),
    algebraically equal to the two-factor form and exact (1.0) when the two
    streams are identical.
    """
    if batch_size < 4:
        raise DataError(f"batch_size must be >= 4, got {batch_size}")
    cross, self_x, self_y = [], [], []
    tail_seen = False
    pairs = zip(batches_x, batches_y, strict=True)
    try:
        for bx, by in pairs:
            bx = _np2d(bx)
            by = _np2d(by)
            if bx.shape[0] != by.shape[0]:
                raise DataError(
                    f"misaligned batches: {bx.shape[0]} vs {by.shape[0]} rows"
                )
            if tail_seen:
                raise DataError("partial batch in mid-stream; only the trailing batch may be short")
            if bx.shape[0] < batch_size:
                tail_seen = True  # trailing partial batch: discard
                continue
            if bx.shape[0] > batch_size:
                raise DataError(f"batch of {bx.shape[0]} rows exceeds batch_size={batch_size}")
            k = gram(bx).values
            l = gram(by).values
            cross.append(hsic1(k, l))
            self_x.append(hsic1(k, k))
            self_y.append(hsic1(l, l))
    except ValueError as exc:  # zip(strict=True) length mismatch
        raise DataError(f"misaligned batch streams: {exc}") from None
    if not cross:
        raise DataError("no full batches; need k >= 1 batches of batch_size samples")
    num = float(np.sum(np.asarray(cross))) / len(cross)
    da = float(np.sum(np.asarray(self_x))) / len(self_x)
    db = float(np.sum(np.asarray(self_y))) / len(self_y)
    if da <= 0.0 or db <= 0.0:
        raise UndefinedSimilarityError(
            f"mean self-HSIC not positive (x: {da:.3e}, y: {db:.3e}); degenerate batches"
        )
    return num / np.sqrt(da * db)


def _np2d(batch) -> np.ndarray:
    arr = np.asarray(batch.values if isinstance(batch, FeatureMatrix) else batch, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError("batches must be 2-D [samples x features]")
    return arr


# ---------------------------------------------------------------------------
# layer-pair grids


@dataclass
class CkaMatrix:
    """Layer-pair CKA grid plus the estimator configuration that produced it.

    Undefined entries (degenerate layers) are NaN in values and False in
    defined; they are flagged, never silently zeroed.
    """

    layer_names_a: list[str]
    layer_names_b: list[str]
    values: np.ndarray
    batch_size: int
    num_samples: int
    pooling_mode: str
    layer_filter: str | None = None
    model_a: str = ""
    model_b: str = ""

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = (len(self.layer_names_a), len(self.layer_names_b))
        if self.values.shape != expected:
            raise DataError(f"CKA grid shape {self.values.shape} != {expected}")
        finite = self.values[np.isfinite(self.values)]
        if finite.size and (finite.max() > 1.0 + 1e-9 or finite.min() < -1.0):
            raise NumericError("CKA values outside [-1, 1 + 1e-9]; estimator misbehaved")

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.values)

    def undefined_pairs(self) -> list[tuple[str, str]]:
        out = []
        for i, j in zip(*np.nonzero(~self.defined)):
            out.append((self.layer_names_a[i], self.layer_names_b[j]))
        return out


def _pool_batches(
    activations: ActivationSet,
    names: list[str],
    row_idx: np.ndarray,
    pooling: str,
    batch_size: int,
    max_features: int | None,
) -> list[list[np.ndarray]]:
    """Per layer, the list of full batches of pooled rows in aligned order."""
    out = []
    k = len(row_idx) // batch_size
    for name in names:
        pooled = pool_features(activations, name, pooling, max_features=max_features)
        rows = pooled.values[row_idx]
        out.append([rows[i * batch_size : (i + 1) * batch_size] for i in range(k)])
    return out


class _GramStack:
    """Per-layer zero-diagonal Gram batches with cached sum terms.

    Stacking the k batches lets a layer pair evaluate all its HSIC_1 terms
    in three array operations instead of 3k scalar reductions; the reduction
    order per pair is fixed by the array layout, so results are
    scheduling-independent.
    """

    def __init__(self, batches: list[np.ndarray]):
        grams = np.stack([gram(batch).values for batch in batches])
        for g in grams:
            np.fill_diagonal(g, 0.0)
        self.kt = grams  # [k, n, n], diagonals zeroed
        self.row_sums = grams.sum(axis=2)  # [k, n]
        self.totals = self.row_sums.sum(axis=1)  # [k]


def _hsic1_stack(a: _GramStack, b: _GramStack, n: int) -> np.ndarray:
    """HSIC_1 per batch for one layer pair; mirrors hsic1 on symmetric input."""
    trace = np.einsum("bij,bij->b", a.kt, b.kt)
    cross = np.einsum("bi,bi->b", a.row_sums, b.row_sums)
    return (
        trace
        + a.totals * b.totals / ((n - 1) * (n - 2))
        - 2.0 * cross / (n - 2)
    ) / (n * (n - 3))


def cka_matrix(
    a: ActivationSet,
    b: ActivationSet,
    pooling: str = "flatten",
    batch_size: int = DEFAULT_BATCH_SIZE,
    layer_filter: str | None = None,
    max_samples: int | None = None,
    max_features: int | None = None,
    threads: int = 1,
) -> CkaMatrix:
    """Minibatch CKA over every (filtered) layer pair of two dumps.

    Samples are aligned by id (a's order) and chopped into consecutive
    batches shared by every pair, so each pair sees identical batch
    membership. Pairs are independent and may be computed concurrently;
    results do not depend on scheduling.
    """
    names_a = [n for n in a.layer_names if matches_name(n, layer_filter)]
    names_b = [n for n in b.layer_names if matches_name(n, layer_filter)]
    if not names_a or not names_b:
        raise DataError(f"layer filter {layer_filter!r} matches no layers")
    alignment = align_samples(a, b)
    if len(alignment) < 2 * batch_size:
        raise DataError(
            f"only {len(alignment)} aligned samples; need at least 2*batch_size = {2 * batch_size}"
        )
    use = len(alignment) if max_samples is None else min(len(alignment), max_samples)
    k = use // batch_size
    if k < 1:
        raise DataError(f"max_samples={max_samples} yields no full batch of {batch_size}")
    idx_a = np.asarray(alignment.indices_a[:use], dtype=np.intp)
    idx_b = np.asarray(alignment.indices_b[:use], dtype=np.intp)

    batches_a = _pool_batches(a, names_a, idx_a, pooling, batch_size, max_features)
    batches_b = _pool_batches(b, names_b, idx_b, pooling, batch_size, max_features)

    # Gram stacks and self-HSIC terms are shared across pairs; precompute.
    stacks_a = [_GramStack(layer) for layer in batches_a]
    stacks_b = [_GramStack(layer) for layer in batches_b]
    self_a = [_hsic1_stack(s, s, batch_size) for s in stacks_a]
    self_b = [_hsic1_stack(s, s, batch_size) for s in stacks_b]

    def one_pair(i: int, j: int) -> float:
        num = float(np.sum(_hsic1_stack(stacks_a[i], stacks_b[j], batch_size))) / k
        da = float(np.sum(self_a[i])) / k
        db = float(np.sum(self_b[j])) / k
        if da <= 0.0 or db <= 0.0:
            return np.nan
        return num / np.sqrt(da * db)

    pairs = [(i, j) for i in range(len(names_a)) for j in range(len(names_b))]
    values = np.empty((len(names_a), len(names_b)))
    if threads > 1:
        # one contiguous slice of pairs per worker; each pair stays
        # self-contained, so scheduling cannot change any value
        chunks = np.array_split(np.arange(len(pairs)), threads)

        def run_chunk(chunk):
            return [one_pair(*pairs[t]) for t in chunk]

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = [v for part in pool.map(run_chunk, chunks) for v in part]
    else:
        results = [one_pair(i, j) for i, j in pairs]
    for (i, j), v in zip(pairs, results):
        values[i, j] = v

    return CkaMatrix(
        layer_names_a=names_a,
        layer_names_b=names_b,
        values=values,
        batch_size=batch_size,
        num_samples=k * batch_size,
        pooling_mode=pooling,
        layer_filter=layer_filter,
        model_a=a.model_id,
        model_b=b.model_id,
    )


# ---------------------------------------------------------------------------
# layer-distance profile


@dataclass
class ProfileBin:
    lo: float
    hi: float
    mean: float  # NaN when the bin holds no defined CKA values
    count: int


@dataclass
class LayerDistanceProfile:
    """Mean CKA per normalized layer-distance bin over [0, 1]."""

    bins: list[ProfileBin]

    @property
    def total_pairs(self) -> int:
        return sum(b.count for b in self.bins)


def layer_distance_profile(matrix: CkaMatrix, num_bins: int) -> LayerDistanceProfile:
    """Bin layer pairs by |depth_a - depth_b| with depth i/(L-1).

    Bins are equal width over [0, 1], half-open [lo, hi) with the last bin
    closed. Counts include every layer pair; means skip undefined entries.
    """
    if num_bins < 1:
        raise DataError(f"num_bins must be >= 1, got {num_bins}")
    la = len(matrix.layer_names_a)
    lb = len(matrix.layer_names_b)
    if la < 2 or lb < 2:
        raise DataError("layer-distance profile needs >= 2 layers per side")
    depth_a = np.arange(la) / (la - 1)
    depth_b = np.arange(lb) / (lb - 1)
    dist = np.abs(depth_a[:, None] - depth_b[None, :])
    which = np.minimum((dist * num_bins).astype(np.int64), num_bins - 1)

    bins = []
    for idx in range(num_bins):
        mask = which == idx
        count = int(mask.sum())
        vals = matrix.values[mask]
        vals = vals[np.isfinite(vals)]
        mean = float(vals.mean()) if vals.size else float("nan")
        bins.append(ProfileBin(lo=idx / num_bins, hi=(idx + 1) / num_bins, mean=mean, count=count))
    return LayerDistanceProfile(bins=bins)
