"""Feature pooling and class-information probes over activation dumps.

Pools token-level layers into [samples x features] matrices, then measures
how much label information they carry: 20-NN classification per block,
linear probes, deeper non-linear probes, and probes over concatenated
layers with per-feature standardization to calibrate magnitudes.
"""

from __future__ import annotations

import itertools
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .container import ActivationSet, LabelTable
from .errors import DataError, NumericError

POOL_MODES = ("cls", "gap_wo_cls", "flatten", "mean_all")

STANDARDIZER_EPS = 1e-5


@dataclass
class FeatureMatrix:
    """[N, p] f64 features with provenance (source layers, pooling mode)."""

    values: np.ndarray
    provenance: tuple[tuple[str, ...], str]
    sample_ids: list[str]

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError("feature matrix must be 2-D")
        if not np.isfinite(self.values).all():
            raise DataError("feature matrix contains non-finite values")
        sources, _mode = self.provenance
        if not sources:
            raise DataError("feature provenance must name at least one source layer")
        if self.values.shape[0] != len(self.sample_ids):
            raise DataError("feature rows do not match sample_ids")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def take(self, indices) -> "FeatureMatrix":
        """Row subset in the given index order."""
        ids = [self.sample_ids[i] for i in indices]
        return FeatureMatrix(self.values[np.asarray(indices, dtype=np.intp)], self.provenance, ids)


def _prepool_tokens(tokens: np.ndarray, max_features: int) -> np.ndarray:
    """Mean contiguous token groups so that flatten stays within max_features."""
    n, t, d = tokens.shape
    keep = max(1, max_features // d)
    if t <= keep:
        return tokens
    groups = np.array_split(np.arange(t), keep)
    pooled = np.stack([tokens[:, g, :].mean(axis=1) for g in groups], axis=1)
    return pooled


def pool_features(
    activations: ActivationSet,
    layer: str,
    mode: str,
    max_features: int | None = None,
) -> FeatureMatrix:
    """Pool one layer into [N, p] features.

    Token-level [N, T, d] layers support:
      cls         the first token (CLS comes first by convention)
      gap_wo_cls  mean over tokens 1..T-1
      flatten     reshape to [N, T*d], token-major
      mean_all    mean over all T tokens

    Already-pooled [N, d] layers pass through under flatten / mean_all.
    max_features caps the flattened width by mean-pooling contiguous token
    groups first; it never truncates the feature axis.
    """
    if mode not in POOL_MODES:
        raise DataError(f"unknown pooling mode {mode!r}; expected one of {POOL_MODES}")
    block = activations.layer(layer)
    data = block.data.astype(np.float64)
    provenance = ((layer,), mode)
    if data.ndim == 2:
        if mode in ("cls", "gap_wo_cls"):
            raise DataError(
                f"layer {layer!r} is already pooled to [N, d]; mode {mode!r} needs a token axis"
            )
        return FeatureMatrix(data, provenance, list(activations.sample_ids))
    n, t, d = data.shape
    if mode == "cls":
        if t < 2:
            raise DataError(f"layer {layer!r} has {t} token(s); cls pooling needs T >= 2")
        out = data[:, 0, :]
    elif mode == "gap_wo_cls":
        if t < 2:
            raise DataError(f"layer {layer!r} has {t} token(s); gap_wo_cls needs T >= 2")
        out = data[:, 1:, :].mean(axis=1)
    elif mode == "mean_all":
        out = data.mean(axis=1)
    else:  # flatten
        if max_features is not None:
            data = _prepool_tokens(data, max_features)
        out = data.reshape(n, -1)
    return FeatureMatrix(out, provenance, list(activations.sample_ids))


def block_output_layers(activations: ActivationSet) -> list[tuple[int, str]]:
    """Per block, the layer treated as the block output.

    "block{i}.mlp.fc2" when dumped, else the last dumped layer of block i.
    """
    out = []
    for i in activations.block_indices():
        prefix = f"block{i}."
        candidates = [name for name in activations.layer_names if name.startswith(prefix)]
        preferred = f"block{i}.mlp.fc2"
        out.append((i, preferred if preferred in candidates else candidates[-1]))
    return out


# ---------------------------------------------------------------------------
# k-nearest-neighbour classification


@dataclass
class KnnResult:
    accuracy: float
    predictions: np.ndarray
    sample_ids: list[str]
    k: int


def _l2_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return x / norms


def knn_classify(
    train: FeatureMatrix,
    train_labels: LabelTable,
    eval_: FeatureMatrix,
    eval_labels: LabelTable,
    k: int = 20,
) -> KnnResult:
    """k-NN with cosine similarity over L2-normalized features.

    Prediction is the majority label among the k nearest training samples;
    ties break toward the class with higher summed similarity, then toward
    the lower class index.
    """
    if train.n == 0:
        raise DataError("empty training set")
    if k < 1 or k > train.n:
        raise DataError(f"k={k} outside [1, {train.n}]")
    if train.dim != eval_.dim:
        raise DataError(f"feature dimension mismatch: train {train.dim}, eval {eval_.dim}")
    overlap = set(train.sample_ids) & set(eval_.sample_ids)
    if overlap:
        warnings.warn(
            f"{len(overlap)} sample id(s) appear in both train and eval; "
            "k-NN accuracy on overlapping ids is optimistic",
            RuntimeWarning,
            stacklevel=2,
        )
    y_train = train_labels.vector(train.sample_ids)
    y_eval = eval_labels.vector(eval_.sample_ids)
    num_classes = max(int(y_train.max()), int(y_eval.max())) + 1

    sims = _l2_rows(eval_.values) @ _l2_rows(train.values).T
    # stable sort on -sim: equal similarities resolve to the lower train index
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]

    preds = np.empty(eval_.n, dtype=np.int64)
    for i in range(eval_.n):
        idx = order[i]
        votes = y_train[idx]
        weights = sims[i, idx]
        counts = np.bincount(votes, minlength=num_classes)
        sums = np.bincount(votes, weights=weights, minlength=num_classes)
        best = counts.max()
        tied = np.flatnonzero(counts == best)
        if len(tied) > 1:
            tied = tied[sums[tied] == sums[tied].max()]
        preds[i] = int(tied[0])
    accuracy = float(np.mean(preds == y_eval))
    return KnnResult(accuracy=accuracy, predictions=preds, sample_ids=list(eval_.sample_ids), k=k)


@dataclass
class KnnSweepResult:
    """Accuracy per block per pooling mode, plus the layers actually used."""

    blocks: list[int]
    block_layers: list[str]
    modes: list[str]
    accuracies: np.ndarray  # [blocks, modes]
    k: int

    def rows(self):
        for b, (block, layer) in enumerate(zip(self.blocks, self.block_layers)):
            yield block, layer, [float(v) for v in self.accuracies[b]]


def knn_depth_sweep(
    train_set: ActivationSet,
    train_labels: LabelTable,
    eval_set: ActivationSet,
    eval_labels: LabelTable,
    modes: tuple[str, ...] = ("cls", "gap_wo_cls"),
    k: int = 20,
) -> KnnSweepResult:
    """One knn_classify per block output per pooling mode."""
    layers = block_output_layers(train_set)
    if not layers:
        raise DataError("no block layers found by the naming convention")
    blocks = [b for b, _ in layers]
    names = [name for _, name in layers]
    acc = np.zeros((len(layers), len(modes)))
    for r, layer in enumerate(names):
        for c, mode in enumerate(modes):
            tr = pool_features(train_set, layer, mode)
            ev = pool_features(eval_set, layer, mode)
            acc[r, c] = knn_classify(tr, train_labels, ev, eval_labels, k=k).accuracy
    return KnnSweepResult(blocks=blocks, block_layers=names, modes=list(modes), accuracies=acc, k=k)


# ---------------------------------------------------------------------------
# standardization and layer concatenation


@dataclass
class Standardizer:
    """Per-feature mean/variance; the frozen form of affine-free batch norm."""

    mean: np.ndarray
    var: np.ndarray
    eps: float = STANDARDIZER_EPS

    def __post_init__(self) -> None:
        if (self.var < 0).any():
            raise DataError("negative variance in standardizer")


def fit_standardizer(train: FeatureMatrix) -> Standardizer:
    """Population statistics over the training rows; requires N >= 2."""
    if train.n < 2:
        raise DataError("standardizer needs at least 2 samples")
    return Standardizer(mean=train.values.mean(axis=0), var=train.values.var(axis=0))


def apply_standardizer(s: Standardizer, features: FeatureMatrix) -> FeatureMatrix:
    if features.dim != s.mean.shape[0]:
        raise DataError(
            f"standardizer fitted on {s.mean.shape[0]} features, got {features.dim}"
        )
    values = (features.values - s.mean) / np.sqrt(s.var + s.eps)
    return FeatureMatrix(values, features.provenance, list(features.sample_ids))


def concat_layers(features: list[FeatureMatrix]) -> FeatureMatrix:
    """Column-wise concatenation of aligned feature matrices."""
    if not features:
        raise DataError("nothing to concatenate")
    first = features[0]
    for f in features[1:]:
        if f.sample_ids != first.sample_ids:
            raise DataError("concat requires identical sample_ids in identical order")
    if len(features) == 1:
        return first
    sources = tuple(itertools.chain.from_iterable(f.provenance[0] for f in features))
    modes = sorted({f.provenance[1] for f in features})
    mode = modes[0] if len(modes) == 1 else "+".join(modes)
    values = np.hstack([f.values for f in features])
    return FeatureMatrix(values, (sources, mode), list(first.sample_ids))


# ---------------------------------------------------------------------------
# linear / non-linear probes


@dataclass
class ProbeConfig:
    """Sweep definition for probe training.

    depth counts affine layers, so depth=1 is the linear probe. The sweep is
    the Cartesian product learning_rates x weight_decays x l1_coefficients x
    warmup_epochs x epochs x seeds, in that order.
    """

    depth: int = 1
    learning_rates: list[float] = field(default_factory=lambda: [0.1])
    weight_decays: list[float] = field(default_factory=lambda: [0.0])
    l1_coefficients: list[float] = field(default_factory=lambda: [0.0])
    epochs: list[int] = field(default_factory=lambda: [40])
    warmup_epochs: list[int] = field(default_factory=lambda: [2])
    batch_size: int = 128
    cosine_decay: bool = True
    seeds: list[int] = field(default_factory=lambda: [0])
    hidden_dim: int = 128

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise DataError("probe depth must be >= 1")
        for name in ("learning_rates", "weight_decays", "l1_coefficients", "epochs",
                     "warmup_epochs", "seeds"):
            if not getattr(self, name):
                raise DataError(f"probe config grid {name!r} is empty")
        if self.batch_size < 1 or self.hidden_dim < 1:
            raise DataError("batch_size and hidden_dim must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown probe config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "learning_rates": list(self.learning_rates),
            "weight_decays": list(self.weight_decays),
            "l1_coefficients": list(self.l1_coefficients),
            "epochs": list(self.epochs),
            "warmup_epochs": list(self.warmup_epochs),
            "batch_size": self.batch_size,
            "cosine_decay": self.cosine_decay,
            "seeds": list(self.seeds),
            "hidden_dim": self.hidden_dim,
        }


@dataclass
class ProbeRun:
    learning_rate: float
    weight_decay: float
    l1: float
    warmup: int
    epochs: int
    seed: int
    accuracy: float | None
    status: str  # "ok" | "failed"


@dataclass
class ProbeResult:
    runs: list[ProbeRun]
    best_mean: float
    best_std: float
    best_count: int
    failed: int

    def best_runs(self) -> list[ProbeRun]:
        ok = [r for r in self.runs if r.status == "ok"]
        ok.sort(key=lambda r: -r.accuracy)  # type: ignore[operator]
        return ok[: self.best_count]


def _lr_at(epoch: int, base: float, warmup: int, total: int, cosine: bool) -> float:
    if warmup > 0 and epoch < warmup:
        return base * (epoch + 1) / warmup
    if not cosine or total <= warmup:
        return base
    frac = (epoch - warmup) / (total - warmup)
    return base * 0.5 * (1.0 + np.cos(np.pi * frac))


class _ProbeNet:
    """MLP probe: (depth-1) x [affine -> batch standardization -> ReLU] -> affine.

    Batch statistics are used during training; exponential running estimates
    (momentum 0.9) are used for evaluation. No affine parameters in the
    normalization, mirroring the calibration layer in front of the probe.
    """

    BN_MOMENTUM = 0.9

    def __init__(self, in_dim: int, hidden: int, classes: int, depth: int, rng: np.random.Generator):
        dims = [in_dim] + [hidden] * (depth - 1) + [classes]
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(dims, dims[1:]):
            self.weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self.run_mean = [np.zeros(hidden) for _ in range(depth - 1)]
        self.run_var = [np.ones(hidden) for _ in range(depth - 1)]
        self.vel_w = [np.zeros_like(w) for w in self.weights]
        self.vel_b = [np.zeros_like(b) for b in self.biases]
        self.eps = STANDARDIZER_EPS

    def train_step(self, x: np.ndarray, y: np.ndarray, lr: float, wd: float, l1: float,
                   momentum: float = 0.9) -> float:
        m = x.shape[0]
        hidden = len(self.weights) - 1
        acts = [x]
        caches = []
        a = x
        for l in range(hidden):
            z = a @ self.weights[l] + self.biases[l]
            mu = z.mean(axis=0)
            var = z.var(axis=0)
            ivar = 1.0 / np.sqrt(var + self.eps)
            zhat = (z - mu) * ivar
            a = np.maximum(zhat, 0.0)
            caches.append((z, mu, ivar, zhat))
            acts.append(a)
            self.run_mean[l] = self.BN_MOMENTUM * self.run_mean[l] + (1 - self.BN_MOMENTUM) * mu
            self.run_var[l] = self.BN_MOMENTUM * self.run_var[l] + (1 - self.BN_MOMENTUM) * var
        logits = a @ self.weights[-1] + self.biases[-1]

        shifted = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        loss = float(np.mean(lse - shifted[np.arange(m), y]))

        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        dlogits = probs
        dlogits[np.arange(m), y] -= 1.0
        dlogits /= m

        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        grads_w[-1] = acts[-1].T @ dlogits + wd * self.weights[-1] + l1 * np.sign(self.weights[-1])
        grads_b[-1] = dlogits.sum(axis=0)
        da = dlogits @ self.weights[-1].T
        for l in range(hidden - 1, -1, -1):
            z, mu, ivar, zhat = caches[l]
            dzhat = da * (zhat > 0.0)
            zc = z - mu
            dvar = np.sum(dzhat * zc, axis=0) * (-0.5) * ivar**3
            dmu = -np.sum(dzhat, axis=0) * ivar + dvar * (-2.0 / m) * np.sum(zc, axis=0)
            dz = dzhat * ivar + dvar * (2.0 / m) * zc + dmu / m
            grads_w[l] = acts[l].T @ dz + wd * self.weights[l]
            grads_b[l] = dz.sum(axis=0)
            da = dz @ self.weights[l].T

        for l in range(len(self.weights)):
            self.vel_w[l] = momentum * self.vel_w[l] + grads_w[l]
            self.vel_b[l] = momentum * self.vel_b[l] + grads_b[l]
            self.weights[l] -= lr * self.vel_w[l]
            self.biases[l] -= lr * self.vel_b[l]
        return loss

    def predict(self, x: np.ndarray) -> np.ndarray:
        a = x
        for l in range(len(self.weights) - 1):
            z = a @ self.weights[l] + self.biases[l]
            zhat = (z - self.run_mean[l]) / np.sqrt(self.run_var[l] + self.eps)
            a = np.maximum(zhat, 0.0)
        logits = a @ self.weights[-1] + self.biases[-1]
        return logits.argmax(axis=1)


def _run_probe(x_train, y_train, x_eval, y_eval, classes, depth, hidden, lr, wd, l1,
               warmup, total_epochs, batch_size, cosine, seed) -> float | None:
    rng = np.random.default_rng(seed)
    net = _ProbeNet(x_train.shape[1], hidden, classes, depth, rng)
    n = x_train.shape[0]
    # overflow during a diverging run is expected and handled via the loss check
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(total_epochs):
            lr_e = _lr_at(epoch, lr, warmup, total_epochs, cosine)
            perm = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = perm[start : start + batch_size]
                loss = net.train_step(x_train[idx], y_train[idx], lr_e, wd, l1)
                if not np.isfinite(loss):
                    return None
        if any(not np.isfinite(w).all() for w in net.weights):
            return None
        return float(np.mean(net.predict(x_eval) == y_eval))


def train_probe(
    train: FeatureMatrix,
    train_labels: LabelTable,
    eval_: FeatureMatrix,
    eval_labels: LabelTable,
    config: ProbeConfig,
    threads: int = 1,
    standardize: bool = True,
) -> ProbeResult:
    """Sweep probe training over the config grid; report best-5 mean +- std.

    Features are standardized with statistics fitted on the training split
    before entering the probe (standardize=False is an ablation hook).
    Diverged runs (non-finite loss) are marked failed and excluded from the
    best-5 statistics.
    """
    y_train = train_labels.vector(train.sample_ids)
    y_eval = eval_labels.vector(eval_.sample_ids)
    if len(np.unique(y_train)) < 2:
        raise DataError("probe training needs at least 2 classes in the training labels")
    classes = max(train_labels.num_classes, int(y_eval.max()) + 1)

    if standardize:
        scaler = fit_standardizer(train)
        x_train = apply_standardizer(scaler, train).values
        x_eval = apply_standardizer(scaler, eval_).values
    else:
        x_train = train.values
        x_eval = eval_.values

    grid = list(
        itertools.product(
            config.learning_rates,
            config.weight_decays,
            config.l1_coefficients,
            config.warmup_epochs,
            config.epochs,
            config.seeds,
        )
    )

    def run_one(params):
        lr, wd, l1, warmup, total, seed = params
        return _run_probe(
            x_train, y_train, x_eval, y_eval, classes, config.depth, config.hidden_dim,
            lr, wd, l1, warmup, total, config.batch_size, config.cosine_decay, seed,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accuracies = list(pool.map(run_one, grid))
    else:
        accuracies = [run_one(p) for p in grid]

    runs = [
        ProbeRun(
            learning_rate=lr, weight_decay=wd, l1=l1, warmup=warmup, epochs=total,
            seed=seed, accuracy=acc, status="ok" if acc is not None else "failed",
        )
        for (lr, wd, l1, warmup, total, seed), acc in zip(grid, accuracies)
    ]
    ok = sorted((r.accuracy for r in runs if r.status == "ok"), reverse=True)
    if not ok:
        raise NumericError("every probe run diverged; nothing to report")
    best = np.array(ok[: min(5, len(ok))])
    return ProbeResult(
        runs=runs,
        best_mean=float(best.mean()),
        best_std=float(best.std()),
        best_count=len(best),
        failed=sum(r.status == "failed" for r in runs),
    )
