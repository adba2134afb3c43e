"""Seeded synthetic fixtures with analytically known structure.

Everything here is a pure function of its arguments: the random source is
PCG64 seeded through numpy SeedSequence with fixed spawn keys per stream, so
a given spec always regenerates bit-identical data.

Streams, by spawn key: 0 primary features, 1 orthogonal transform / second
matrix, 2 labels, 3 auxiliary noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import ActivationSet, LabelTable, ParamSnapshot, ParamSnapshotSeries, TensorBlock
from .errors import DataError
from .probes import FeatureMatrix

PLACEMENTS = ("final", "intermediate", "xor")
TRAJECTORY_KINDS = ("line", "return", "right_angle", "random_walk")


def _stream(seed: int, key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(key,))))


def _sample_ids(n: int) -> list[str]:
    return [f"s{i:06d}" for i in range(n)]


@dataclass
class FixtureSpec:
    """Record of how a fixture was generated; written as a JSON sidecar."""

    kind: str
    seed: int
    n: int = 0
    p: int = 0
    num_classes: int = 0
    knobs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "n": self.n,
            "p": self.p,
            "num_classes": self.num_classes,
            "knobs": self.knobs,
            "rng": "numpy PCG64 via SeedSequence(seed, spawn_key=(stream,))",
        }


def random_orthogonal(p: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-ish orthogonal matrix from QR with the sign of diag(R) fixed."""
    g = rng.standard_normal((p, p))
    q, r = np.linalg.qr(g)
    signs = np.where(np.diag(r) < 0.0, -1.0, 1.0)
    return q * signs


def gen_orthogonal_pair(n: int, p: int, seed: int) -> tuple[FeatureMatrix, FeatureMatrix]:
    """Gaussian X and Y = X Q for a seeded random orthogonal Q; CKA(X, Y) = 1."""
    if n < 4 or p < 1:
        raise DataError("orthogonal pair needs n >= 4 and p >= 1")
    x = _stream(seed, 0).standard_normal((n, p))
    q = random_orthogonal(p, _stream(seed, 1))
    ids = _sample_ids(n)
    fx = FeatureMatrix(x, (("x",), "synth"), ids)
    fy = FeatureMatrix(x @ q, (("y",), "synth"), ids)
    return fx, fy


def gen_independent_pair(n: int, p_a: int, p_b: int, seed: int) -> tuple[FeatureMatrix, FeatureMatrix]:
    """Two independently seeded Gaussian matrices; population CKA is 0."""
    if n < 4 or p_a < 1 or p_b < 1:
        raise DataError("independent pair needs n >= 4 and positive dims")
    ids = _sample_ids(n)
    fx = FeatureMatrix(_stream(seed, 0).standard_normal((n, p_a)), (("x",), "synth"), ids)
    fy = FeatureMatrix(_stream(seed, 1).standard_normal((n, p_b)), (("y",), "synth"), ids)
    return fx, fy


def gen_pair_activations(kind: str, n: int, p: int, seed: int, model_id: str = "") -> ActivationSet:
    """The orthogonal/independent pair packed as a 2-layer [N, p] dump."""
    if kind == "orthogonal":
        fx, fy = gen_orthogonal_pair(n, p, seed)
    elif kind == "independent":
        fx, fy = gen_independent_pair(n, p, p, seed)
    else:
        raise DataError(f"unknown pair kind {kind!r}")
    return ActivationSet(
        model_id=model_id or f"synth-{kind}-pair",
        sample_ids=fx.sample_ids,
        layers=[
            TensorBlock("x", fx.values.astype(np.float32)),
            TensorBlock("y", fy.values.astype(np.float32)),
        ],
    )


def gen_independent_activations(
    n: int, p: int, num_layers: int, seed: int, model_id: str = ""
) -> ActivationSet:
    """num_layers mutually independent Gaussian [N, p] layers."""
    if num_layers < 1:
        raise DataError("need at least one layer")
    layers = [
        TensorBlock(f"block{i}.mlp.fc2", _stream(seed, i).standard_normal((n, p)).astype(np.float32))
        for i in range(num_layers)
    ]
    return ActivationSet(
        model_id=model_id or "synth-independent",
        sample_ids=_sample_ids(n),
        layers=layers,
    )


def gen_planted_probe_fixture(
    n: int,
    num_classes: int,
    placement: str,
    noise: float = 0.1,
    seed: int = 0,
    feature_dim: int = 16,
    intermediate_scale: float = 1.0,
) -> tuple[ActivationSet, LabelTable]:
    """Two-block token-level dump with class signal planted at a known spot.

    "final" plants linearly separable class means in the final block's CLS
    token; "intermediate" plants them only in the first block with the final
    block carrying pure noise; "xor" plants a 2-class parity of two feature
    signs, decodable only by a probe of depth >= 2. Token 1 of each block is
    always noise, so CLS pooling is required to reach the signal.
    """
    if placement not in PLACEMENTS:
        raise DataError(f"unknown placement {placement!r}; expected one of {PLACEMENTS}")
    if num_classes < 2:
        raise DataError("planted fixtures need num_classes >= 2")
    if placement == "xor" and num_classes != 2:
        raise DataError("xor placement is a 2-class parity fixture")
    if feature_dim < max(num_classes, 2):
        raise DataError("feature_dim must cover the class count")

    rng_sig = _stream(seed, 0)
    rng_lab = _stream(seed, 2)
    rng_noise = _stream(seed, 3)
    labels = rng_lab.permutation(np.arange(n) % num_classes)

    def noise_tokens(shape):
        return rng_noise.standard_normal(shape)

    if placement == "xor":
        mag = 0.5 + np.abs(rng_sig.standard_normal((n, 2)))
        signs = np.where(rng_sig.random((n, 2)) < 0.5, -1.0, 1.0)
        planted = np.hstack([signs * mag, noise * rng_sig.standard_normal((n, feature_dim - 2))])
        labels = ((signs[:, 0] > 0) ^ (signs[:, 1] > 0)).astype(np.int64)
    else:
        means = 4.0 * np.eye(num_classes, feature_dim)
        planted = means[labels] + noise * rng_sig.standard_normal((n, feature_dim))

    plain = rng_sig.standard_normal((n, feature_dim))
    if placement == "intermediate":
        cls0, cls1 = planted * intermediate_scale, plain
    else:
        cls0, cls1 = plain, planted

    block0 = np.stack([cls0, noise_tokens((n, feature_dim))], axis=1)
    block1 = np.stack([cls1, noise_tokens((n, feature_dim))], axis=1)
    ids = _sample_ids(n)
    activations = ActivationSet(
        model_id=f"synth-{placement}",
        sample_ids=ids,
        layers=[
            TensorBlock("block0.mlp.fc2", block0.astype(np.float32)),
            TensorBlock("block1.mlp.fc2", block1.astype(np.float32)),
        ],
    )
    table = LabelTable(labels=dict(zip(ids, (int(v) for v in labels))), num_classes=num_classes)
    return activations, table


def gen_trajectory(kind: str, steps: int = 2, dim: int = 2, seed: int = 0) -> ParamSnapshotSeries:
    """Deterministic parameter trajectories with known path efficiency.

    line -> 1.0; return (even steps) -> 0.0; right_angle -> sqrt(2)/2 over
    its fixed 3 snapshots; random_walk takes seeded Gaussian steps.
    """
    if kind not in TRAJECTORY_KINDS:
        raise DataError(f"unknown trajectory kind {kind!r}; expected one of {TRAJECTORY_KINDS}")
    if dim < 1 or steps < 1:
        raise DataError("trajectory needs dim >= 1 and steps >= 1")
    if kind == "right_angle" and dim < 2:
        raise DataError("right_angle needs dim >= 2")

    points: list[np.ndarray]
    if kind == "line":
        unit = np.zeros(dim)
        unit[0] = 1.0
        points = [t * unit for t in range(steps + 1)]
    elif kind == "return":
        unit = np.zeros(dim)
        unit[0] = 1.0
        points = [(t % 2) * unit for t in range(steps + 1)]
    elif kind == "right_angle":
        e0 = np.zeros(dim)
        e0[0] = 1.0
        e1 = np.zeros(dim)
        e1[1] = 1.0
        points = [np.zeros(dim), e0, e0 + e1]
    else:
        rng = _stream(seed, 0)
        points = [np.zeros(dim)]
        for _ in range(steps):
            points.append(points[-1] + rng.standard_normal(dim))

    snapshots = [
        ParamSnapshot(epoch=t, groups=[("all", vec.astype(np.float32))])
        for t, vec in enumerate(points)
    ]
    return ParamSnapshotSeries(model_id=f"synth-{kind}", snapshots=snapshots)
