"""Model-agnostic representation analysis over serialized activation dumps.

The engine consumes REPSIM01 containers (activations, classifier rank
tables, parameter snapshots) and measures: layer-pair similarity via
minibatch CKA with the unbiased HSIC estimator, class separability via k-NN
and linear/non-linear probes, prediction rank consistency, and fine-tuning
path efficiency.
"""

__version__ = "0.1.0"

from .container import (
    ActivationSet,
    AlignmentResult,
    LabelTable,
    ParamSnapshot,
    ParamSnapshotSeries,
    RankTable,
    TensorBlock,
    align_samples,
    read_container,
    read_labels,
    read_param_dir,
    write_container,
    write_labels,
    write_param_dir,
)
from .consistency import ConsistencyResult, kendall_tau_pair, rank_consistency, top1_agreement_f1
from .dynamics import GroupPath, PathEfficiencyReport, path_efficiency, path_stats, per_epoch_deltas
from .errors import (
    AlignmentError,
    BadMagicError,
    ContainerFormatError,
    DataError,
    NumericError,
    RepsimError,
    SchemaVersionError,
    TruncatedContainerError,
    UndefinedSimilarityError,
)
from .probes import (
    FeatureMatrix,
    KnnResult,
    KnnSweepResult,
    ProbeConfig,
    ProbeResult,
    ProbeRun,
    Standardizer,
    apply_standardizer,
    concat_layers,
    fit_standardizer,
    knn_classify,
    knn_depth_sweep,
    pool_features,
    train_probe,
)
from .similarity import (
    CkaMatrix,
    GramMatrix,
    LayerDistanceProfile,
    cka_exact,
    cka_matrix,
    cka_minibatch,
    gram,
    hsic1,
    layer_distance_profile,
    minibatches,
)
from .synth import (
    FixtureSpec,
    gen_independent_activations,
    gen_independent_pair,
    gen_orthogonal_pair,
    gen_pair_activations,
    gen_planted_probe_fixture,
    gen_trajectory,
    random_orthogonal,
)
