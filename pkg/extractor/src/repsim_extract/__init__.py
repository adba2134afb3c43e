"""Bridges torch models to REPSIM01 containers for the analysis engine."""

__version__ = "0.1.0"

from .extract import ExtractionError, extract_activations, extract_ranks, rank_rows
from .plan import ExtractionPlan, PlanError, Preprocess, load_model, plan_group_fn, resolve_module
from .snapshots import ParamSnapshotter, snapshot_state_dict
from .writer import WriterError, conforms_to_convention, write_activations, write_params_epoch, write_ranks
