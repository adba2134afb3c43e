"""repsim command-line front end.

Subcommands: cka, cka-profile, knn, probe, rankcorr, f1, path, synth,
inspect. Reports are written as CSV (deterministic, diff-stable floats) and
JSON (embedding the run manifest); --plot additionally renders a matplotlib
figure next to the delimited output.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric/undefined
result.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .container import (
    read_container,
    read_labels,
    read_param_dir,
    write_container,
    write_labels,
    write_param_dir,
    ActivationSet,
    ParamSnapshotSeries,
    RankTable,
    VIT_LAYER_TEMPLATES,
)
from .consistency import CONSISTENCY_FILTERS, rank_consistency, top1_agreement_f1
from .dynamics import path_efficiency, per_epoch_deltas
from .errors import DataError, NumericError
from .probes import POOL_MODES, ProbeConfig, concat_layers, knn_depth_sweep, pool_features, train_probe
from .similarity import DEFAULT_BATCH_SIZE, DEFAULT_SAMPLE_COUNT, cka_matrix, layer_distance_profile
from .synth import (
    FixtureSpec,
    gen_independent_activations,
    gen_pair_activations,
    gen_planted_probe_fixture,
    gen_trajectory,
)
from .util import fmt_float, sha256_file


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _jsonable(v: float):
    return float(v) if np.isfinite(v) else None


def _build_manifest(args, subcommand: str, inputs: list, seeds: list[int], started: float) -> dict:
    skip = {"func", "json_only", "csv_only"}
    config = {}
    for key, value in sorted(vars(args).items()):
        if key in skip or callable(value):
            continue
        config[key] = str(value) if isinstance(value, Path) else value
    digests = {}
    for p in inputs:
        p = Path(p)
        if p.is_file():
            digests[str(p)] = sha256_file(p)
        elif p.is_dir():
            for f in sorted(p.glob("epoch_*.rs1")):
                digests[str(f)] = sha256_file(f)
    return {
        "subcommand": subcommand,
        "config": config,
        "inputs": digests,
        "engine_version": __version__,
        "seeds": seeds,
        "threads": args.threads if hasattr(args, "threads") else 1,
        "timestamp_utc": datetime.now(timezone.utc).isoformat(),
        "duration_s": round(time.perf_counter() - started, 6),
    }


def _out_paths(out: Path, json_only: bool, csv_only: bool) -> tuple[Path | None, Path | None]:
    csv_path = out if out.suffix == ".csv" else out.with_suffix(".csv")
    json_path = out.with_suffix(".json")
    if json_only and not csv_only:
        return None, json_path
    if csv_only and not json_only:
        return csv_path, None
    return csv_path, json_path


def _write_json(path: Path, report: dict, manifest: dict) -> None:
    with open(path, "w") as fh:
        json.dump({"report": report, "manifest": manifest}, fh, indent=2, allow_nan=False)
        fh.write("\n")


def _emit(args, report: dict, manifest: dict, csv_rows: list[list[str]] | None) -> None:
    if getattr(args, "out", None) is None:
        json.dump({"report": report, "manifest": manifest}, sys.stdout, indent=2, allow_nan=False)
        sys.stdout.write("\n")
        return
    csv_path, json_path = _out_paths(args.out, args.json_only, args.csv_only)
    if csv_path is not None and csv_rows is not None:
        with open(csv_path, "w", newline="") as fh:
            for row in csv_rows:
                fh.write(",".join(row) + "\n")
    if json_path is not None:
        _write_json(json_path, report, manifest)


def _read_activations(path) -> ActivationSet:
    obj = read_container(path)
    if not isinstance(obj, ActivationSet):
        raise DataError(f"{path}: expected an activations container, found {type(obj).__name__}")
    return obj


def _read_ranks(path) -> RankTable:
    obj = read_container(path)
    if not isinstance(obj, RankTable):
        raise DataError(f"{path}: expected a ranks container, found {type(obj).__name__}")
    return obj


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("REPSIM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise DataError(f"REPSIM_THREADS={env!r} is not an integer") from None
    return 1


# ---------------------------------------------------------------------------
# subcommands


def _cmd_cka(args) -> int:
    started = time.perf_counter()
    a = _read_activations(args.a)
    b = _read_activations(args.b)
    matrix = cka_matrix(
        a,
        b,
        pooling=args.pool,
        batch_size=args.batch_size,
        layer_filter=args.filter,
        max_samples=args.max_samples if args.max_samples > 0 else None,
        max_features=args.max_features,
        threads=_threads(args),
    )
    report = {
        "model_a": matrix.model_a,
        "model_b": matrix.model_b,
        "layer_names_a": matrix.layer_names_a,
        "layer_names_b": matrix.layer_names_b,
        "values": [[_jsonable(v) for v in row] for row in matrix.values],
        "batch_size": matrix.batch_size,
        "num_samples": matrix.num_samples,
        "pooling": matrix.pooling_mode,
        "filter": matrix.layer_filter,
        "undefined_pairs": matrix.undefined_pairs(),
    }
    rows = [["layer"] + matrix.layer_names_b]
    for name, row in zip(matrix.layer_names_a, matrix.values):
        rows.append([name] + [fmt_float(v) for v in row])
    manifest = _build_manifest(args, "cka", [args.a, args.b], [], started)
    _emit(args, report, manifest, rows)
    if args.plot:
        from . import plots

        plots.save_cka_heatmap(matrix, args.plot)
    return 0


def _cmd_cka_profile(args) -> int:
    started = time.perf_counter()
    a = _read_activations(args.a)
    b = _read_activations(args.b)
    matrix = cka_matrix(
        a,
        b,
        pooling=args.pool,
        batch_size=args.batch_size,
        layer_filter=args.filter,
        max_samples=args.max_samples if args.max_samples > 0 else None,
        max_features=args.max_features,
        threads=_threads(args),
    )
    profile = layer_distance_profile(matrix, args.bins)
    report = {
        "model_a": matrix.model_a,
        "model_b": matrix.model_b,
        "num_bins": args.bins,
        "bins": [
            {"lo": b_.lo, "hi": b_.hi, "mean_cka": _jsonable(b_.mean), "count": b_.count}
            for b_ in profile.bins
        ],
        "batch_size": matrix.batch_size,
        "num_samples": matrix.num_samples,
        "pooling": matrix.pooling_mode,
        "filter": matrix.layer_filter,
        "depth_normalization": "index/(layers-1)",
    }
    rows = [["lo", "hi", "mean_cka", "count"]]
    for b_ in profile.bins:
        rows.append([fmt_float(b_.lo), fmt_float(b_.hi), fmt_float(b_.mean), str(b_.count)])
    manifest = _build_manifest(args, "cka-profile", [args.a, args.b], [], started)
    _emit(args, report, manifest, rows)
    if args.plot:
        from . import plots

        plots.save_profile_plot(profile, args.plot)
    return 0


def _cmd_knn(args) -> int:
    started = time.perf_counter()
    train_set = _read_activations(args.train)
    eval_set = _read_activations(args.eval)
    train_labels = read_labels(args.train_labels)
    eval_labels = read_labels(args.eval_labels)
    modes = tuple(m.strip() for m in args.modes.split(",") if m.strip())
    for m in modes:
        if m not in POOL_MODES:
            raise DataError(f"unknown pooling mode {m!r}; expected one of {POOL_MODES}")
    sweep = knn_depth_sweep(train_set, train_labels, eval_set, eval_labels, modes=modes, k=args.k)
    report = {
        "k": sweep.k,
        "modes": sweep.modes,
        "blocks": [
            {"block": block, "layer": layer, "accuracy": dict(zip(sweep.modes, accs))}
            for block, layer, accs in sweep.rows()
        ],
    }
    rows = [["block", "layer"] + list(sweep.modes)]
    for block, layer, accs in sweep.rows():
        rows.append([str(block), layer] + [fmt_float(v) for v in accs])
    manifest = _build_manifest(
        args, "knn", [args.train, args.eval, args.train_labels, args.eval_labels], [], started
    )
    _emit(args, report, manifest, rows)
    if args.plot:
        from . import plots

        plots.save_knn_sweep_plot(sweep, args.plot)
    return 0


def _cmd_probe(args) -> int:
    started = time.perf_counter()
    train_set = _read_activations(args.train)
    eval_set = _read_activations(args.eval)
    train_labels = read_labels(args.train_labels)
    eval_labels = read_labels(args.eval_labels)
    try:
        with open(args.config) as fh:
            config = ProbeConfig.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{args.config}: cannot read probe config ({exc})") from None
    layers = [l.strip() for l in args.layers.split(",") if l.strip()]
    if not layers:
        raise DataError("--layers must name at least one layer")
    train_feats = concat_layers([pool_features(train_set, l, args.pool) for l in layers])
    eval_feats = concat_layers([pool_features(eval_set, l, args.pool) for l in layers])
    result = train_probe(train_feats, train_labels, eval_feats, eval_labels, config,
                         threads=_threads(args))
    report = {
        "layers": layers,
        "pooling": args.pool,
        "config": config.to_dict(),
        "best_mean": result.best_mean,
        "best_std": result.best_std,
        "best_count": result.best_count,
        "failed_runs": result.failed,
        "runs": [
            {
                "learning_rate": r.learning_rate,
                "weight_decay": r.weight_decay,
                "l1": r.l1,
                "warmup": r.warmup,
                "epochs": r.epochs,
                "seed": r.seed,
                "accuracy": _jsonable(r.accuracy) if r.accuracy is not None else None,
                "status": r.status,
            }
            for r in result.runs
        ],
    }
    rows = [["learning_rate", "weight_decay", "l1", "warmup", "epochs", "seed", "accuracy", "status"]]
    for r in result.runs:
        rows.append(
            [
                fmt_float(r.learning_rate),
                fmt_float(r.weight_decay),
                fmt_float(r.l1),
                str(r.warmup),
                str(r.epochs),
                str(r.seed),
                fmt_float(r.accuracy) if r.accuracy is not None else "",
                r.status,
            ]
        )
    manifest = _build_manifest(
        args,
        "probe",
        [args.train, args.eval, args.train_labels, args.eval_labels, args.config],
        list(config.seeds),
        started,
    )
    _emit(args, report, manifest, rows)
    if args.plot:
        from . import plots

        plots.save_probe_plot(result, args.plot)
    return 0


def _cmd_rankcorr(args) -> int:
    started = time.perf_counter()
    a = _read_ranks(args.a)
    b = _read_ranks(args.b)
    labels = read_labels(args.labels) if args.labels else None
    result = rank_consistency(a, b, labels=labels, top_k=args.top_k, selection=args.selection)
    report = {
        "model_a": a.model_id,
        "model_b": b.model_id,
        "top_k": result.top_k,
        "selection": result.selection,
        "mean_tau": result.mean,
        "std_tau": result.std,
        "samples": result.count,
    }
    rows = [
        ["top_k", "selection", "mean_tau", "std_tau", "samples"],
        [str(result.top_k), result.selection, fmt_float(result.mean), fmt_float(result.std), str(result.count)],
    ]
    inputs = [args.a, args.b] + ([args.labels] if args.labels else [])
    manifest = _build_manifest(args, "rankcorr", inputs, [], started)
    _emit(args, report, manifest, rows)
    return 0


def _cmd_f1(args) -> int:
    started = time.perf_counter()
    a = _read_ranks(args.a)
    b = _read_ranks(args.b)
    score = top1_agreement_f1(a, b)
    report = {"model_a": a.model_id, "model_b": b.model_id, "f1_top1": score, "averaging": "micro"}
    rows = [["model_a", "model_b", "f1_top1"], [a.model_id, b.model_id, fmt_float(score)]]
    manifest = _build_manifest(args, "f1", [args.a, args.b], [], started)
    _emit(args, report, manifest, rows)
    return 0


def _cmd_path(args) -> int:
    started = time.perf_counter()
    snapshots = Path(args.snapshots)
    if snapshots.is_dir():
        series = read_param_dir(snapshots)
    else:
        obj = read_container(snapshots)
        if not isinstance(obj, ParamSnapshotSeries):
            raise DataError(f"{snapshots}: expected a params container")
        series = obj
    report_obj = path_efficiency(series, group_filter=args.group)
    deltas = per_epoch_deltas(series, group_filter=args.group)

    def entry(e):
        return {
            "name": e.name,
            "displacement": e.displacement,
            "path_length": e.path_length,
            "efficiency": e.efficiency,
            "stationary": e.stationary,
        }

    report = {
        "model_id": report_obj.model_id,
        "epochs": report_obj.epochs,
        "groups": [entry(e) for e in report_obj.groups],
        "layer_types": [entry(e) for e in report_obj.layer_types],
        "total": entry(report_obj.total),
    }
    names = list(deltas.keys())
    rows = [["step"] + names]
    num_steps = len(report_obj.epochs) - 1
    for t in range(num_steps):
        rows.append([str(t + 1)] + [fmt_float(deltas[n][t]) for n in names])
    manifest = _build_manifest(args, "path", [snapshots], [], started)
    _emit(args, report, manifest, rows)
    if args.plot:
        from . import plots

        plots.save_path_plot(report_obj, deltas, args.plot)
    return 0


_TRAJ_PREFIX = "traj-"


def _cmd_synth(args) -> int:
    kind = args.kind
    out = Path(args.out)
    spec = FixtureSpec(kind=kind, seed=args.seed, n=args.n, p=args.p, num_classes=args.classes)
    if kind in ("orthogonal-pair", "independent-pair"):
        pair_kind = kind.split("-")[0]
        activations = gen_pair_activations(pair_kind, args.n, args.p, args.seed)
        write_container(activations, out)
        sidecar = Path(str(out) + ".spec.json")
    elif kind == "independent-layers":
        spec.knobs = {"layers": args.layers}
        activations = gen_independent_activations(args.n, args.p, args.layers, args.seed)
        write_container(activations, out)
        sidecar = Path(str(out) + ".spec.json")
    elif kind in ("probe-final", "probe-intermediate", "probe-xor"):
        placement = kind.split("-")[1]
        spec.knobs = {"noise": args.noise, "feature_dim": args.feature_dim, "scale": args.scale}
        activations, labels = gen_planted_probe_fixture(
            args.n,
            args.classes,
            placement,
            noise=args.noise,
            seed=args.seed,
            feature_dim=args.feature_dim,
            intermediate_scale=args.scale,
        )
        write_container(activations, out)
        write_labels(labels, Path(str(out) + ".labels.csv"))
        sidecar = Path(str(out) + ".spec.json")
    elif kind.startswith(_TRAJ_PREFIX):
        traj_kind = kind[len(_TRAJ_PREFIX):].replace("-", "_")
        spec.knobs = {"steps": args.steps, "dim": args.dim}
        series = gen_trajectory(traj_kind, steps=args.steps, dim=args.dim, seed=args.seed)
        write_param_dir(series, out)
        sidecar = out / "spec.json"
    else:
        raise DataError(f"unknown synth kind {kind!r}")
    with open(sidecar, "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2)
        fh.write("\n")
    return 0


_CONVENTION_NAMES = {"embed", "final_norm"}
_CONVENTION_BLOCK = ("ln1", "ln2", "attn.qkv", "attn.proj", "mlp.fc1", "mlp.fc2")


def _convention_ok(name: str) -> bool:
    if name in _CONVENTION_NAMES:
        return True
    head, sep, rest = name.partition(".")
    return bool(
        sep and head.startswith("block") and head[5:].isdigit() and rest in _CONVENTION_BLOCK
    )


def _cmd_inspect(args) -> int:
    obj = read_container(args.file)
    warnings_: list[str] = []
    info: dict = {"path": str(args.file), "schema": 1, "model_id": obj.model_id}
    if isinstance(obj, ActivationSet):
        info["kind"] = "activations"
        info["num_samples"] = len(obj.sample_ids)
        info["sample_ids"] = list(obj.sample_ids)
        info["tensors"] = [{"name": t.name, "shape": list(t.shape)} for t in obj.layers]
        for t in obj.layers:
            if not _convention_ok(t.name):
                warnings_.append(f"layer name {t.name!r} outside the ViT naming convention")
    elif isinstance(obj, RankTable):
        info["kind"] = "ranks"
        info["num_samples"] = len(obj.sample_ids)
        info["sample_ids"] = list(obj.sample_ids)
        info["num_classes"] = obj.num_classes
        info["tensors"] = [{"name": "ranks", "shape": list(obj.ranks.shape)}]
    else:
        info["kind"] = "params"
        info["epochs"] = obj.epochs
        info["tensors"] = [
            {"name": f"e{snap.epoch}/{name}", "shape": [int(vec.shape[0])]}
            for snap in obj.snapshots
            for name, vec in snap.groups
        ]
    info["warnings"] = warnings_
    if args.as_csv:
        print("name,shape")
        for t in info["tensors"]:
            print(f"{t['name']},{'x'.join(str(s) for s in t['shape'])}")
    elif args.as_json:
        json.dump(info, sys.stdout, indent=2)
        sys.stdout.write("\n")
    else:
        print(f"{info['path']}: kind={info['kind']} model_id={info['model_id']!r} schema=1")
        if "num_samples" in info:
            print(f"samples: {info['num_samples']}")
        if "epochs" in info:
            print(f"epochs: {info['epochs']}")
        for t in info["tensors"]:
            print(f"  {t['name']}  shape={t['shape']}")
        for w in warnings_:
            print(f"warning: {w}")
        print(f"ok ({len(warnings_)} warnings)")
    return 0


# ---------------------------------------------------------------------------
# parser wiring


def _add_output_args(p: _Parser, out_required: bool = True, plot: bool = True) -> None:
    p.add_argument("--out", type=Path, required=out_required, default=None,
                   help="output base path; writes <out>.csv and <out>.json unless restricted")
    p.add_argument("--json", dest="json_only", action="store_true", help="write only the JSON report")
    p.add_argument("--csv", dest="csv_only", action="store_true", help="write only the CSV report")
    if plot:
        p.add_argument("--plot", type=Path, default=None, help="also render a figure to this file")
    p.add_argument("--threads", type=int, default=None,
                   help="parallelism cap (default: REPSIM_THREADS or 1; 1 is bit-reproducible)")


def _add_cka_args(p: _Parser) -> None:
    p.add_argument("--a", type=Path, required=True, help="activations container A")
    p.add_argument("--b", type=Path, required=True, help="activations container B")
    p.add_argument("--pool", choices=POOL_MODES, default="flatten")
    p.add_argument("--batch-size", type=int, default=DEFAULT_BATCH_SIZE)
    p.add_argument("--max-samples", type=int, default=DEFAULT_SAMPLE_COUNT,
                   help="cap on aligned samples (0 = use all)")
    p.add_argument("--filter", default=None, help="layer name filter (substring or glob)")
    p.add_argument("--max-features", type=int, default=None,
                   help="pre-pool token groups so flatten stays within this width")


def build_parser() -> _Parser:
    parser = _Parser(prog="repsim", description=__doc__)
    parser.add_argument("--version", action="version", version=f"repsim {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("cka", parents=[], help="layer-pair minibatch CKA matrix")
    _add_cka_args(p)
    _add_output_args(p)
    p.set_defaults(func=_cmd_cka)

    p = sub.add_parser("cka-profile", help="CKA binned by normalized layer distance")
    _add_cka_args(p)
    p.add_argument("--bins", type=int, default=10)
    _add_output_args(p)
    p.set_defaults(func=_cmd_cka_profile)

    p = sub.add_parser("knn", help="k-NN accuracy per block per pooling mode")
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--train-labels", type=Path, required=True)
    p.add_argument("--eval", type=Path, required=True)
    p.add_argument("--eval-labels", type=Path, required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--modes", default="cls,gap_wo_cls", help="comma-separated pooling modes")
    _add_output_args(p)
    p.set_defaults(func=_cmd_knn)

    p = sub.add_parser("probe", help="linear/non-linear probe sweep on frozen features")
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--train-labels", type=Path, required=True)
    p.add_argument("--eval", type=Path, required=True)
    p.add_argument("--eval-labels", type=Path, required=True)
    p.add_argument("--layers", required=True, help="comma-separated layer names (concatenated)")
    p.add_argument("--pool", choices=POOL_MODES, default="cls")
    p.add_argument("--config", type=Path, required=True, help="probe sweep config JSON")
    _add_output_args(p)
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("rankcorr", help="top-k Kendall tau consistency between rank tables")
    p.add_argument("--a", type=Path, required=True)
    p.add_argument("--b", type=Path, required=True)
    p.add_argument("--labels", type=Path, default=None)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--selection", choices=CONSISTENCY_FILTERS, default="all")
    _add_output_args(p, out_required=False, plot=False)
    p.set_defaults(func=_cmd_rankcorr)

    p = sub.add_parser("f1", help="micro F1 of top-1 agreement between rank tables")
    p.add_argument("--a", type=Path, required=True)
    p.add_argument("--b", type=Path, required=True)
    _add_output_args(p, out_required=False, plot=False)
    p.set_defaults(func=_cmd_f1)

    p = sub.add_parser("path", help="fine-tuning path efficiency from parameter snapshots")
    p.add_argument("--snapshots", type=Path, required=True,
                   help="directory of epoch_*.rs1 files, or a single params container")
    p.add_argument("--group", default=None, help="parameter group filter (substring or glob)")
    _add_output_args(p, out_required=False)
    p.set_defaults(func=_cmd_path)

    p = sub.add_parser("synth", help="write a seeded synthetic fixture container")
    p.add_argument(
        "kind",
        choices=[
            "orthogonal-pair", "independent-pair", "independent-layers",
            "probe-final", "probe-intermediate", "probe-xor",
            "traj-line", "traj-return", "traj-right-angle", "traj-random-walk",
        ],
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True,
                   help="output container path (directory for traj-* kinds)")
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--p", type=int, default=32)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--scale", type=float, default=1.0, help="intermediate-layer scale knob")
    p.add_argument("--layers", type=int, default=3, help="layer count for independent-layers")
    p.add_argument("--steps", type=int, default=2)
    p.add_argument("--dim", type=int, default=8)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("inspect", help="validate a container and dump its metadata")
    p.add_argument("file", type=Path)
    p.add_argument("--json", dest="as_json", action="store_true",
                   help="machine-readable metadata dump")
    p.add_argument("--csv", dest="as_csv", action="store_true",
                   help="tensor listing as name,shape CSV rows")
    p.set_defaults(func=_cmd_inspect)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"repsim: numeric error: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"repsim: data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"repsim: i/o error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
