"""repsim-extract command line: activations | ranks | params.

Every output is a REPSIM01 container the engine's `repsim inspect` accepts
with zero warnings. Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from .extract import ExtractionError, extract_activations, extract_ranks
from .plan import ExtractionPlan, PlanError, plan_group_fn
from .snapshots import snapshot_state_dict
from .writer import WriterError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _cmd_activations(args) -> int:
    plan = ExtractionPlan.from_file(args.plan)
    out = extract_activations(plan, args.out)
    print(f"wrote {out}")
    return 0


def _cmd_ranks(args) -> int:
    plan = ExtractionPlan.from_file(args.plan)
    out = extract_ranks(plan, args.out)
    print(f"wrote {out}")
    return 0


def _cmd_params(args) -> int:
    plan = ExtractionPlan.from_file(args.plan)
    if not plan.checkpoints:
        raise PlanError("params mode needs a 'checkpoints' list of {epoch, path} entries")
    group = plan_group_fn(plan)
    out_dir = Path(args.out)
    for entry in plan.checkpoints:
        state = torch.load(entry["path"], map_location="cpu", weights_only=True)
        path = snapshot_state_dict(state, out_dir, plan.model_id, int(entry["epoch"]), group)
        print(f"wrote {path}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="repsim-extract", description=__doc__)
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode, func in (("activations", _cmd_activations), ("ranks", _cmd_ranks),
                       ("params", _cmd_params)):
        p = sub.add_parser(mode)
        p.add_argument("--plan", type=Path, required=True, help="extraction plan JSON")
        p.add_argument("--out", type=Path, required=True,
                       help="output container path (directory for params)")
        p.set_defaults(func=func)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (PlanError, WriterError, ExtractionError) as exc:
        print(f"repsim-extract: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"repsim-extract: i/o error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
