"""Per-epoch parameter snapshots for fine-tuning runs."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .writer import write_params_epoch


class ParamSnapshotter:
    """Training-loop hook that writes epoch_{i:04d}.rs1 params containers.

    group_fn maps a parameter name to its container group (return None to
    skip a parameter). Group membership and order are frozen on the first
    snapshot; a later change in any group's total length means the
    architecture changed mid-run and raises.
    """

    def __init__(self, model: torch.nn.Module, out_dir, model_id: str, group_fn) -> None:
        self.model = model
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.model_id = model_id
        self.group_fn = group_fn
        self._layout: list[tuple[str, int]] | None = None

    def _collect(self) -> list[tuple[str, np.ndarray]]:
        grouped: dict[str, list[np.ndarray]] = {}
        order: list[str] = []
        for name, param in self.model.named_parameters():
            group = self.group_fn(name)
            if group is None:
                continue
            if group not in grouped:
                grouped[group] = []
                order.append(group)
            grouped[group].append(
                param.detach().to("cpu", torch.float32).reshape(-1).numpy()
            )
        groups = [(g, np.concatenate(grouped[g])) for g in order]
        layout = [(g, vec.shape[0]) for g, vec in groups]
        if self._layout is None:
            self._layout = layout
        elif layout != self._layout:
            raise RuntimeError(
                "parameter groups drifted between snapshots; the architecture changed mid-run"
            )
        return groups

    def snapshot(self, epoch: int) -> Path:
        path = self.out_dir / f"epoch_{epoch:04d}.rs1"
        write_params_epoch(path, self.model_id, epoch, self._collect())
        return path


def snapshot_state_dict(state: dict, out_dir, model_id: str, epoch: int, group_fn) -> Path:
    """Snapshot a saved checkpoint (state_dict) instead of a live model."""
    grouped: dict[str, list[np.ndarray]] = {}
    order: list[str] = []
    for name, tensor in state.items():
        group = group_fn(name)
        if group is None:
            continue
        if group not in grouped:
            grouped[group] = []
            order.append(group)
        grouped[group].append(np.asarray(tensor, dtype=np.float32).reshape(-1))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"epoch_{epoch:04d}.rs1"
    write_params_epoch(path, model_id, epoch, [(g, np.concatenate(grouped[g])) for g in order])
    return path
