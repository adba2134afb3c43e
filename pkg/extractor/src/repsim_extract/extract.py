"""Activation and rank-table extraction via forward hooks."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .plan import ExtractionPlan, PlanError, load_model, resolve_module
from .writer import write_activations, write_ranks


class ExtractionError(RuntimeError):
    pass


def _load_image(path, pre) -> torch.Tensor:
    try:
        img = Image.open(path).convert("RGB")
    except (OSError, ValueError) as exc:
        raise ExtractionError(f"{path}: cannot load image ({exc})") from None
    w, h = img.size
    scale = pre.resize / min(w, h)
    img = img.resize((max(1, round(w * scale)), max(1, round(h * scale))), Image.BILINEAR)
    w, h = img.size
    left = (w - pre.crop) // 2
    top = (h - pre.crop) // 2
    img = img.crop((left, top, left + pre.crop, top + pre.crop))
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(pre.mean, np.float32)) / np.asarray(pre.std, np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1))


def _sample_batches(plan: ExtractionPlan):
    batch, ids = [], []
    for sample in plan.samples:
        if "path" not in sample:
            raise PlanError(f"sample {sample.get('id')!r} has no image path")
        batch.append(_load_image(sample["path"], plan.preprocess))
        ids.append(sample["id"])
        if len(batch) == plan.batch_size:
            yield torch.stack(batch), ids
            batch, ids = [], []
    if batch:
        yield torch.stack(batch), ids


def _hook_output(output) -> torch.Tensor:
    if isinstance(output, (tuple, list)):
        output = output[0]
    if not isinstance(output, torch.Tensor):
        raise ExtractionError(f"hooked module returned {type(output).__name__}, not a tensor")
    return output


def extract_activations(plan: ExtractionPlan, out_path) -> Path:
    """Forward the plan's samples in order and dump every mapped layer.

    Token-level outputs land as [N, T, d] with the CLS token first (the
    hooked models emit CLS-first token axes); per-sample vectors land as
    [N, d]. Values are cast to f32; tokens are never pooled here.
    """
    if not plan.samples:
        raise PlanError("plan has no samples")
    if not plan.layers:
        raise PlanError("plan maps no layers")
    model = load_model(plan)
    modules = {name: resolve_module(model, path) for name, path in plan.layers.items()}

    captured: dict[str, list[np.ndarray]] = {name: [] for name in modules}
    handles = []

    def make_hook(name):
        def hook(_module, _inputs, output):
            captured[name].append(_hook_output(output).detach().to("cpu", torch.float32).numpy())
        return hook

    for name, module in modules.items():
        handles.append(module.register_forward_hook(make_hook(name)))
    try:
        with torch.no_grad():
            for batch, _ids in _sample_batches(plan):
                model(batch.to(plan.device))
    finally:
        for handle in handles:
            handle.remove()

    layers = []
    for name in plan.layers:
        chunks = captured[name]
        if not chunks:
            raise ExtractionError(f"layer {name!r} captured no activations")
        trailing = {c.shape[1:] for c in chunks}
        if len(trailing) != 1:
            raise ExtractionError(f"layer {name!r} changed shape between batches: {sorted(trailing)}")
        layers.append((name, np.concatenate(chunks, axis=0)))
    write_activations(
        out_path,
        plan.model_id,
        plan.sample_ids,
        layers,
        extra={"preprocess": plan.preprocess.to_dict(), "device": plan.device},
    )
    return Path(out_path)


def rank_rows(logits: np.ndarray) -> np.ndarray:
    """Full class ordering by descending logit; ties go to the lower index."""
    return np.argsort(-logits, axis=1, kind="stable")


def extract_ranks(plan: ExtractionPlan, out_path) -> Path:
    """Dump each sample's full class ordering from the classifier head.

    Logits come from the model's forward output, or from the module named by
    plan.logits_layer when the head is not the final output.
    """
    if not plan.samples:
        raise PlanError("plan has no samples")
    model = load_model(plan)
    hook_box: list[torch.Tensor] = []
    handle = None
    if plan.logits_layer:
        module = resolve_module(model, plan.logits_layer)
        handle = module.register_forward_hook(
            lambda _m, _i, output: hook_box.append(_hook_output(output))
        )
    rows = []
    try:
        with torch.no_grad():
            for batch, _ids in _sample_batches(plan):
                out = model(batch.to(plan.device))
                logits = hook_box.pop() if plan.logits_layer else _hook_output(out)
                if logits.ndim != 2:
                    raise ExtractionError(f"logits must be [batch, classes], got {tuple(logits.shape)}")
                rows.append(logits.detach().to("cpu", torch.float64).numpy())
    finally:
        if handle is not None:
            handle.remove()
    ranks = rank_rows(np.concatenate(rows, axis=0))
    write_ranks(out_path, plan.model_id, plan.sample_ids, ranks)
    return Path(out_path)
