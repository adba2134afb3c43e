"""Extraction plans: which model, which layers, which samples.

A plan is a JSON file:

    {
      "model_id": "toy-vit",
      "model": {"kind": "pickle", "path": "model.pt"}
               | {"kind": "torchvision", "name": "vit_b_16",
                  "checkpoint": "optional-state-dict.pt"},
      "layers": {"embed": "embed_drop", "block0.ln1": "blocks.0.ln1", ...},
      "samples": [{"id": "img-000", "path": "images/cat.png"}, ...],
      "batch_size": 8,
      "device": "cpu",
      "preprocess": {"resize": 224, "crop": 224,
                     "mean": [0.485, 0.456, 0.406], "std": [0.229, 0.224, 0.225]},
      "logits_layer": null,
      "checkpoints": [{"epoch": 0, "path": "ckpt0.pt"}, ...]   // params mode
    }

Layer keys must follow the container naming convention so the engine's
inspect validation stays warning-free; module values are dotted paths into
the torch model. Sample ids are caller-chosen and must be unique, which
makes reruns deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .writer import conforms_to_convention

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class PlanError(ValueError):
    pass


@dataclass
class Preprocess:
    resize: int = 224
    crop: int = 224
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD

    def to_dict(self) -> dict:
        return {"resize": self.resize, "crop": self.crop,
                "mean": list(self.mean), "std": list(self.std)}


@dataclass
class ExtractionPlan:
    model_id: str
    model: dict
    layers: dict[str, str] = field(default_factory=dict)
    samples: list[dict] = field(default_factory=list)
    batch_size: int = 8
    device: str = "cpu"
    preprocess: Preprocess = field(default_factory=Preprocess)
    logits_layer: str | None = None
    checkpoints: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.model_id:
            raise PlanError("plan needs a model_id")
        if self.batch_size < 1:
            raise PlanError("batch_size must be positive")
        for name in self.layers:
            if not conforms_to_convention(name):
                raise PlanError(
                    f"layer key {name!r} does not follow the container naming convention"
                )
        ids = [s.get("id") for s in self.samples]
        if any(not i for i in ids):
            raise PlanError("every sample needs a non-empty id")
        if len(set(ids)) != len(ids):
            raise PlanError("sample ids must be unique")

    @property
    def sample_ids(self) -> list[str]:
        return [s["id"] for s in self.samples]

    @classmethod
    def from_file(cls, path) -> "ExtractionPlan":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise PlanError(f"{path}: cannot read plan ({exc})") from None
        pre = raw.pop("preprocess", None)
        plan = cls(
            model_id=raw.get("model_id", ""),
            model=raw.get("model", {}),
            layers=raw.get("layers", {}),
            samples=raw.get("samples", []),
            batch_size=raw.get("batch_size", 8),
            device=raw.get("device", "cpu"),
            logits_layer=raw.get("logits_layer"),
            checkpoints=raw.get("checkpoints", []),
        )
        if pre:
            plan.preprocess = Preprocess(
                resize=pre.get("resize", 224),
                crop=pre.get("crop", 224),
                mean=tuple(pre.get("mean", IMAGENET_MEAN)),
                std=tuple(pre.get("std", IMAGENET_STD)),
            )
        return plan


def load_model(plan: ExtractionPlan) -> torch.nn.Module:
    """Instantiate the plan's model on the plan's device, in eval mode.

    kinds: "pickle" (a torch.save'd module; its defining module must be
    importable), "module" (import "pkg.mod:callable", call with kwargs, then
    optionally load a state-dict checkpoint), "torchvision" (builder name in
    torchvision.models plus an optional checkpoint).
    """
    spec = plan.model
    kind = spec.get("kind")
    if kind == "pickle":
        try:
            model = torch.load(spec["path"], map_location=plan.device, weights_only=False)
        except ModuleNotFoundError as exc:
            raise PlanError(
                f"{spec['path']}: unpickling needs the model's defining module ({exc}); "
                "either make it importable or switch the plan to kind='module' with a builder"
            ) from None
        if not isinstance(model, torch.nn.Module):
            raise PlanError(f"{spec['path']} does not contain a torch module")
    elif kind == "module":
        target = spec.get("builder", "")
        mod_name, sep, attr = target.partition(":")
        if not sep:
            raise PlanError(f"builder {target!r} must look like 'package.module:callable'")
        import importlib

        try:
            builder = getattr(importlib.import_module(mod_name), attr)
        except (ImportError, AttributeError) as exc:
            raise PlanError(f"cannot import builder {target!r}: {exc}") from None
        model = builder(**spec.get("kwargs", {}))
        if not isinstance(model, torch.nn.Module):
            raise PlanError(f"builder {target!r} did not return a torch module")
        checkpoint = spec.get("checkpoint")
        if checkpoint:
            state = torch.load(checkpoint, map_location=plan.device, weights_only=True)
            model.load_state_dict(state)
    elif kind == "torchvision":
        import torchvision.models as tvm

        builder = getattr(tvm, spec.get("name", ""), None)
        if builder is None:
            raise PlanError(f"unknown torchvision model {spec.get('name')!r}")
        model = builder(weights=None)
        checkpoint = spec.get("checkpoint")
        if checkpoint:
            state = torch.load(checkpoint, map_location=plan.device, weights_only=True)
            model.load_state_dict(state)
    else:
        raise PlanError(
            f"unknown model kind {kind!r}; expected 'pickle', 'module', or 'torchvision'"
        )
    model.to(plan.device)
    model.eval()
    return model


def resolve_module(model: torch.nn.Module, dotted: str) -> torch.nn.Module:
    node = model
    for part in dotted.split("."):
        if part.isdigit():
            try:
                node = node[int(part)]
                continue
            except (TypeError, IndexError, KeyError):
                raise PlanError(f"cannot index {part!r} while resolving {dotted!r}") from None
        if not hasattr(node, part):
            raise PlanError(f"model has no module {dotted!r} (failed at {part!r})")
        node = getattr(node, part)
    if not isinstance(node, torch.nn.Module):
        raise PlanError(f"{dotted!r} is not a module")
    return node


def plan_group_fn(plan: ExtractionPlan):
    """Parameter-name grouper derived from the plan's layer mapping.

    A parameter belongs to the convention group whose module path is the
    longest prefix of its name; parameters outside every mapped module fall
    into the "other" group.
    """
    by_path = sorted(plan.layers.items(), key=lambda kv: -len(kv[1]))

    def group(param_name: str) -> str:
        for layer_name, module_path in by_path:
            if param_name == module_path or param_name.startswith(module_path + "."):
                return layer_name
        return "other"

    return group
