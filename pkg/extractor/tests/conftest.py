import json
import subprocess
import sys

import numpy as np
import pytest
import torch
from PIL import Image

from repsim_extract.toy import TinyViT, layer_map

vit_layer_map = layer_map


def repsim(*argv):
    """Invoke the engine CLI; returns (exit code, stdout, stderr)."""
    proc = subprocess.run(
        [sys.executable, "-m", "repsim.cli", *map(str, argv)],
        capture_output=True,
        text=True,
    )
    return proc.returncode, proc.stdout, proc.stderr


def inspect_json(path):
    code, out, err = repsim("inspect", path, "--json")
    assert code == 0, err
    return json.loads(out)


@pytest.fixture()
def toy_model(tmp_path):
    torch.manual_seed(1234)
    model = TinyViT()
    model.eval()
    ckpt = tmp_path / "toy_vit.pt"
    torch.save(model, ckpt)
    return model, ckpt


@pytest.fixture()
def image_dir(tmp_path):
    rng = np.random.default_rng(99)
    folder = tmp_path / "images"
    folder.mkdir()
    paths = []
    for i in range(6):
        arr = rng.integers(0, 256, size=(18, 20, 3), dtype=np.uint8)
        p = folder / f"img_{i:03d}.png"
        Image.fromarray(arr).save(p)
        paths.append(p)
    return paths


@pytest.fixture()
def toy_plan(tmp_path, toy_model, image_dir):
    _, ckpt = toy_model
    plan = {
        "model_id": "tiny-vit",
        "model": {"kind": "pickle", "path": str(ckpt)},
        "layers": vit_layer_map(2),
        "samples": [{"id": p.stem, "path": str(p)} for p in image_dir],
        "batch_size": 4,
        "device": "cpu",
        "preprocess": {"resize": 16, "crop": 16, "mean": [0.5, 0.5, 0.5], "std": [0.5, 0.5, 0.5]},
    }
    path = tmp_path / "plan.json"
    path.write_text(json.dumps(plan, indent=2))
    return path
