"""A minimal ViT used as the reference model for plans, docs, and tests.

Every module the naming convention cares about is explicit (qkv, proj, ln1,
ln2, fc1, fc2), the token axis is CLS-first, and the whole thing is small
enough to run in milliseconds. Build one via the plan:

    "model": {"kind": "module", "builder": "repsim_extract.toy:tiny_vit",
              "kwargs": {"depth": 2}, "checkpoint": "state.pt"}
"""

from __future__ import annotations

import torch
import torch.nn as nn


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, t, d = x.shape
        head_dim = d // self.heads
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / head_dim**0.5
        out = (attn.softmax(dim=-1) @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_dim)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class TinyViT(nn.Module):
    """CLS-first tokens; hook "embed_drop" for the embedded token stream."""

    def __init__(self, image_size=16, patch=8, dim=16, heads=2, mlp_dim=32, depth=2, classes=4):
        super().__init__()
        patches = (image_size // patch) ** 2
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=patch, stride=patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.randn(1, patches + 1, dim) * 0.02)
        self.embed_drop = nn.Identity()
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_dim) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, classes)
        self.depth = depth

    def forward(self, x):
        x = self.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = self.embed_drop(torch.cat([cls, x], dim=1) + self.pos_embed)
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return self.head(x[:, 0])


def tiny_vit(**kwargs) -> TinyViT:
    return TinyViT(**kwargs)


def layer_map(depth: int) -> dict[str, str]:
    """Plan layer mapping covering the full naming convention for TinyViT."""
    layers = {"embed": "embed_drop", "final_norm": "norm"}
    for i in range(depth):
        layers[f"block{i}.ln1"] = f"blocks.{i}.ln1"
        layers[f"block{i}.attn.qkv"] = f"blocks.{i}.attn.qkv"
        layers[f"block{i}.attn.proj"] = f"blocks.{i}.attn.proj"
        layers[f"block{i}.ln2"] = f"blocks.{i}.ln2"
        layers[f"block{i}.mlp.fc1"] = f"blocks.{i}.mlp.fc1"
        layers[f"block{i}.mlp.fc2"] = f"blocks.{i}.mlp.fc2"
    return layers
