"""Minimal per-query point tracker, the memory foil for the dense head.

One token per queried pixel cross-attends to each frame's patch features and
a linear head reads a 3D position out of every refined state.  The refined
states form a (queries, frames, dim) buffer, so peak memory grows linearly
with the number of queries, which is exactly the scaling the dense model's
fixed-size output avoids.
"""

from __future__ import annotations

import math

import torch
from torch import nn


class QueryTokenBaseline(nn.Module):
    def __init__(self, height: int, width: int, patch_size: int,
                 dim: int = 96, num_heads: int = 4):
        super().__init__()
        if height % patch_size or width % patch_size:
            raise ValueError("image size must be a multiple of the patch size")
        if dim % num_heads:
            raise ValueError("dim must divide evenly over heads")
        self.height = height
        self.width = width
        self.dim = dim
        self.num_heads = num_heads
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=patch_size,
                                     stride=patch_size)
        num_patches = (height // patch_size) * (width // patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(num_patches, dim))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.coord_embed = nn.Linear(2, dim)
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.refine = nn.Sequential(nn.LayerNorm(dim),
                                    nn.Linear(dim, dim * 2), nn.GELU(),
                                    nn.Linear(dim * 2, dim))
        self.head = nn.Linear(dim, 3)

    def _cross_attend(self, tokens: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
        """tokens (Q, D) attend to one frame's feats (N, D)."""
        q_count = tokens.shape[0]
        hd = self.dim // self.num_heads
        q = self.q_proj(self.norm_q(tokens))
        kv = self.norm_kv(feats)
        k, v = self.k_proj(kv), self.v_proj(kv)
        q = q.reshape(q_count, self.num_heads, hd).transpose(0, 1)
        k = k.reshape(-1, self.num_heads, hd).transpose(0, 1)
        v = v.reshape(-1, self.num_heads, hd).transpose(0, 1)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(hd)  # (heads, Q, N)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(0, 1).reshape(q_count, self.dim)
        tokens = tokens + self.out_proj(out)
        return tokens + self.refine(tokens)

    def forward(self, images: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
        """images (F, 3, H, W); queries (Q, 2) pixel coordinates (i, j).

        Returns per-frame 3D positions (Q, F, 3).  The per-query state kept
        for every frame is the linearly growing buffer.
        """
        if images.shape[2] != self.height or images.shape[3] != self.width:
            raise ValueError(f"expected {self.height}x{self.width} frames")
        if queries.ndim != 2 or queries.shape[1] != 2:
            raise ValueError(f"queries must be (Q, 2), got {tuple(queries.shape)}")
        frames = images.shape[0]
        feats = self.patch_embed(images).flatten(2).transpose(1, 2)
        feats = feats + self.pos_embed  # (F, N, D)

        norm = queries.new_tensor([max(self.width - 1, 1),
                                   max(self.height - 1, 1)])
        tokens = self.coord_embed(2.0 * queries / norm - 1.0)  # (Q, D)
        if queries.shape[0] == 0:
            return images.new_zeros((0, frames, 3))
        states = [self._cross_attend(tokens, feats[t]) for t in range(frames)]
        return self.head(torch.stack(states, dim=1))  # (Q, F, D) -> (Q, F, 3)
