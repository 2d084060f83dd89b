"""Perceptron bridges between token-embedding space and image-patch space.

Two mirrored projectors carry features across the modality gap: one maps
each d_emb secret embedding to a d_patch patch vector before insertion, the
other maps recovered patch vectors back to d_emb for decoding. Default
architecture is a 2-layer MLP with GELU and hidden width
max(d_in, d_out); a linear (depth-1 or identity-activation) configuration
exists for numerical checks, where the map is exactly affine.
"""

from __future__ import annotations

import torch
import torch.nn as nn


class ProjectorMLP(nn.Module):
    """Rowwise MLP applied independently to each of the N feature rows."""

    def __init__(
        self,
        d_in: int,
        d_out: int,
        hidden: int | None = None,
        depth: int = 2,
        activation: str = "gelu",
    ):
        super().__init__()
        if depth not in (1, 2):
            raise ValueError(f"depth must be 1 or 2, got {depth}")
        self.d_in = d_in
        self.d_out = d_out
        if depth == 1:
            self.net = nn.Sequential(nn.Linear(d_in, d_out))
        else:
            hidden = hidden or max(d_in, d_out)
            act: nn.Module
            if activation == "gelu":
                act = nn.GELU()
            elif activation == "identity":
                act = nn.Identity()
            else:
                raise ValueError(f"unknown activation {activation!r}")
            self.net = nn.Sequential(nn.Linear(d_in, hidden), act, nn.Linear(hidden, d_out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"projector expects width {self.d_in}, got {x.shape[-1]}")
        return self.net(x)


def token_to_patch(d_emb: int, d_patch: int, **kwargs) -> ProjectorMLP:
    """Projector from embedding width to patch width."""
    return ProjectorMLP(d_emb, d_patch, **kwargs)


def patch_to_token(d_patch: int, d_emb: int, **kwargs) -> ProjectorMLP:
    """Projector from patch width back to embedding width."""
    return ProjectorMLP(d_patch, d_emb, **kwargs)


def t2p(proj: ProjectorMLP, e: torch.Tensor) -> torch.Tensor:
    """Map an (N, d_emb) embedding matrix to an (N, d_patch) patch grid."""
    return proj(e)


def p2t(proj: ProjectorMLP, p: torch.Tensor) -> torch.Tensor:
    """Map an (N, d_patch) patch grid to an (N, d_emb) embedding matrix."""
    return proj(p)
