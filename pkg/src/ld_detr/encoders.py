"""Unimodal encoders: per-position MLP projections into a shared latent space.

Each modality gets its own two-layer MLP. A momentum twin of each encoder is
kept as an exponential moving average of the online weights; the twin feeds
the feature queues and never receives gradients.
"""

from __future__ import annotations

import copy

import torch
import torch.nn.functional as F
from torch import nn


class UnimodalEncoder(nn.Module):
    """Two-layer MLP applied per clip/token: affine, ReLU, dropout, affine, LayerNorm."""

    def __init__(self, d_in: int, d_model: int, dropout: float = 0.5):
        super().__init__()
        self.d_in = d_in
        self.d_model = d_model
        self.fc1 = nn.Linear(d_in, d_model)
        self.fc2 = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)
        self.norm = nn.LayerNorm(d_model)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """x: (b, x_len, d_in); mask: (b, x_len) bool. Masked positions come out zero."""
        if x.shape[-1] != self.d_in:
            raise ValueError(f"expected input dim {self.d_in}, got {x.shape[-1]}")
        y = self.fc2(self.dropout(F.relu(self.fc1(x))))
        y = self.norm(y)
        if mask is not None:
            y = y * mask.unsqueeze(-1).to(y.dtype)
        return y


def global_pool(latent: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over mask-true positions only: (b, x_len, d), (b, x_len) -> (b, d)."""
    counts = mask.sum(dim=-1)
    if (counts == 0).any():
        raise ValueError("global_pool: a row has no valid positions")
    summed = (latent * mask.unsqueeze(-1).to(latent.dtype)).sum(dim=1)
    return summed / counts.unsqueeze(-1).to(latent.dtype)


class MomentumPair(nn.Module):
    """An online encoder plus a gradient-free EMA twin of it."""

    def __init__(self, main: nn.Module, m: float = 0.995):
        super().__init__()
        if not (0.0 <= m < 1.0):
            raise ValueError(f"momentum coefficient must be in [0, 1), got {m}")
        self.m = m
        self.main = main
        self.shadow = copy.deepcopy(main)
        self.momentum_init()

    @torch.no_grad()
    def momentum_init(self) -> None:
        """Copy online weights into the twin and freeze it."""
        for p_s, p_m in zip(self.shadow.parameters(), self.main.parameters()):
            p_s.copy_(p_m)
        for p_s in self.shadow.parameters():
            p_s.requires_grad_(False)

    @torch.no_grad()
    def momentum_update(self) -> None:
        """theta_shadow <- m * theta_shadow + (1 - m) * theta_main, elementwise."""
        for p_s, p_m in zip(self.shadow.parameters(), self.main.parameters()):
            p_s.mul_(self.m).add_(p_m, alpha=1.0 - self.m)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        return self.main(x, mask)

    @torch.no_grad()
    def shadow_encode(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """Run the twin deterministically (dropout off) without building a graph."""
        was_training = self.shadow.training
        self.shadow.eval()
        try:
            return self.shadow(x, mask)
        finally:
            if was_training:
                self.shadow.train()
