"""Shared sequence-model building blocks.

Pre-norm transformer encoder/decoder stacks with explicit positional-encoding
injection, a batch norm that computes statistics over mask-valid time steps
only, and small helpers used across the network. Masked positions are zeroed
on the way out of every block so padding can never leak into valid positions.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def zero_masked(x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Zero out positions where mask is False. x: (b, l, d), mask: (b, l)."""
    if mask is None:
        return x
    return x * mask.unsqueeze(-1).to(x.dtype)


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-4) -> torch.Tensor:
    """Logit function with clamping so it stays finite on [0, 1]."""
    x = x.clamp(min=eps, max=1.0 - eps)
    return torch.log(x / (1.0 - x))


def sinusoidal_positions(length: int, d_model: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """Classic interleaved sine/cosine position table: (length, d_model)."""
    position = torch.arange(length, device=device, dtype=dtype).unsqueeze(1)
    half = torch.arange(0, d_model, 2, device=device, dtype=dtype)
    div = torch.exp(-half * (math.log(10000.0) / d_model))
    pe = torch.zeros(length, d_model, device=device, dtype=dtype)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div[: d_model // 2])
    return pe


class MaskedBatchNorm1d(nn.Module):
    """BatchNorm over channels where training statistics ignore padded steps.

    Input is (b, c, t) with an optional (b, t) validity mask. In training
    mode, mean/variance are computed over mask-true positions only and the
    running estimates are updated the same way torch's BatchNorm1d does
    (biased variance for normalization, unbiased for the running estimate).
    Eval mode always uses the running estimates.
    """

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))
        self.register_buffer("num_batches_tracked", torch.zeros((), dtype=torch.long))

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if x.dim() != 3 or x.shape[1] != self.num_features:
            raise ValueError(f"expected (b, {self.num_features}, t), got {tuple(x.shape)}")
        if self.training:
            if mask is None:
                mask = torch.ones(x.shape[0], x.shape[2], dtype=torch.bool, device=x.device)
            m = mask.unsqueeze(1).to(x.dtype)  # (b, 1, t)
            count = m.sum()
            if count < 1:
                raise ValueError("masked batch norm needs at least one valid position")
            mean = (x * m).sum(dim=(0, 2)) / count
            centered = (x - mean.view(1, -1, 1)) * m
            var = (centered**2).sum(dim=(0, 2)) / count
            with torch.no_grad():
                unbiased = var * (count / torch.clamp(count - 1, min=1.0))
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean.detach())
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * unbiased.detach())
                self.num_batches_tracked += 1
        else:
            mean = self.running_mean
            var = self.running_var
        x_hat = (x - mean.view(1, -1, 1)) / torch.sqrt(var.view(1, -1, 1) + self.eps)
        return x_hat * self.weight.view(1, -1, 1) + self.bias.view(1, -1, 1)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ffn: int, dropout: float = 0.1):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ffn)
        self.fc2 = nn.Linear(d_ffn, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.dropout(F.relu(self.fc1(x))))


class TransformerEncoderLayer(nn.Module):
    """Pre-norm self-attention layer; positional encodings enter q and k only."""

    def __init__(self, d_model: int, n_heads: int = 8, d_ffn: int = 1024, dropout: float = 0.1):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d_model, n_heads, dropout=dropout, batch_first=True)
        self.ffn = FeedForward(d_model, d_ffn, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout1 = nn.Dropout(dropout)
        self.dropout2 = nn.Dropout(dropout)

    def forward(
        self,
        x: torch.Tensor,
        mask: torch.Tensor | None = None,
        pos: torch.Tensor | None = None,
    ) -> torch.Tensor:
        key_padding = None if mask is None else ~mask
        h = self.norm1(x)
        qk = h if pos is None else h + pos
        attn, _ = self.self_attn(qk, qk, h, key_padding_mask=key_padding, need_weights=False)
        x = x + self.dropout1(attn)
        h = self.norm2(x)
        x = x + self.dropout2(self.ffn(h))
        return x


class TransformerEncoderStack(nn.Module):
    """A stack of encoder layers with a closing LayerNorm; masked rows come out zero."""

    def __init__(self, n_layers: int, d_model: int, n_heads: int = 8, d_ffn: int = 1024, dropout: float = 0.1):
        super().__init__()
        self.layers = nn.ModuleList(
            TransformerEncoderLayer(d_model, n_heads, d_ffn, dropout) for _ in range(n_layers)
        )
        self.norm = nn.LayerNorm(d_model)

    def forward(
        self,
        x: torch.Tensor,
        mask: torch.Tensor | None = None,
        pos: torch.Tensor | None = None,
    ) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x, mask, pos)
        return zero_masked(self.norm(x), mask)


class TransformerDecoderLayer(nn.Module):
    """Pre-norm decoder layer: query self-attention, cross-attention over memory, FFN."""

    def __init__(self, d_model: int, n_heads: int = 8, d_ffn: int = 1024, dropout: float = 0.1):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d_model, n_heads, dropout=dropout, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(d_model, n_heads, dropout=dropout, batch_first=True)
        self.ffn = FeedForward(d_model, d_ffn, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)
        self.dropout1 = nn.Dropout(dropout)
        self.dropout2 = nn.Dropout(dropout)
        self.dropout3 = nn.Dropout(dropout)

    def forward(
        self,
        tgt: torch.Tensor,
        memory: torch.Tensor,
        memory_mask: torch.Tensor | None = None,
        memory_pos: torch.Tensor | None = None,
        query_pos: torch.Tensor | None = None,
    ) -> torch.Tensor:
        key_padding = None if memory_mask is None else ~memory_mask

        h = self.norm1(tgt)
        qk = h if query_pos is None else h + query_pos
        attn, _ = self.self_attn(qk, qk, h, need_weights=False)
        tgt = tgt + self.dropout1(attn)

        h = self.norm2(tgt)
        q = h if query_pos is None else h + query_pos
        k = memory if memory_pos is None else memory + memory_pos
        attn, _ = self.cross_attn(q, k, memory, key_padding_mask=key_padding, need_weights=False)
        tgt = tgt + self.dropout2(attn)

        h = self.norm3(tgt)
        tgt = tgt + self.dropout3(self.ffn(h))
        return tgt


class TransformerDecoderStack(nn.Module):
    def __init__(self, n_layers: int, d_model: int, n_heads: int = 8, d_ffn: int = 1024, dropout: float = 0.1):
        super().__init__()
        self.layers = nn.ModuleList(
            TransformerDecoderLayer(d_model, n_heads, d_ffn, dropout) for _ in range(n_layers)
        )
        self.norm = nn.LayerNorm(d_model)

    def forward(
        self,
        tgt: torch.Tensor,
        memory: torch.Tensor,
        memory_mask: torch.Tensor | None = None,
        memory_pos: torch.Tensor | None = None,
        query_pos: torch.Tensor | None = None,
    ) -> torch.Tensor:
        for layer in self.layers:
            tgt = layer(tgt, memory, memory_mask, memory_pos, query_pos)
        return self.norm(tgt)
