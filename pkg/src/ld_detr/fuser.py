"""Multimodal fusion pipeline producing the memory features for decoding.

Stages, in order: a correlation-based extractor that injects text evidence
into every clip, a single-head cross-attention encoder queried by video,
a self-attention encoder stack, a stack of residual 1-D convolutions over
time, and a second (independent) self-attention encoder stack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .transformer import (
    FeedForward,
    MaskedBatchNorm1d,
    TransformerEncoderStack,
    sinusoidal_positions,
    zero_masked,
)

_NEG_INF = float("-inf")


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor, dim: int) -> torch.Tensor:
    """Softmax with mask-false entries excluded (exactly zero mass)."""
    if not mask.any(dim=-1 if dim == -1 else dim).all():
        raise ValueError("softmax mask has a slice with no valid entries")
    filled = scores.masked_fill(~mask, _NEG_INF)
    return F.softmax(filled, dim=dim)


CONV_PLACEMENTS = (
    "before_v2t",
    "before_t2v",
    "before_encoder1",
    "between_encoders",
    "after_encoder2",
)


@dataclass
class FuserConfig:
    d_model: int = 256
    n_heads: int = 8
    d_ffn: int = 1024
    dropout: float = 0.1
    enc_layers: int = 2  # per encoder stack; the two stacks share no weights
    conv_blocks: int = 5
    conv_kernel: int = 3
    conv_placement: str = "between_encoders"
    attn_scale: str = "sqrt"  # "sqrt": scores / sqrt(d); "linear": scores / d

    def validate(self) -> None:
        if self.attn_scale not in ("sqrt", "linear"):
            raise ValueError(f"attn_scale must be 'sqrt' or 'linear', got {self.attn_scale!r}")
        if self.conv_blocks < 0:
            raise ValueError("conv_blocks must be >= 0")
        if self.conv_kernel % 2 != 1:
            raise ValueError("conv_kernel must be odd to preserve length")
        if self.enc_layers < 1:
            raise ValueError("enc_layers must be >= 1")
        if self.conv_placement not in CONV_PLACEMENTS:
            raise ValueError(f"conv_placement must be one of {CONV_PLACEMENTS}")


class V2TExtractor(nn.Module):
    """Correlation-matrix fusion of text into video clips.

    The clip-token correlation is a sum of a per-clip score, a per-token
    score, and a bilinear term with per-channel weights. Row/column softmax
    views of it pull text into each clip and text-weighted video back.
    """

    def __init__(self, d_model: int):
        super().__init__()
        self.score_v = nn.Linear(d_model, 1)
        self.score_t = nn.Linear(d_model, 1)
        self.score_vt = nn.Linear(d_model, 1)  # weight acts as per-channel scale
        self.cat_proj = nn.Linear(4 * d_model, d_model)
        self.pool_score = nn.Linear(d_model, 1)
        self.out_proj = nn.Linear(2 * d_model, d_model)

    def correlation(self, V: torch.Tensor, T: torch.Tensor) -> torch.Tensor:
        A1 = self.score_v(V)  # (b, t, 1), broadcast over tokens
        A2 = self.score_t(T)  # (b, n, 1), broadcast over clips
        A3 = (V * self.score_vt.weight.squeeze(0)) @ T.transpose(1, 2) + self.score_vt.bias
        return A1 + A2.transpose(1, 2) + A3  # (b, t, n)

    def forward(
        self,
        V: torch.Tensor,
        T: torch.Tensor,
        video_mask: torch.Tensor,
        text_mask: torch.Tensor,
    ) -> torch.Tensor:
        if not text_mask.any(dim=-1).all():
            raise ValueError("every sample needs at least one valid text token")
        A = self.correlation(V, T)
        token_valid = text_mask.unsqueeze(1).expand_as(A)  # (b, t, n)
        clip_valid = video_mask.unsqueeze(2).expand_as(A)

        A_r = masked_softmax(A, token_valid, dim=-1)  # rows: distribution over tokens
        A_c = masked_softmax(A, clip_valid, dim=1)  # columns: distribution over clips

        T_v = A_r @ T  # (b, t, d)
        V_t = A_r @ A_c.transpose(1, 2) @ V  # (b, t, d)
        V_cat = self.cat_proj(torch.cat([V, T_v, V * T_v, V * V_t], dim=-1))

        B = masked_softmax(self.pool_score(T).squeeze(-1), text_mask, dim=-1)  # (b, n)
        T_p = torch.einsum("bn,bnd->bd", B, T)  # pooled text
        T_p = T_p.unsqueeze(1).expand(-1, V.shape[1], -1)

        out = self.out_proj(torch.cat([V_cat, T_p], dim=-1))
        return zero_masked(out, video_mask)


class T2VEncoder(nn.Module):
    """Single-head cross-attention: video queries attend over text keys/values.

    The attended values pass through a feed-forward block with a residual
    connection and layer norm; there is no residual from the video queries,
    so with a single valid token the output is that token's value path alone.
    """

    def __init__(self, d_model: int, d_ffn: int = 1024, dropout: float = 0.1, attn_scale: str = "sqrt"):
        super().__init__()
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.ffn = FeedForward(d_model, d_ffn, dropout)
        self.norm = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)
        self.scale = math.sqrt(d_model) if attn_scale == "sqrt" else float(d_model)

    def attention_weights(
        self, V: torch.Tensor, T: torch.Tensor, text_mask: torch.Tensor
    ) -> torch.Tensor:
        scores = (self.q_proj(V) @ self.k_proj(T).transpose(1, 2)) / self.scale
        return masked_softmax(scores, text_mask.unsqueeze(1).expand_as(scores), dim=-1)

    def forward(
        self,
        V: torch.Tensor,
        T: torch.Tensor,
        video_mask: torch.Tensor,
        text_mask: torch.Tensor,
    ) -> torch.Tensor:
        if not text_mask.any(dim=-1).all():
            raise ValueError("every sample needs at least one valid text token")
        attended = self.attention_weights(V, T, text_mask) @ self.v_proj(T)
        out = self.norm(attended + self.dropout(self.ffn(attended)))
        return zero_masked(out, video_mask)


class ConvBlock(nn.Module):
    """Residual block over the time axis: conv-BN-act, conv-BN, add, act."""

    def __init__(self, d_model: int, kernel: int = 3):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv1d(d_model, d_model, kernel, padding=pad)
        self.conv2 = nn.Conv1d(d_model, d_model, kernel, padding=pad)
        self.bn1 = MaskedBatchNorm1d(d_model)
        self.bn2 = MaskedBatchNorm1d(d_model)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        # x: (b, t, d); intermediate activations are re-zeroed at padded steps
        # before every convolution so the kernel never reads padding garbage
        h = zero_masked(x, mask).transpose(1, 2)  # (b, d, t)
        flat_mask = mask
        h = F.relu(self.bn1(self.conv1(h), flat_mask))
        h = zero_masked(h.transpose(1, 2), mask).transpose(1, 2)
        h = self.bn2(self.conv2(h), flat_mask)
        out = F.relu(x + h.transpose(1, 2))
        return zero_masked(out, mask)


class ConvolutionalFuser(nn.Module):
    """Full fusion pipeline: extractor, cross-attention, encoder stack,
    residual convolutions, second encoder stack. Returns memory (b, t, d)."""

    def __init__(self, config: FuserConfig | None = None):
        super().__init__()
        self.config = config or FuserConfig()
        self.config.validate()
        c = self.config
        self.v2t = V2TExtractor(c.d_model)
        self.t2v = T2VEncoder(c.d_model, c.d_ffn, c.dropout, c.attn_scale)
        self.encoder1 = TransformerEncoderStack(c.enc_layers, c.d_model, c.n_heads, c.d_ffn, c.dropout)
        self.blocks = nn.ModuleList(ConvBlock(c.d_model, c.conv_kernel) for _ in range(c.conv_blocks))
        self.encoder2 = TransformerEncoderStack(c.enc_layers, c.d_model, c.n_heads, c.d_ffn, c.dropout)

    def video_positions(self, t: int, ref: torch.Tensor) -> torch.Tensor:
        return sinusoidal_positions(t, self.config.d_model, device=ref.device, dtype=ref.dtype)

    def _conv(self, x: torch.Tensor, video_mask: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x, video_mask)
        return x

    def forward(
        self,
        V: torch.Tensor,
        T: torch.Tensor,
        video_mask: torch.Tensor,
        text_mask: torch.Tensor,
    ) -> torch.Tensor:
        V = zero_masked(V, video_mask)
        T = zero_masked(T, text_mask)
        pos = self.video_positions(V.shape[1], V).unsqueeze(0)
        place = self.config.conv_placement

        x = self._conv(V, video_mask) if place == "before_v2t" else V
        x = self.v2t(x, T, video_mask, text_mask)
        if place == "before_t2v":
            x = self._conv(x, video_mask)
        x = self.t2v(x, T, video_mask, text_mask)
        if place == "before_encoder1":
            x = self._conv(x, video_mask)
        x = self.encoder1(x, video_mask, pos)
        if place == "between_encoders":
            x = self._conv(x, video_mask)
        x = self.encoder2(x, video_mask, pos)
        if place == "after_encoder2":
            x = self._conv(x, video_mask)
        return x
