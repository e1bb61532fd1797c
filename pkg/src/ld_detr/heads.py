"""Prediction heads: moment spans with confidences, and clip saliency scores.

The moment head maps decoded query features to (center, width) pairs in
(0, 1) plus a confidence logit. The saliency head re-pools the video with a
GRU run over the clips covered by the predicted moments, compares every clip
against that pooled state, and modulates the memory features with the result.
"""

from __future__ import annotations

import torch
from torch import nn

from .transformer import inverse_sigmoid


class Mlp(nn.Module):
    """Stack of affine layers with ReLU between (none on the output)."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, n_layers: int):
        super().__init__()
        dims = [d_in] + [d_hidden] * (n_layers - 1) + [d_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x


class MomentHead(nn.Module):
    """Spans via a sigmoid MLP; confidence as a sum of a direct logit and a
    clamped, re-logited sigmoid branch (kept finite by the clamp)."""

    def __init__(self, d_model: int, logit_clamp: float = 1e-4):
        super().__init__()
        self.span_mlp = Mlp(d_model, d_model, 2, n_layers=3)
        self.conf_a = Mlp(d_model, d_model, 1, n_layers=2)
        self.conf_b = Mlp(d_model, d_model, 1, n_layers=2)
        self.logit_clamp = logit_clamp

    def forward(self, decoded: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """decoded: (b, q, d) -> spans (b, q, 2) as (center, width), logits (b, q)."""
        spans = torch.sigmoid(self.span_mlp(decoded))
        gate = torch.sigmoid(self.conf_b(decoded)).clamp(self.logit_clamp, 1 - self.logit_clamp)
        conf = self.conf_a(decoded) + inverse_sigmoid(gate, eps=self.logit_clamp)
        return spans, conf.squeeze(-1)


def clips_in_spans(spans: torch.Tensor, video_mask: torch.Tensor) -> torch.Tensor:
    """Mark valid clips whose centers fall inside any predicted span.

    spans: (b, q, 2) normalized (center, width); video_mask: (b, t) bool.
    Clip centers are normalized by each sample's own valid length, so padding
    never shifts them. Samples whose union comes up empty fall back to all
    valid clips.
    """
    b, t = video_mask.shape
    t_valid = video_mask.sum(dim=-1, keepdim=True).clamp(min=1)  # (b, 1)
    centers = (torch.arange(t, device=video_mask.device, dtype=spans.dtype) + 0.5).unsqueeze(0)
    centers = centers / t_valid.to(spans.dtype)  # (b, t)

    start = (spans[..., 0] - spans[..., 1] / 2).unsqueeze(-1)  # (b, q, 1)
    end = (spans[..., 0] + spans[..., 1] / 2).unsqueeze(-1)
    inside = (centers.unsqueeze(1) >= start) & (centers.unsqueeze(1) <= end)  # (b, q, t)
    union = inside.any(dim=1) & video_mask

    empty = ~union.any(dim=-1)
    if empty.any():
        union[empty] = video_mask[empty]
    return union


class SaliencyHead(nn.Module):
    """GRU-pooled global feature scores every clip; memory features carry it out."""

    def __init__(self, d_model: int):
        super().__init__()
        self.d_model = d_model
        self.gru = nn.GRU(d_model, d_model, num_layers=1, batch_first=True)
        self.modulate = nn.Linear(d_model, d_model)

    def pooled_feature(self, memory: torch.Tensor, member: torch.Tensor) -> torch.Tensor:
        """Run the GRU over each sample's member clips in temporal order."""
        pooled = []
        for i in range(memory.shape[0]):
            clips = memory[i, member[i]].unsqueeze(0)  # (1, k, d), k >= 1
            _, h_n = self.gru(clips)
            pooled.append(h_n[-1, 0])
        return torch.stack(pooled)  # (b, d)

    def forward(
        self,
        memory: torch.Tensor,
        clip_latent: torch.Tensor,
        spans: torch.Tensor,
        video_mask: torch.Tensor,
    ) -> torch.Tensor:
        """memory, clip_latent: (b, t, d); spans: (b, q, 2) -> saliency (b, t).

        Padded clips come back as -inf so they can never win a ranking.
        """
        member = clips_in_spans(spans.detach(), video_mask)
        G_v = self.pooled_feature(memory, member)  # (b, d)
        S = torch.einsum("bd,btd->bt", G_v, clip_latent)  # per-clip similarity
        M = self.modulate(memory * S.unsqueeze(-1) + memory)
        scores = M.sum(dim=-1) / self.d_model
        return scores.masked_fill(~video_mask, float("-inf"))
