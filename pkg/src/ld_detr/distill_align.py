"""Cross-modal alignment with momentum feature queues.

Global video/text features are aligned with a distilled cross-entropy loss:
the target distribution mixes a one-hot positive with a softened similarity
distribution produced by the momentum encoders over a large FIFO queue of
past momentum features. A predictor-based similarity loss on positive pairs
is added on top.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

_NORM_EPS = 1e-12


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    norms = x.norm(dim=dim, keepdim=True)
    if (norms <= _NORM_EPS).any():
        raise ValueError("cannot L2-normalize a zero-norm vector")
    return x / norms


@dataclass
class AlignConfig:
    alpha: float = 0.4  # weight of the softened distribution in the target mix
    tau: float = 0.07  # softmax temperature for logits and targets
    lambda_align: float = 0.6
    lambda_sim: float = 0.6
    queue_len: int = 65536

    def validate(self) -> None:
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if not (self.tau > 0):
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.lambda_align < 0 or self.lambda_sim < 0:
            raise ValueError("loss weights must be non-negative")
        if self.queue_len < 1:
            raise ValueError("queue_len must be >= 1")


class FeatureQueue(nn.Module):
    """Fixed-capacity FIFO ring buffer of L2-normalized feature rows."""

    def __init__(self, capacity: int, dim: int):
        super().__init__()
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.register_buffer("storage", torch.zeros(capacity, dim))
        self.register_buffer("write_ptr", torch.zeros((), dtype=torch.long))
        self.register_buffer("fill", torch.zeros((), dtype=torch.long))

    @torch.no_grad()
    def push(self, feats: torch.Tensor) -> None:
        """Write k rows at the pointer with wraparound, evicting the oldest."""
        k = feats.shape[0]
        if k > self.capacity:
            raise ValueError(f"cannot push {k} rows into a queue of capacity {self.capacity}")
        if k == 0:
            return
        feats = l2_normalize(feats.detach().to(self.storage.dtype))
        idx = (int(self.write_ptr) + torch.arange(k, device=feats.device)) % self.capacity
        self.storage[idx] = feats
        self.write_ptr.fill_((int(self.write_ptr) + k) % self.capacity)
        self.fill.fill_(min(int(self.fill) + k, self.capacity))

    def contents(self) -> torch.Tensor:
        """Stored rows, oldest first: (fill, dim)."""
        fill = int(self.fill)
        if fill == 0:
            return self.storage.new_zeros((0, self.dim))
        start = (int(self.write_ptr) - fill) % self.capacity
        idx = (start + torch.arange(fill, device=self.storage.device)) % self.capacity
        return self.storage[idx]

    def __len__(self) -> int:
        return int(self.fill)


def build_bank(batch_momentum: torch.Tensor, queue: FeatureQueue) -> torch.Tensor:
    """Current batch momentum features prepended to queue contents.

    The positive for row i of the batch is then always column i. An empty
    queue is fine: before the first push, the bank is the batch alone.
    """
    parts = [l2_normalize(batch_momentum.detach())]
    if len(queue) > 0:
        parts.append(queue.contents())
    return torch.cat(parts, dim=0)


def similarity_matrix(G: torch.Tensor, bank: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarities: (b, d) x (L, d) -> (b, L) in [-1, 1]."""
    return l2_normalize(G) @ l2_normalize(bank).t()


def distill_targets(S_mm: torch.Tensor, alpha: float, tau: float) -> torch.Tensor:
    """Mix the softened momentum distribution with the one-hot positive.

    S_mm is the momentum-vs-bank similarity matrix with positives on the
    diagonal block (column i for row i). Each output row sums to 1.
    """
    b, L = S_mm.shape
    if L < b:
        raise ValueError(f"bank of {L} columns cannot contain {b} positives")
    soft = F.softmax(S_mm.detach() / tau, dim=-1)
    onehot = torch.zeros_like(soft)
    onehot[torch.arange(b), torch.arange(b)] = 1.0
    return alpha * soft + (1.0 - alpha) * onehot


def alignment_loss(S_logits: torch.Tensor, targets: torch.Tensor, tau: float) -> torch.Tensor:
    """Cross entropy of softmaxed similarities against distilled target rows."""
    log_probs = F.log_softmax(S_logits / tau, dim=-1)
    return -(targets * log_probs).sum(dim=-1).mean()


class SimPredictor(nn.Module):
    """One affine d -> d map per direction, applied to the momentum side."""

    def __init__(self, d_model: int):
        super().__init__()
        self.v2t = nn.Linear(d_model, d_model)
        self.t2v = nn.Linear(d_model, d_model)


def similar_loss(G: torch.Tensor, bank_pos: torch.Tensor, predictor: nn.Linear) -> torch.Tensor:
    """Negative mean cosine between online features and predicted positives."""
    pred = predictor(bank_pos.detach())
    cos = (l2_normalize(G) * l2_normalize(pred)).sum(dim=-1)
    return -cos.mean()


class DistillAlign(nn.Module):
    """Owns both queues and predictors; computes the full alignment objective."""

    def __init__(self, d_model: int, config: AlignConfig | None = None):
        super().__init__()
        self.config = config or AlignConfig()
        self.config.validate()
        self.queue_v = FeatureQueue(self.config.queue_len, d_model)
        self.queue_t = FeatureQueue(self.config.queue_len, d_model)
        self.predictor = SimPredictor(d_model)

    def forward(
        self,
        G_v: torch.Tensor,
        G_t: torch.Tensor,
        G_mv: torch.Tensor,
        G_mt: torch.Tensor,
    ) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        """Compute the loss from global features; does NOT push onto the queues."""
        cfg = self.config
        bank_t = build_bank(G_mt, self.queue_t)
        bank_v = build_bank(G_mv, self.queue_v)

        S_v2t = similarity_matrix(G_v, bank_t)
        S_t2v = similarity_matrix(G_t, bank_v)
        with torch.no_grad():
            S_v2tm = similarity_matrix(G_mv, bank_t)
            S_t2vm = similarity_matrix(G_mt, bank_v)
            T_v2t = distill_targets(S_v2tm, cfg.alpha, cfg.tau)
            T_t2v = distill_targets(S_t2vm, cfg.alpha, cfg.tau)

        L_v2t = alignment_loss(S_v2t, T_v2t, cfg.tau)
        L_t2v = alignment_loss(S_t2v, T_t2v, cfg.tau)
        L_v2t_sim = similar_loss(G_v, G_mt, self.predictor.v2t)
        L_t2v_sim = similar_loss(G_t, G_mv, self.predictor.t2v)

        total = (
            cfg.lambda_align * (L_v2t + L_t2v) / 2
            + cfg.lambda_sim * (L_v2t_sim + L_t2v_sim) / 2
        )
        parts = {
            "align_v2t": L_v2t,
            "align_t2v": L_t2v,
            "sim_v2t": L_v2t_sim,
            "sim_t2v": L_t2v_sim,
        }
        return total, parts

    @torch.no_grad()
    def push(self, G_mv: torch.Tensor, G_mt: torch.Tensor) -> None:
        """Enqueue the batch momentum features after the loss has been computed."""
        self.queue_v.push(G_mv)
        self.queue_t.push(G_mt)
