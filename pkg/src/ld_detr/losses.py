"""Training objective: matched span losses plus saliency ranking losses.

Predicted moments are assigned to ground-truth moments with an optimal
bipartite matching; matched pairs contribute L1 and generalized-IoU terms
while every query is classified foreground/background. Saliency predictions
are trained with a hinge on high/low clip pairs and a rank-aware contrastive
term over integer saliency levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment


@dataclass
class LossConfig:
    lambda_l1: float = 10.0
    lambda_giou: float = 1.0
    lambda_ce: float = 4.0
    bg_weight: float = 0.1  # background class weight inside the CE term
    lambda_marg: float = 1.0
    lambda_cont: float = 1.0
    margin: float = 0.2
    tau_rank: float = 0.5  # temperature of the rank-aware contrastive term
    margin_pairs: int = 2

    def validate(self) -> None:
        vals = [self.lambda_l1, self.lambda_giou, self.lambda_ce, self.lambda_marg, self.lambda_cont]
        if any(v < 0 or not (v == v) for v in vals):
            raise ValueError("loss weights must be non-negative and finite")
        if self.tau_rank <= 0:
            raise ValueError("tau_rank must be positive")
        if self.bg_weight < 0:
            raise ValueError("bg_weight must be non-negative")


def cw_to_se(spans: torch.Tensor) -> torch.Tensor:
    """(..., 2) as (center, width) -> (start, end)."""
    c, w = spans[..., 0], spans[..., 1]
    return torch.stack([c - w / 2, c + w / 2], dim=-1)


def span_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Generalized IoU of (start, end) intervals, elementwise with broadcasting.

    IoU minus the fraction of the enclosing hull not covered by the union;
    range (-1, 1]. Both intervals zero-length is rejected.
    """
    a_start, a_end = a[..., 0], a[..., 1]
    b_start, b_end = b[..., 0], b[..., 1]
    len_a = a_end - a_start
    len_b = b_end - b_start
    inter = (torch.minimum(a_end, b_end) - torch.maximum(a_start, b_start)).clamp(min=0)
    union = len_a + len_b - inter
    if torch.any(union <= 0):
        raise ValueError("giou undefined: both intervals have zero length")
    iou = inter / union
    hull = torch.maximum(a_end, b_end) - torch.minimum(a_start, b_start)
    return iou - (hull - union) / hull


def giou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """All-pairs gIoU: (q, 2) x (k, 2) -> (q, k), spans as (start, end)."""
    return span_giou(a.unsqueeze(1), b.unsqueeze(0))


def match_cost_matrix(
    pred_spans: torch.Tensor,
    pred_logits: torch.Tensor,
    gt_spans: torch.Tensor,
    config: LossConfig,
) -> torch.Tensor:
    """Assignment cost (q, k): weighted L1 + (1 - gIoU) - foreground probability."""
    l1 = torch.cdist(pred_spans, gt_spans, p=1)  # (q, k)
    giou = giou_matrix(cw_to_se(pred_spans), cw_to_se(gt_spans))
    fg_prob = torch.sigmoid(pred_logits).unsqueeze(-1)
    return config.lambda_l1 * l1 + config.lambda_giou * (1 - giou) - fg_prob


def hungarian_match(
    pred_spans: torch.Tensor,
    pred_logits: torch.Tensor,
    gt_spans: torch.Tensor,
    config: LossConfig,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Optimal injective assignment of predictions to ground-truth moments.

    Returns (pred_idx, gt_idx) index tensors of length min(q, k).
    """
    if gt_spans.shape[0] == 0:
        empty = torch.zeros(0, dtype=torch.long)
        return empty, empty
    with torch.no_grad():
        cost = match_cost_matrix(pred_spans, pred_logits, gt_spans, config)
        rows, cols = linear_sum_assignment(cost.cpu().double().numpy())
    return torch.as_tensor(rows, dtype=torch.long), torch.as_tensor(cols, dtype=torch.long)


def match_batch(
    pred_spans: torch.Tensor,
    pred_logits: torch.Tensor,
    gt_spans_list: list[torch.Tensor],
    config: LossConfig,
) -> list[tuple[torch.Tensor, torch.Tensor]]:
    return [
        hungarian_match(pred_spans[i], pred_logits[i], gt_spans_list[i], config)
        for i in range(len(gt_spans_list))
    ]


def mr_loss(
    pred_spans: torch.Tensor,
    pred_logits: torch.Tensor,
    gt_spans_list: list[torch.Tensor],
    matches: list[tuple[torch.Tensor, torch.Tensor]],
    config: LossConfig,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Matched L1 + gIoU terms plus foreground/background cross entropy.

    pred_spans: (b, q, 2) as (center, width); pred_logits: (b, q);
    gt_spans_list: per-sample (k_i, 2) tensors. Samples without ground truth
    skip the span terms but still contribute background CE.
    """
    b, q, _ = pred_spans.shape
    device = pred_spans.device
    zero = pred_spans.sum() * 0.0

    matched_pred, matched_gt = [], []
    labels = torch.zeros(b, q, dtype=torch.long, device=device)
    for i, (p_idx, g_idx) in enumerate(matches):
        if p_idx.numel() == 0:
            continue
        matched_pred.append(pred_spans[i, p_idx])
        matched_gt.append(gt_spans_list[i][g_idx].to(pred_spans.dtype))
        labels[i, p_idx] = 1

    if matched_pred:
        mp = torch.cat(matched_pred)
        mg = torch.cat(matched_gt)
        l1 = (mp - mg).abs().sum(dim=-1).mean()
        giou = span_giou(cw_to_se(mp), cw_to_se(mg))
        giou_term = (1 - giou).mean()
    else:
        l1 = zero
        giou_term = zero

    # 2-class logits (background, foreground) from the single confidence logit
    class_logits = torch.stack([torch.zeros_like(pred_logits), pred_logits], dim=-1)
    weight = torch.tensor([config.bg_weight, 1.0], dtype=pred_spans.dtype, device=device)
    ce = F.cross_entropy(class_logits.reshape(-1, 2), labels.reshape(-1), weight=weight)

    total = config.lambda_l1 * l1 + config.lambda_giou * giou_term + config.lambda_ce * ce
    return total, {"l1": l1, "giou": giou_term, "ce": ce}


def margin_pairs_for_sample(gt: torch.Tensor, max_pairs: int = 2) -> list[tuple[int, int]]:
    """Pick (high, low) clip index pairs with a saliency gap of >= 1 level.

    Pair 1 is the extremes, pair 2 the second-highest vs second-lowest;
    degenerate or overlapping picks are dropped.
    """
    order = torch.argsort(gt, descending=True, stable=True)
    n = order.numel()
    pairs = []
    for rank in range(max_pairs):
        hi, lo = rank, n - 1 - rank
        if hi >= lo:
            break
        hi_idx, lo_idx = int(order[hi]), int(order[lo])
        if float(gt[hi_idx] - gt[lo_idx]) >= 1.0:
            pairs.append((hi_idx, lo_idx))
    return pairs


def hd_loss(
    pred_saliency: torch.Tensor,
    gt_saliency: torch.Tensor,
    mask: torch.Tensor,
    config: LossConfig,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Hinge margin on high/low pairs plus a rank-aware contrastive term.

    pred_saliency may carry -inf at padded clips; only valid clips are read.
    """
    b = pred_saliency.shape[0]
    zero = pred_saliency[mask].sum() * 0.0

    hinge_terms = []
    rank_per_sample = []
    for i in range(b):
        valid = mask[i]
        scores = pred_saliency[i][valid]
        gt = gt_saliency[i][valid]

        for hi, lo in margin_pairs_for_sample(gt, config.margin_pairs):
            hinge_terms.append(F.relu(config.margin + scores[lo] - scores[hi]))

        # one InfoNCE round per integer saliency level present with support below
        levels = torch.unique(torch.floor(gt))
        log_probs = F.log_softmax(scores / config.tau_rank, dim=0)
        sample_terms = []
        for r in levels.tolist():
            if r < 1:
                continue
            pos = gt >= r
            if not pos.any() or not (gt < r).any():
                continue
            sample_terms.append(-log_probs[pos].mean())
        if sample_terms:
            rank_per_sample.append(torch.stack(sample_terms).mean())

    hinge = torch.stack(hinge_terms).mean() if hinge_terms else zero
    rank = torch.stack(rank_per_sample).mean() if rank_per_sample else zero
    total = config.lambda_marg * hinge + config.lambda_cont * rank
    return total, {"margin": hinge, "rank_contrastive": rank}


def total_loss(mr: torch.Tensor, hd: torch.Tensor, align: torch.Tensor) -> torch.Tensor:
    return mr + hd + align
