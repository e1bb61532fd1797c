"""Full network: unimodal encoders with momentum twins, queue-based alignment,
convolutional fusion, loop decoding, and both prediction heads, plus the glue
that turns a padded batch into losses or ranked predictions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import RunConfig
from .data_model import Batch
from .distill_align import AlignConfig, DistillAlign
from .encoders import MomentumPair, UnimodalEncoder, global_pool
from .fuser import ConvolutionalFuser, FuserConfig
from .heads import MomentHead, SaliencyHead
from .loop_decoder import LoopDecoder
from .losses import LossConfig, hd_loss, match_batch, mr_loss, total_loss
from .transformer import zero_masked


@dataclass
class ModelOutput:
    spans: torch.Tensor  # (b, q, 2) normalized (center, width)
    conf_logits: torch.Tensor  # (b, q)
    saliency: torch.Tensor  # (b, t), -inf at padded clips
    memory: torch.Tensor  # (b, t, d)
    decoded: torch.Tensor  # (b, q, d)
    latent_video: torch.Tensor  # (b, t, d)
    latent_text: torch.Tensor  # (b, n, d)


@dataclass
class BatchTensors:
    video: torch.Tensor
    text: torch.Tensor
    video_mask: torch.Tensor
    text_mask: torch.Tensor
    saliency: torch.Tensor
    gt_spans: list[torch.Tensor]


def batch_to_tensors(batch: Batch, device: str = "cpu") -> BatchTensors:
    return BatchTensors(
        video=torch.from_numpy(batch.video_feats).to(device),
        text=torch.from_numpy(batch.text_feats).to(device),
        video_mask=torch.from_numpy(batch.video_mask).to(device),
        text_mask=torch.from_numpy(batch.text_mask).to(device),
        saliency=torch.from_numpy(batch.saliency).to(device),
        gt_spans=[torch.from_numpy(g).to(device) for g in batch.gt_moments],
    )


class MomentHighlightModel(nn.Module):
    def __init__(self, config: RunConfig | None = None):
        super().__init__()
        self.config = config or RunConfig()
        c = self.config
        d = c.hidden_dim

        self.video_encoder = MomentumPair(
            UnimodalEncoder(c.d_v, d, c.encoder_dropout), m=c.momentum
        )
        self.text_encoder = MomentumPair(
            UnimodalEncoder(c.d_t, d, c.encoder_dropout), m=c.momentum
        )
        self.align = DistillAlign(
            d,
            AlignConfig(
                alpha=c.alpha,
                tau=c.tau,
                lambda_align=c.lambda_align,
                lambda_sim=c.lambda_sim,
                queue_len=c.queue_len,
            ),
        )
        self.fuser = ConvolutionalFuser(
            FuserConfig(
                d_model=d,
                n_heads=c.n_heads,
                d_ffn=c.d_ffn,
                dropout=c.dropout,
                enc_layers=c.enc_layers,
                conv_blocks=c.conv_blocks,
                conv_kernel=c.conv_kernel,
                conv_placement=c.conv_placement,
                attn_scale=c.attn_scale,
            )
        )
        self.decoder = LoopDecoder(
            d_model=d,
            num_queries=c.num_queries,
            n_loops=c.n_loops,
            dec_layers=c.dec_layers,
            n_heads=c.n_heads,
            d_ffn=c.d_ffn,
            dropout=c.dropout,
        )
        self.moment_head = MomentHead(d)
        self.saliency_head = SaliencyHead(d)

        self.loss_config = LossConfig(
            lambda_l1=c.lambda_l1,
            lambda_giou=c.lambda_giou,
            lambda_ce=c.lambda_ce,
            bg_weight=c.bg_weight,
            lambda_marg=c.lambda_marg,
            lambda_cont=c.lambda_cont,
            margin=c.margin,
            tau_rank=c.tau_rank,
        )
        self.loss_config.validate()

    def momentum_update(self) -> None:
        self.video_encoder.momentum_update()
        self.text_encoder.momentum_update()

    def encode(self, bt: BatchTensors) -> tuple[torch.Tensor, torch.Tensor]:
        video = zero_masked(bt.video, bt.video_mask)
        text = zero_masked(bt.text, bt.text_mask)
        return (
            self.video_encoder(video, bt.video_mask),
            self.text_encoder(text, bt.text_mask),
        )

    @torch.no_grad()
    def momentum_globals(self, bt: BatchTensors) -> tuple[torch.Tensor, torch.Tensor]:
        video = zero_masked(bt.video, bt.video_mask)
        text = zero_masked(bt.text, bt.text_mask)
        G_mv = global_pool(self.video_encoder.shadow_encode(video, bt.video_mask), bt.video_mask)
        G_mt = global_pool(self.text_encoder.shadow_encode(text, bt.text_mask), bt.text_mask)
        return G_mv, G_mt

    def forward(self, bt: BatchTensors, n_loops: int | None = None) -> ModelOutput:
        V_lat, T_lat = self.encode(bt)
        memory = self.fuser(V_lat, T_lat, bt.video_mask, bt.text_mask)
        decoded = self.decoder(memory, bt.video_mask, n_loops=n_loops)
        spans, conf = self.moment_head(decoded)
        saliency = self.saliency_head(memory, V_lat, spans, bt.video_mask)
        return ModelOutput(
            spans=spans,
            conf_logits=conf,
            saliency=saliency,
            memory=memory,
            decoded=decoded,
            latent_video=V_lat,
            latent_text=T_lat,
        )

    def training_losses(
        self, bt: BatchTensors
    ) -> tuple[torch.Tensor, dict[str, float], tuple[torch.Tensor, torch.Tensor]]:
        """Full objective on one batch.

        Returns (total, scalar parts for logging, momentum globals to enqueue
        after the optimizer step).
        """
        out = self(bt)
        if not (
            torch.isfinite(out.spans).all()
            and torch.isfinite(out.conf_logits).all()
            and torch.isfinite(out.saliency[bt.video_mask]).all()
        ):
            raise FloatingPointError("model produced non-finite spans, confidences, or saliency")
        G_v = global_pool(out.latent_video, bt.video_mask)
        G_t = global_pool(out.latent_text, bt.text_mask)
        G_mv, G_mt = self.momentum_globals(bt)
        align, align_parts = self.align(G_v, G_t, G_mv, G_mt)

        matches = match_batch(out.spans.detach(), out.conf_logits.detach(), bt.gt_spans, self.loss_config)
        mr, mr_parts = mr_loss(out.spans, out.conf_logits, bt.gt_spans, matches, self.loss_config)
        hd, hd_parts = hd_loss(out.saliency, bt.saliency, bt.video_mask, self.loss_config)
        total = total_loss(mr, hd, align)

        parts = {
            "total": float(total.detach()),
            "mr": float(mr.detach()),
            "hd": float(hd.detach()),
            "align": float(align.detach()),
        }
        for prefix, extra in (("mr", mr_parts), ("hd", hd_parts), ("align", align_parts)):
            for k, v in extra.items():
                parts[f"{prefix}_{k}"] = float(v.detach()) if torch.is_tensor(v) else float(v)
        return total, parts, (G_mv, G_mt)

    @torch.no_grad()
    def per_loop_top_spans(self, bt: BatchTensors) -> np.ndarray:
        """Top-1 (center, width, confidence) after each decoder loop: (b, N, 3)."""
        V_lat, T_lat = self.encode(bt)
        memory = self.fuser(V_lat, T_lat, bt.video_mask, bt.text_mask)
        per_loop = self.decoder(memory, bt.video_mask, return_all=True)
        rows = []
        for decoded in per_loop:
            spans, conf = self.moment_head(decoded)
            probs = torch.sigmoid(conf)
            best = probs.argmax(dim=1)
            idx = torch.arange(spans.shape[0])
            rows.append(torch.cat([spans[idx, best], probs[idx, best, None]], dim=-1))
        return torch.stack(rows, dim=1).cpu().numpy()


@torch.no_grad()
def predict_records(model: MomentHighlightModel, batch: Batch, device: str = "cpu") -> list[dict]:
    """Interchange-format records for one batch; moments sorted by confidence."""
    was_training = model.training
    model.eval()
    try:
        bt = batch_to_tensors(batch, device)
        out = model(bt)
        probs = torch.sigmoid(out.conf_logits).cpu().numpy()
        spans = out.spans.cpu().numpy()
        saliency = out.saliency.cpu().numpy()
        records = []
        for i, sid in enumerate(batch.ids):
            rows = np.column_stack([spans[i], probs[i]]).astype(np.float64)
            order = np.lexsort((rows[:, 1], rows[:, 0] - rows[:, 1] / 2, -rows[:, 2]))
            valid = batch.video_mask[i]
            records.append(
                {
                    "id": sid,
                    "pred_moments": [[float(c), float(w), float(p)] for c, w, p in rows[order]],
                    "pred_saliency": [float(s) for s in saliency[i][valid]],
                }
            )
        return records
    finally:
        if was_training:
            model.train()
