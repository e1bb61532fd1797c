"""Decoder that refines moment queries by feeding its own output back in.

A single weight-shared transformer decoder stack is applied N times. The
first pass starts from an all-zero query matrix; every pass reuses the same
parameters, so N controls compute, not capacity. Queries stay distinguishable
through learnable positional embeddings added inside attention.
"""

from __future__ import annotations

import torch
from torch import nn

from .transformer import TransformerDecoderStack, sinusoidal_positions


class LoopDecoder(nn.Module):
    def __init__(
        self,
        d_model: int = 256,
        num_queries: int = 10,
        n_loops: int = 3,
        dec_layers: int = 2,
        n_heads: int = 8,
        d_ffn: int = 1024,
        dropout: float = 0.1,
    ):
        super().__init__()
        if n_loops < 1:
            raise ValueError(f"n_loops must be >= 1, got {n_loops}")
        self.d_model = d_model
        self.num_queries = num_queries
        self.n_loops = n_loops
        self.decoder = TransformerDecoderStack(dec_layers, d_model, n_heads, d_ffn, dropout)
        self.query_pos = nn.Embedding(num_queries, d_model)

    def memory_positions(self, memory: torch.Tensor) -> torch.Tensor:
        return sinusoidal_positions(
            memory.shape[1], self.d_model, device=memory.device, dtype=memory.dtype
        ).unsqueeze(0)

    def decode_once(
        self,
        query: torch.Tensor,
        memory: torch.Tensor,
        memory_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """One decoder pass: (b, q, d) x (b, t, d) -> (b, q, d)."""
        query_pos = self.query_pos.weight.unsqueeze(0).expand(memory.shape[0], -1, -1)
        return self.decoder(
            query,
            memory,
            memory_mask=memory_mask,
            memory_pos=self.memory_positions(memory),
            query_pos=query_pos.to(query.dtype),
        )

    def forward(
        self,
        memory: torch.Tensor,
        memory_mask: torch.Tensor | None = None,
        n_loops: int | None = None,
        return_all: bool = False,
    ) -> torch.Tensor | list[torch.Tensor]:
        """Iterate the decoder n_loops times from a zero query matrix.

        With return_all=True the per-loop outputs [Q^1 .. Q^N] come back for
        inspection; training and prediction consume only the final one.
        """
        n = self.n_loops if n_loops is None else n_loops
        if n < 1:
            raise ValueError(f"n_loops must be >= 1, got {n}")
        q = memory.new_zeros(memory.shape[0], self.num_queries, self.d_model)
        outputs = []
        for _ in range(n):
            q = self.decode_once(q, memory, memory_mask)
            if return_all:
                outputs.append(q)
        return outputs if return_all else q
