"""Prompt/image fusion block.

One attention block turns patch tokens plus prompt embeddings into the final
image-side embedding:

  (1) self-attention over the sparse tokens; dense grid (if present) is added
      elementwise to the patch tokens,
  (2) cross-attention with the sparse tokens as queries over the image
      tokens, then a pointwise MLP,
  (3) cross-attention with the image tokens as queries over the updated
      sparse tokens,
  (4) global average pool over the image axis and an MLP down to width D.

Every attention and the pointwise MLP are wrapped post-residual:
norm(x + sublayer(x)).  The final MLP changes width, so it takes a plain
layer-norm on the pooled vector instead of a residual.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import NumericalError, ShapeError


@dataclass
class AttentionTrace:
    """Attention weights captured from steps 2 and 3 of a fuse call.

    ``step2_weights``: heads×S×L (sparse queries over image tokens).
    ``step3_weights``: heads×L×S.
    """

    step2_weights: torch.Tensor
    step3_weights: torch.Tensor


class MultiheadAttention(nn.Module):
    """Multi-head attention that also returns per-head softmax weights."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ShapeError(f"dim={dim} not divisible by heads={heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor,
        value: torch.Tensor,
        key_mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        # query: B×Tq×D, key/value: B×Tk×D, key_mask: B×Tk bool (True = attend)
        b, tq, _ = query.shape
        tk = key.shape[1]

        def split(x: torch.Tensor, t: int) -> torch.Tensor:
            return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

        q = split(self.q_proj(query), tq)
        k = split(self.k_proj(key), tk)
        v = split(self.v_proj(value), tk)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)  # B×H×Tq×Tk
        out = weights @ v
        out = out.transpose(1, 2).reshape(b, tq, self.heads * self.head_dim)
        return self.out_proj(out), weights


class FusionBlock(nn.Module):
    """Fuses sparse/dense prompt embeddings with patch tokens into a D-vector."""

    def __init__(self, d1: int, d: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.d1 = d1
        self.d = d
        self.self_attn = MultiheadAttention(d1, heads)
        self.norm_self = nn.LayerNorm(d1)
        self.cross_s2i = MultiheadAttention(d1, heads)
        self.norm_s2i = nn.LayerNorm(d1)
        self.mlp = nn.Sequential(
            nn.Linear(d1, mlp_ratio * d1),
            nn.GELU(),
            nn.Linear(mlp_ratio * d1, d1),
        )
        self.norm_mlp = nn.LayerNorm(d1)
        self.cross_i2s = MultiheadAttention(d1, heads)
        self.norm_i2s = nn.LayerNorm(d1)
        self.norm_pool = nn.LayerNorm(d1)
        self.head = nn.Sequential(
            nn.Linear(d1, d1),
            nn.GELU(),
            nn.Linear(d1, d),
        )

    def forward(
        self,
        image_tokens: torch.Tensor,
        sparse: torch.Tensor,
        dense: torch.Tensor | None = None,
        sparse_valid: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, AttentionTrace]:
        """Run the four-step fusion on a batch.

        image_tokens: B×L×D₁, sparse: B×S×D₁, dense: B×L×D₁ or None.
        ``sparse_valid`` (B×S bool) masks padding rows when batch entries
        carry different prompt-token counts; padded rows never reach the
        pooled output.  Returns (B×D embeddings, trace); the trace holds
        B×H×S×L and B×H×L×S weight tensors.
        """
        squeeze = image_tokens.ndim == 2
        if squeeze:
            image_tokens = image_tokens[None]
            sparse = sparse[None]
            dense = dense[None] if dense is not None else None
        if image_tokens.ndim != 3 or sparse.ndim != 3:
            raise ShapeError("image_tokens and sparse must be B×T×D₁")
        if image_tokens.shape[-1] != self.d1 or sparse.shape[-1] != self.d1:
            raise ShapeError(
                f"token width mismatch: expected {self.d1}, got "
                f"{image_tokens.shape[-1]} and {sparse.shape[-1]}"
            )
        if dense is not None and dense.shape != image_tokens.shape:
            raise ShapeError(
                f"dense grid {tuple(dense.shape)} does not match image tokens "
                f"{tuple(image_tokens.shape)}"
            )
        for name, t in (("image_tokens", image_tokens), ("sparse", sparse), ("dense", dense)):
            if t is not None and not torch.isfinite(t).all():
                raise NumericalError(f"non-finite values in {name}")

        # (1) sparse self-attention; dense added to the image tokens
        sa, _ = self.self_attn(sparse, sparse, sparse, key_mask=sparse_valid)
        fa = self.norm_self(sparse + sa)
        fi = image_tokens if dense is None else image_tokens + dense

        # (2) sparse queries over image tokens, then pointwise MLP
        ca, step2 = self.cross_s2i(fa, fi, fi)
        fa = self.norm_s2i(fa + ca)
        fa = self.norm_mlp(fa + self.mlp(fa))

        # (3) image queries over sparse tokens
        cb, step3 = self.cross_i2s(fi, fa, fa, key_mask=sparse_valid)
        fi_out = self.norm_i2s(fi + cb)

        # (4) pool over L and project D₁ -> D
        pooled = self.norm_pool(fi_out.mean(dim=1))
        out = self.head(pooled)

        trace = AttentionTrace(step2_weights=step2, step3_weights=step3)
        if squeeze:
            out = out[0]
            trace = AttentionTrace(step2_weights=step2[0], step3_weights=step3[0])
        return out, trace


def attention_map(trace: AttentionTrace, grid: tuple[int, int]) -> np.ndarray:
    """Collapse step-2 weights to an h×w heatmap in [0, 1].

    Averages over heads and sparse tokens, reshapes to the patch grid, and
    min-max normalizes.  A constant map normalizes to all zeros.
    """
    w = trace.step2_weights
    if w.ndim == 4:  # batched trace: single-element batch only
        if w.shape[0] != 1:
            raise ShapeError("attention_map expects an unbatched trace")
        w = w[0]
    h, gw = grid
    if h * gw != w.shape[-1]:
        raise ShapeError(f"grid {grid} does not cover {w.shape[-1]} patches")
    flat = w.detach().to(torch.float64).mean(dim=(0, 1)).cpu().numpy()
    lo, hi = flat.min(), flat.max()
    if hi - lo <= 0:
        return np.zeros((h, gw))
    return ((flat - lo) / (hi - lo)).reshape(h, gw)
