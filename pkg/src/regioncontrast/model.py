"""Composite region-text model.

Wires the image encoder, prompt encoder, fusion block, frozen text encoder,
and logit scale into one module with batched train/inference entry points.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .encoders import (
    EncoderConfig,
    ImageEncoder,
    ImageSample,
    TextEncoder,
    images_to_tensor,
    tokenize,
)
from .errors import ShapeError
from .fusion import AttentionTrace, FusionBlock
from .objective import LogitScale, SimilarityMatrix, nce_loss, normalize, similarity_logits
from .prompts import PromptEncoder, SpatialPrompt


class RegionTextModel(nn.Module):
    """Prompt-conditioned image embedding against frozen caption anchors."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg)
        self.text_encoder = TextEncoder(cfg)
        self.prompt_encoder = PromptEncoder(cfg.d1, cfg.patch_size)
        self.fusion = FusionBlock(cfg.d1, cfg.d, cfg.heads)
        self.logit_scale = LogitScale()

    @classmethod
    def build(cls, cfg: EncoderConfig, seed: int = 2025) -> "RegionTextModel":
        """Construct with reproducible initialization."""
        torch.manual_seed(seed)
        return cls(cfg)

    def set_trainable_blocks(self, k: int) -> None:
        self.cfg = self.image_encoder.set_trainable_blocks(k)

    def trainable_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def _encode_prompts(
        self, prompts: list[SpatialPrompt], num_patches: int
    ) -> tuple[torch.Tensor, torch.Tensor | None, torch.Tensor]:
        """Pad per-sample sparse tokens to a common S and stack dense grids.

        Padding rows reuse the null token and are masked out of attention by
        key-padding; returns (sparse B×S×D₁, dense B×L×D₁ or None, valid B×S).
        """
        encoded = [self.prompt_encoder.encode(p) for p in prompts]
        s_max = max(e[0].shape[0] for e in encoded)
        dtype = self.prompt_encoder.type_table.weight.dtype
        null = self.prompt_encoder.null_token()[0]
        sparse = torch.stack(
            [
                torch.cat([e[0], null.expand(s_max - e[0].shape[0], -1)])
                if e[0].shape[0] < s_max
                else e[0]
                for e in encoded
            ]
        )
        valid = torch.zeros(len(encoded), s_max, dtype=torch.bool)
        for i, e in enumerate(encoded):
            valid[i, : e[0].shape[0]] = True
        if any(e[1] is not None for e in encoded):
            dense = torch.zeros(len(encoded), num_patches, self.cfg.d1, dtype=dtype)
            for i, e in enumerate(encoded):
                if e[1] is not None:
                    if e[1].shape[0] != num_patches:
                        raise ShapeError(
                            f"dense grid has {e[1].shape[0]} rows, expected {num_patches}"
                        )
                    dense[i] = e[1]
        else:
            dense = None
        return sparse, dense, valid

    def embed_images(
        self,
        images: torch.Tensor,
        prompts: list[SpatialPrompt],
        with_trace: bool = False,
    ) -> tuple[torch.Tensor, AttentionTrace | None]:
        """B×3×H×W normalized images + per-sample prompts -> B×D embeddings."""
        if images.shape[0] != len(prompts):
            raise ShapeError(
                f"{images.shape[0]} images but {len(prompts)} prompts"
            )
        tokens = self.image_encoder(images)
        sparse, dense, valid = self._encode_prompts(prompts, tokens.shape[1])
        mask = None if bool(valid.all()) else valid
        out, trace = self.fusion(tokens, sparse.to(tokens.dtype), dense, sparse_valid=mask)
        return out, (trace if with_trace else None)

    def embed_sample(
        self, image: ImageSample, prompt: SpatialPrompt
    ) -> tuple[torch.Tensor, AttentionTrace]:
        """Single-sample inference path; returns (unit D-vector, trace)."""
        with torch.no_grad():
            images = images_to_tensor([image]).to(self.dtype())
            out, trace = self.embed_images(images, [prompt], with_trace=True)
        single_trace = AttentionTrace(
            step2_weights=trace.step2_weights[0], step3_weights=trace.step3_weights[0]
        )
        return normalize(out[0]), single_trace

    def embed_texts(self, texts: list[str]) -> torch.Tensor:
        """Captions -> B×D unit-norm anchors (no gradient, frozen encoder)."""
        seqs = [tokenize(t, self.cfg) for t in texts]
        with torch.no_grad():
            return normalize(self.text_encoder.encode_batch(seqs))

    def contrastive_loss(
        self,
        images: torch.Tensor,
        prompts: list[SpatialPrompt],
        texts: list[str],
    ) -> tuple[torch.Tensor, SimilarityMatrix]:
        img_emb, _ = self.embed_images(images, prompts)
        txt_emb = self.embed_texts(texts).to(img_emb.dtype)
        sim = similarity_logits(normalize(img_emb), normalize(txt_emb), self.logit_scale)
        return nce_loss(sim), sim

    def dtype(self) -> torch.dtype:
        return self.image_encoder.patch_embed.weight.dtype

    def named_state_tensors(self) -> dict[str, torch.Tensor]:
        """Every parameter and buffer, for checkpointing."""
        out = dict(self.named_parameters())
        out.update(dict(self.named_buffers()))
        return out


def sample_to_tensor(image: ImageSample, dtype: torch.dtype) -> torch.Tensor:
    return images_to_tensor([image]).to(dtype)


def cosine_scores(query: torch.Tensor, anchors: torch.Tensor) -> np.ndarray:
    """Cosine of one D-vector against rows of an anchor matrix."""
    q = normalize(query.to(torch.float64))
    a = normalize(anchors.to(torch.float64))
    return (a @ q).cpu().numpy()
