"""Image and text encoders.

The image side is a small vision transformer that emits the full patch-token
grid (pooling happens later, in the fusion block).  The text side is a hash
tokenizer plus a frozen bag-of-token encoder: random frozen projections give
every caption a stable, distinct anchor vector, which is all the contrastive
objective needs at desk scale.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import InvalidInput, ShapeError

# Per-channel normalization constants (RGB, 8-bit pixel scale).
IMAGE_MEAN = (123.675, 116.28, 103.53)
IMAGE_STD = (58.395, 57.12, 57.375)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_FNV_MASK = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class EncoderConfig:
    """Shapes and capacity knobs for both encoders.

    ``d1`` is the patch-token width, ``d`` the shared embedding width.
    ``trainable_blocks`` is the number of transformer blocks, counted from
    the end, that carry gradients; everything earlier (plus the patch
    embedding) stays frozen.
    """

    patch_size: int = 8
    image_size: int = 64
    d1: int = 128
    d: int = 64
    depth: int = 4
    heads: int = 4
    vocab_size: int = 4096
    max_len: int = 32
    trainable_blocks: int = 4

    def __post_init__(self):
        if self.d1 % self.heads != 0:
            raise InvalidInput(f"d1={self.d1} not divisible by heads={self.heads}")
        if not 0 <= self.trainable_blocks <= self.depth:
            raise InvalidInput(
                f"trainable_blocks={self.trainable_blocks} outside [0, {self.depth}]"
            )
        if self.image_size % self.patch_size != 0:
            raise InvalidInput(
                f"image_size={self.image_size} not a multiple of patch_size={self.patch_size}"
            )
        for name in ("patch_size", "image_size", "d1", "d", "depth", "heads",
                     "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise InvalidInput(f"{name} must be >= 1")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return (g, g)

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class ImageSample:
    """An H×W×3 float image plus its normalization state."""

    pixels: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ShapeError(f"expected H×W×3 pixels, got {px.shape}")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def normalize(self) -> "ImageSample":
        """Per-channel standardization; rejects double application."""
        if self.normalized:
            raise InvalidInput("image is already normalized")
        mean = np.asarray(IMAGE_MEAN, dtype=np.float32)
        std = np.asarray(IMAGE_STD, dtype=np.float32)
        return ImageSample((self.pixels - mean) / std, normalized=True)


def load_image(path) -> ImageSample:
    """Read an 8-bit PNG (grayscale or RGB) as an un-normalized sample."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return ImageSample(arr)


@dataclass
class TokenSequence:
    ids: list[int]
    length: int
    pad_id: int = 0


def hash_token(token: str, vocab_size: int) -> int:
    """64-bit FNV-1a of the UTF-8 bytes, reduced mod vocab_size."""
    h = _FNV_OFFSET
    for b in token.encode("utf-8"):
        h ^= b
        h = (h * _FNV_PRIME) & _FNV_MASK
    return h % vocab_size


_BOUNDARY_PUNCT = ".,;:!?()\"'"


def tokenize(text: str, cfg: EncoderConfig) -> TokenSequence:
    """Lowercase, whitespace-split, hash each token into [0, vocab_size).

    Boundary punctuation is stripped per word so "ring." and "ring" share an
    id.  The sequence is truncated or right-padded with ``pad_id`` to
    ``cfg.max_len``; ``length`` counts the real tokens.
    """
    words = text.lower().split()
    if not words:
        raise InvalidInput("text is empty after whitespace trim")
    words = [w.strip(_BOUNDARY_PUNCT) or w for w in words]
    ids = [hash_token(w, cfg.vocab_size) for w in words[: cfg.max_len]]
    length = len(ids)
    ids = ids + [0] * (cfg.max_len - length)
    return TokenSequence(ids=ids, length=length, pad_id=0)


@dataclass
class PatchTokens:
    """L×D₁ patch-token matrix with its spatial grid."""

    tokens: torch.Tensor
    grid: tuple[int, int]


class TextEncoder(nn.Module):
    """Frozen caption encoder: token embedding, mean pool, linear projection.

    All parameters are frozen at construction; captions sharing tokens land
    near each other, distinct captions land apart.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d1)
        self.proj = nn.Linear(cfg.d1, cfg.d)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        # ids: B×max_len int64, lengths: B
        if int(ids.max()) >= self.cfg.vocab_size:
            raise InvalidInput("token id out of vocabulary range")
        emb = self.embed(ids)  # B×T×D₁
        mask = (
            torch.arange(ids.shape[1], device=ids.device)[None, :] < lengths[:, None]
        )
        pooled = (emb * mask[..., None]).sum(dim=1) / lengths[:, None].to(emb.dtype)
        return self.proj(pooled)

    def encode(self, tokens: TokenSequence) -> torch.Tensor:
        """Encode one TokenSequence to an unnormalized D-vector."""
        ids = torch.tensor([tokens.ids], dtype=torch.int64)
        lengths = torch.tensor([tokens.length], dtype=torch.int64)
        with torch.no_grad():
            return self.forward(ids, lengths)[0]

    def encode_batch(self, seqs: list[TokenSequence]) -> torch.Tensor:
        ids = torch.tensor([s.ids for s in seqs], dtype=torch.int64)
        lengths = torch.tensor([s.length for s in seqs], dtype=torch.int64)
        return self.forward(ids, lengths)


class TransformerBlock(nn.Module):
    """Pre-norm transformer block: attention then MLP, residual around each."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(mlp_ratio * dim, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        attn_out, _ = self.attn(h, h, h, need_weights=False)
        x = x + attn_out
        return x + self.mlp(self.norm2(x))


class ImageEncoder(nn.Module):
    """Small ViT emitting the full L×D₁ token grid.

    The patch embedding (conv + positional table) is always frozen; only the
    last ``trainable_blocks`` transformer blocks carry gradients.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(
            3, cfg.d1, kernel_size=cfg.patch_size, stride=cfg.patch_size
        )
        self.pos_embed = nn.Parameter(torch.randn(cfg.num_patches, cfg.d1) * 0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.d1, cfg.heads) for _ in range(cfg.depth)
        )
        self.set_trainable_blocks(cfg.trainable_blocks)

    def set_trainable_blocks(self, k: int) -> EncoderConfig:
        """Freeze all but the last ``k`` blocks; returns the updated config."""
        if not isinstance(k, int) or not 0 <= k <= self.cfg.depth:
            raise InvalidInput(f"k={k} outside [0, {self.cfg.depth}]")
        self.patch_embed.requires_grad_(False)
        self.pos_embed.requires_grad_(False)
        for i, block in enumerate(self.blocks):
            block.requires_grad_(i >= self.cfg.depth - k)
        self.cfg = dataclasses.replace(self.cfg, trainable_blocks=k)
        return self.cfg

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        # images: B×3×H×W normalized floats -> B×L×D₁
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected B×3×H×W, got {tuple(images.shape)}")
        if images.shape[2] % self.cfg.patch_size or images.shape[3] % self.cfg.patch_size:
            raise ShapeError(
                f"image dims {tuple(images.shape[2:])} not divisible by "
                f"patch_size={self.cfg.patch_size}"
            )
        x = self.patch_embed(images)  # B×D₁×gh×gw
        x = x.flatten(2).transpose(1, 2)  # B×L×D₁
        x = x + self.pos_embed.to(x.dtype)
        for block in self.blocks:
            x = block(x)
        return x

    def encode(self, image: ImageSample) -> PatchTokens:
        """Encode one normalized ImageSample to PatchTokens."""
        if not image.normalized:
            raise InvalidInput("image must be normalized before encoding")
        if image.height % self.cfg.patch_size or image.width % self.cfg.patch_size:
            raise ShapeError(
                f"image {image.height}×{image.width} not divisible by "
                f"patch_size={self.cfg.patch_size}"
            )
        tens = torch.from_numpy(image.pixels).permute(2, 0, 1)[None]
        dtype = self.patch_embed.weight.dtype
        with torch.no_grad():
            tokens = self.forward(tens.to(dtype))[0]
        gh = image.height // self.cfg.patch_size
        gw = image.width // self.cfg.patch_size
        return PatchTokens(tokens=tokens, grid=(gh, gw))

    def trainable_parameter_names(self) -> list[str]:
        return [n for n, p in self.named_parameters() if p.requires_grad]


def images_to_tensor(samples: list[ImageSample]) -> torch.Tensor:
    """Stack normalized samples into a B×3×H×W batch tensor."""
    for s in samples:
        if not s.normalized:
            raise InvalidInput("all images must be normalized")
    arr = np.stack([s.pixels for s in samples])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()
