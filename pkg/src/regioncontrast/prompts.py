"""Spatial prompt types and their token/grid embeddings.

Points and boxes become a handful of sparse tokens (random Fourier position
features plus a learnable type embedding); masks become a dense grid aligned
with the image patch tokens.  A learnable null token stands in whenever the
sparse path would otherwise be empty, so the fusion block always has at
least one query.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import InvalidInput, ShapeError


class PromptKind(enum.Enum):
    POINTS = "points"
    BOX = "box"
    MASK = "mask"
    POINTS_AND_BOX = "points_and_box"
    NONE = "none"


# Rows of the learnable type-embedding table.
TYPE_POINT = 0
TYPE_TL_CORNER = 1
TYPE_BR_CORNER = 2
TYPE_NULL = 3
NUM_TYPES = 4


@dataclass
class SpatialPrompt:
    """Tagged union of the supported prompt geometries.

    Coordinates are normalized to [0, 1]; masks are binary H×W grids at the
    image resolution.
    """

    kind: PromptKind
    points: list[tuple[float, float]] = field(default_factory=list)
    box: tuple[float, float, float, float] | None = None
    mask: np.ndarray | None = None

    def validate(self) -> "SpatialPrompt":
        k = self.kind
        if k in (PromptKind.POINTS, PromptKind.POINTS_AND_BOX):
            if not self.points:
                raise InvalidInput(f"{k.value} prompt requires at least one point")
            for x, y in self.points:
                if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                    raise InvalidInput(f"point ({x}, {y}) outside [0, 1]")
        if k in (PromptKind.BOX, PromptKind.POINTS_AND_BOX):
            if self.box is None:
                raise InvalidInput(f"{k.value} prompt requires a box")
            x0, y0, x1, y1 = self.box
            if not (x0 < x1 and y0 < y1):
                raise InvalidInput(f"degenerate box {self.box}")
            for v in self.box:
                if not 0.0 <= v <= 1.0:
                    raise InvalidInput(f"box coordinate {v} outside [0, 1]")
        if k is PromptKind.MASK:
            if self.mask is None:
                raise InvalidInput("mask prompt requires a mask")
            if not np.asarray(self.mask).any():
                raise InvalidInput("mask prompt has no true pixels")
        if k is PromptKind.NONE and (self.points or self.box is not None or self.mask is not None):
            raise InvalidInput("none prompt must carry no geometry")
        return self


def none_prompt() -> SpatialPrompt:
    return SpatialPrompt(kind=PromptKind.NONE)


# --- wire format ------------------------------------------------------------

def rle_encode(mask: np.ndarray) -> dict:
    """Row-major run-length encoding, alternating runs starting with false."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise ShapeError(f"expected H×W mask, got {m.shape}")
    flat = m.reshape(-1)
    runs: list[int] = []
    current = False
    run = 0
    for v in flat:
        if v == current:
            run += 1
        else:
            runs.append(run)
            current = not current
            run = 1
    runs.append(run)
    return {"h": int(m.shape[0]), "w": int(m.shape[1]), "runs": runs}


def rle_decode(d: dict) -> np.ndarray:
    h, w = int(d["h"]), int(d["w"])
    runs = d["runs"]
    if sum(runs) != h * w:
        raise InvalidInput(f"RLE runs sum to {sum(runs)}, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    return flat.reshape(h, w)


def prompt_to_json(p: SpatialPrompt) -> dict:
    out: dict = {"kind": p.kind.value}
    if p.points:
        out["points"] = [[float(x), float(y)] for x, y in p.points]
    if p.box is not None:
        out["box"] = [float(v) for v in p.box]
    if p.mask is not None:
        out["mask_rle"] = rle_encode(p.mask)
    return out


def prompt_from_json(d: dict) -> SpatialPrompt:
    try:
        kind = PromptKind(d["kind"])
    except (KeyError, ValueError) as e:
        raise InvalidInput(f"unknown prompt kind: {d.get('kind')!r}") from e
    points = [(float(x), float(y)) for x, y in d.get("points", [])]
    box = tuple(float(v) for v in d["box"]) if d.get("box") is not None else None
    mask = rle_decode(d["mask_rle"]) if d.get("mask_rle") is not None else None
    return SpatialPrompt(kind=kind, points=points, box=box, mask=mask).validate()


# --- embedding modules ------------------------------------------------------

class FourierPositionCodec(nn.Module):
    """Random Fourier features over normalized 2-D coordinates.

    The 2×(D₁/2) Gaussian frequency matrix is a frozen buffer; the encoding
    is pe(x, y) = concat(sin(2π·[x, y]·G), cos(2π·[x, y]·G)).
    """

    def __init__(self, dim: int, scale: float = 1.0):
        super().__init__()
        if dim % 2 != 0:
            raise InvalidInput(f"codec dim must be even, got {dim}")
        self.scale = scale
        self.register_buffer("frequency_matrix", torch.randn(2, dim // 2) * scale)

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        # coords: N×2 in [0, 1] -> N×dim
        proj = 2.0 * math.pi * coords @ self.frequency_matrix.to(coords.dtype)
        return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)


class MaskDownsampler(nn.Module):
    """Stride-reducing conv stack mapping an H×W mask onto the patch grid.

    Stride-2 convolutions take out the 2-adic part of the patch size and a
    final strided conv handles any odd remainder, followed by a 1×1
    projection to D₁.
    """

    def __init__(self, patch_size: int, d1: int):
        super().__init__()
        layers: list[nn.Module] = []
        remaining = patch_size
        chans = 1
        next_chans = 4
        while remaining % 2 == 0 and remaining > 1:
            layers += [
                nn.Conv2d(chans, next_chans, kernel_size=2, stride=2),
                nn.GELU(),
            ]
            chans, next_chans = next_chans, next_chans * 2
            remaining //= 2
        if remaining > 1:
            layers += [
                nn.Conv2d(chans, next_chans, kernel_size=remaining, stride=remaining),
                nn.GELU(),
            ]
            chans = next_chans
        layers.append(nn.Conv2d(chans, d1, kernel_size=1))
        self.stack = nn.Sequential(*layers)
        self.patch_size = patch_size
        self._init_as_coverage()

    def _init_as_coverage(self) -> None:
        # A binary mask is a weak signal: at the default init the conv biases
        # dominate and every grid cell comes out nearly identical.  Start the
        # reducing convs as averaging filters (plus a little noise so channels
        # can specialise) with zero bias, so an untrained stack maps a mask to
        # its per-cell coverage and the final 1×1 spreads that into D₁.
        with torch.no_grad():
            for m in self.stack[:-1]:
                if isinstance(m, nn.Conv2d):
                    fan = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                    # gain 2 keeps the activation chain near its linear
                    # regime, so partial coverage is not crushed toward zero
                    m.weight.mul_(0.1).add_(2.0 / fan)
                    m.bias.zero_()
            self.stack[-1].bias.zero_()

    def forward(self, mask: torch.Tensor) -> torch.Tensor:
        # mask: B×1×H×W floats -> B×L×D₁
        if mask.ndim != 4 or mask.shape[1] != 1:
            raise ShapeError(f"expected B×1×H×W mask, got {tuple(mask.shape)}")
        if mask.shape[2] % self.patch_size or mask.shape[3] % self.patch_size:
            raise ShapeError(
                f"mask dims {tuple(mask.shape[2:])} not divisible by "
                f"patch_size={self.patch_size}"
            )
        grid = self.stack(mask)  # B×D₁×gh×gw
        return grid.flatten(2).transpose(1, 2)


class PromptEncoder(nn.Module):
    """Dispatch prompts to sparse tokens and, for masks, a dense grid."""

    def __init__(self, d1: int, patch_size: int, codec_scale: float = 1.0):
        super().__init__()
        self.d1 = d1
        self.patch_size = patch_size
        self.codec = FourierPositionCodec(d1, scale=codec_scale)
        self.type_table = nn.Embedding(NUM_TYPES, d1)
        self.mask_stack = MaskDownsampler(patch_size, d1)

    def _pe(self, coords: list[tuple[float, float]]) -> torch.Tensor:
        dtype = self.type_table.weight.dtype
        pts = torch.tensor(coords, dtype=dtype)
        return self.codec(pts)

    def encode_points(self, points: list[tuple[float, float]]) -> torch.Tensor:
        for x, y in points:
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise InvalidInput(f"point ({x}, {y}) outside [0, 1]")
        return self._pe(points) + self.type_table.weight[TYPE_POINT]

    def encode_box(self, box: tuple[float, float, float, float]) -> torch.Tensor:
        x0, y0, x1, y1 = box
        if not (x0 < x1 and y0 < y1):
            raise InvalidInput(f"degenerate box {box}")
        corners = self._pe([(x0, y0), (x1, y1)])
        types = self.type_table.weight[[TYPE_TL_CORNER, TYPE_BR_CORNER]]
        return corners + types

    def encode_mask(self, mask: np.ndarray) -> torch.Tensor:
        dtype = self.type_table.weight.dtype
        m = torch.as_tensor(np.asarray(mask, dtype=np.float32)).to(dtype)
        if m.ndim != 2:
            raise ShapeError(f"expected H×W mask, got {tuple(m.shape)}")
        return self.mask_stack(m[None, None])[0]

    def null_token(self) -> torch.Tensor:
        return self.type_table.weight[TYPE_NULL][None, :]

    def encode(self, prompt: SpatialPrompt) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Return (sparse S×D₁, dense L×D₁ or None) for a validated prompt."""
        prompt.validate()
        k = prompt.kind
        if k is PromptKind.POINTS:
            return self.encode_points(prompt.points), None
        if k is PromptKind.BOX:
            return self.encode_box(prompt.box), None
        if k is PromptKind.POINTS_AND_BOX:
            sparse = torch.cat(
                [self.encode_points(prompt.points), self.encode_box(prompt.box)]
            )
            return sparse, None
        if k is PromptKind.MASK:
            return self.null_token(), self.encode_mask(prompt.mask)
        return self.null_token(), None
