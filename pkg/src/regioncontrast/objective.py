"""Normalization, scaled cosine logits, and the symmetric contrastive loss.

The loss is the mean of the image-to-text and text-to-image cross-entropies
over in-batch pairs, with matched pairs on the diagonal.  Temperature enters
as a learnable log-scale, clamped so the effective scale stays in (0, 100].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import InvalidInput, NumericalError, ShapeError

LOG_SCALE_INIT = 4.6052
MAX_LOG_SCALE = math.log(100.0)
NORM_EPS = 1e-12


def normalize(v: torch.Tensor) -> torch.Tensor:
    """Project vectors (last axis) onto the unit sphere.

    Raises NumericalError when any norm is at or below 1e-12.
    """
    norms = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
    if (norms <= NORM_EPS).any():
        raise NumericalError("cannot normalize a (near-)zero vector")
    return v / norms


class LogitScale(nn.Module):
    """Learnable log of the logit scale s = 1/τ, clamped at ln(100)."""

    def __init__(self, init: float = LOG_SCALE_INIT):
        super().__init__()
        self.log_scale = nn.Parameter(torch.tensor(float(init)))
        self.max_log_scale = MAX_LOG_SCALE

    @property
    def scale(self) -> torch.Tensor:
        return torch.exp(torch.clamp(self.log_scale, max=self.max_log_scale))

    @property
    def value(self) -> float:
        return float(self.scale.detach())

    def clamp_(self) -> None:
        """In-place post-step projection of the raw parameter."""
        with torch.no_grad():
            self.log_scale.clamp_(max=self.max_log_scale)


@dataclass
class SimilarityMatrix:
    """N_img×N_txt scaled cosine logits and the scale that produced them."""

    logits: torch.Tensor
    scale: float


def similarity_logits(
    img: torch.Tensor, txt: torch.Tensor, scale: LogitScale | float
) -> SimilarityMatrix:
    """Scaled cosine logits between unit-norm image and text rows."""
    if img.ndim != 2 or txt.ndim != 2 or img.shape[1] != txt.shape[1]:
        raise ShapeError(
            f"expected N×D and M×D with equal D, got {tuple(img.shape)} "
            f"and {tuple(txt.shape)}"
        )
    for name, rows in (("img", img), ("txt", txt)):
        norms = torch.linalg.vector_norm(rows, dim=-1)
        if (torch.abs(norms - 1.0) > 1e-3).any():
            raise InvalidInput(f"{name} rows are not unit-norm")
    s = scale.scale if isinstance(scale, LogitScale) else torch.as_tensor(
        float(scale), dtype=img.dtype
    )
    logits = s * (img @ txt.T)
    return SimilarityMatrix(logits=logits, scale=float(s.detach()) if isinstance(s, torch.Tensor) else float(s))


def nce_loss(m: SimilarityMatrix | torch.Tensor) -> torch.Tensor:
    """Symmetric contrastive loss over a square logit matrix.

    Image-to-text is the mean row cross-entropy against the diagonal,
    text-to-image the mean column cross-entropy; the loss is their average.
    """
    logits = m.logits if isinstance(m, SimilarityMatrix) else m
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1]:
        raise ShapeError(f"expected a square logit matrix, got {tuple(logits.shape)}")
    n = logits.shape[0]
    diag = torch.arange(n, device=logits.device)
    loss_i2t = -torch.log_softmax(logits, dim=1)[diag, diag].mean()
    loss_t2i = -torch.log_softmax(logits, dim=0)[diag, diag].mean()
    return 0.5 * (loss_i2t + loss_t2i)
