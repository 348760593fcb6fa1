"""Synthetic image archives used for training demos and the built-in benchmark.

Each generated image contains two disjoint shapes drawn in opposite halves of
the canvas, so a region prompt is required to tell them apart: without one the
two records of an image are indistinguishable.
"""

from __future__ import annotations

import logging
import os
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .datagen import (
    RegionRecord,
    caption_record,
    explode_image,
    record_seed,
    write_manifest,
)
from .encoders import EncoderConfig, TextEncoder, tokenize
from .errors import InvalidInput

logger = logging.getLogger(__name__)

SHAPE_CATEGORIES = ("disk", "square", "ring", "bar", "cross", "triangle")

# Fill intensity per category; local appearance is the classification signal.
_SHAPE_LEVELS = {
    "disk": 210,
    "square": 70,
    "ring": 235,
    "bar": 150,
    "cross": 245,
    "triangle": 45,
}

_MODALITIES = ("CT", "MRI")


def _disk(h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _shape_mask(shape: str, h: int, w: int, cy: int, cx: int, r: int) -> np.ndarray:
    if shape == "disk":
        return _disk(h, w, cy, cx, r)
    if shape == "square":
        m = np.zeros((h, w), dtype=bool)
        m[max(cy - r, 0) : cy + r, max(cx - r, 0) : cx + r] = True
        return m
    if shape == "ring":
        return _disk(h, w, cy, cx, r) & ~_disk(h, w, cy, cx, r * 0.55)
    if shape == "bar":
        m = np.zeros((h, w), dtype=bool)
        t = max(r // 3, 2)
        m[max(cy - t, 0) : cy + t, max(cx - r, 0) : cx + r] = True
        return m
    if shape == "cross":
        m = np.zeros((h, w), dtype=bool)
        t = max(r // 3, 2)
        m[max(cy - t, 0) : cy + t, max(cx - r, 0) : cx + r] = True
        m[max(cy - r, 0) : cy + r, max(cx - t, 0) : cx + t] = True
        return m
    if shape == "triangle":
        yy, xx = np.mgrid[0:h, 0:w]
        inside = (yy >= cy - r) & (yy <= cy + r) & (xx >= cx - r) & (xx <= cx + r)
        return inside & ((xx - (cx - r)) <= (yy - (cy - r)))
    raise InvalidInput(f"unknown shape category {shape!r}")


def synth_image(
    rng: np.random.Generator, size: int = 64
) -> tuple[np.ndarray, List[np.ndarray], List[str]]:
    """Render one two-region image.

    Returns ``(pixels, masks, categories)`` where ``pixels`` is uint8 RGB
    ``size x size x 3``, and the two boolean masks are guaranteed disjoint
    (one shape per image half) and non-empty.
    """
    h = w = size
    idx = rng.choice(len(SHAPE_CATEGORIES), size=2, replace=False)
    cats = [SHAPE_CATEGORIES[i] for i in idx]
    base = rng.integers(95, 125)
    pixels = np.full((h, w), base, dtype=np.float64)
    pixels += rng.normal(0.0, 6.0, size=(h, w))
    masks: List[np.ndarray] = []
    for half, cat in enumerate(cats):
        r = int(rng.integers(6, max(size // 6, 8)))
        lo = half * (w // 2) + r + 1
        hi = (half + 1) * (w // 2) - r - 1
        cx = int(rng.integers(lo, max(hi, lo + 1)))
        cy = int(rng.integers(r + 1, h - r - 1))
        m = _shape_mask(cat, h, w, cy, cx, r)
        # Clip to the half so the two regions can never touch.
        m[:, : half * (w // 2)] = False
        m[:, (half + 1) * (w // 2) :] = False
        if not m.any():  # pragma: no cover - placement always leaves pixels
            m[cy, cx] = True
        level = _SHAPE_LEVELS[cat] + rng.normal(0.0, 3.0)
        pixels[m] = level + rng.normal(0.0, 4.0, size=int(m.sum()))
        masks.append(m)
    pixels = np.clip(pixels, 0, 255).astype(np.uint8)
    return np.repeat(pixels[:, :, None], 3, axis=2), masks, cats


def write_png(path: str, pixels: np.ndarray) -> None:
    Image.fromarray(pixels, mode="RGB").save(path, format="PNG")


def default_embedder(cfg: EncoderConfig, seed: int) -> Callable[[str], np.ndarray]:
    """Frozen bag-of-tokens text embedder used by the dedup gate."""
    torch.manual_seed(seed)
    enc = TextEncoder(cfg)

    def embed(caption: str) -> np.ndarray:
        seq = tokenize(caption, cfg)
        with torch.no_grad():
            vec = enc.encode(seq)
        return vec.numpy().astype(np.float64)

    return embed


def generate_dataset(
    out_dir: str,
    n_images: int = 50,
    image_size: int = 64,
    seed: int = 2025,
    n_captions: int = 3,
    cfg: Optional[EncoderConfig] = None,
    embed: Optional[Callable[[str], np.ndarray]] = None,
) -> List[RegionRecord]:
    """Render an archive, explode it into region records, caption, QC, write.

    Creates ``out_dir/images/*.png`` and ``out_dir/manifest.jsonl``; returns
    the retained records. Deterministic for a fixed seed.
    """
    if n_images < 1:
        raise InvalidInput("n_images must be >= 1")
    if cfg is None:
        cfg = EncoderConfig(image_size=image_size)
    else:
        image_size = cfg.image_size
    if embed is None:
        embed = default_embedder(cfg, seed)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    records: List[RegionRecord] = []
    for i in range(n_images):
        pixels, masks, cats = synth_image(rng, image_size)
        rel = os.path.join("images", f"img_{i:05d}.png")
        write_png(os.path.join(out_dir, rel), pixels)
        modality = _MODALITIES[i % len(_MODALITIES)]
        base = explode_image(rel, masks, cats, modality)
        for j, rec in enumerate(base):
            rid = f"{i:05d}_{j}"
            caption_record(
                rec, embed, n_captions=n_captions, variant_base=record_seed(seed, rid)
            )
            if not rec.captions:
                logger.warning("record %s lost all captions to QC; dropped", rid)
                continue
            records.append(rec)
    write_manifest(records, os.path.join(out_dir, "manifest.jsonl"))
    return records


def class_prompt_templates(categories: Sequence[str]) -> Dict[str, List[str]]:
    """Caption-style text prompts per class for zero-shot scoring."""
    out: Dict[str, List[str]] = {}
    for cat in categories:
        out[cat] = [
            f"a scan image shows the {cat}.",
            f"the highlighted region is a {cat}.",
            f"this region of the image contains a {cat}.",
        ]
    return out
