"""Region-record synthesis pipeline.

Explodes mask-annotated images into per-region records, fills caption
templates from mask statistics, runs quality control (required-element
check, semantic dedup against the record's retained captions), samples
training prompts, and round-trips line-delimited JSON manifests.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import InvalidInput, ParseError
from .prompts import PromptKind, SpatialPrompt, rle_decode, rle_encode

logger = logging.getLogger(__name__)

DEDUP_THRESHOLD = 0.9

LOCATION_ROWS = ("upper", "middle", "lower")
LOCATION_COLS = ("left", "center", "right")

# Size and shape descriptor thresholds (area fraction, bbox extent ratio).
SIZE_RULES = (("large", 0.1), ("medium", 0.02), ("small", 0.0))
SHAPE_RULES = (("round", 1.2), ("oval", 2.0), ("elongated", float("inf")))

# Half the templates omit the location slot on purpose: retrieval on those
# captions can only succeed by reading what is inside the region, not where
# it sits, which keeps the category signal trainable.
CAPTION_TEMPLATES = (
    "The {modality} image {verb} the {size} {category} in the {location} {region_word} {mask_phrase}.",
    "A {modality} scan with the {category} {mask_phrase}.",
    "The {size}, {shape} {category} occupies the {location} {region_word} of this {modality} image.",
    "This {modality} image contains a {shape} {category} {mask_phrase}.",
    "In the {location} {region_word} of the {modality} image, the mask outlines the {size} {category}.",
    "The {modality} view {verb} a {shape}, {size} {category} confined to the {location} {region_word}.",
    "A {size} {category} is marked on this {modality} acquisition.",
    "The annotated {category} appears {shape} and {size} in the {modality} image.",
)

# Synonym tables; variant_seed indexes them in mixed radix, so seed 0 picks
# the first entry of every table.
SYNONYMS = {
    "verb": ("shows", "displays", "reveals"),
    "region_word": ("region", "area", "zone"),
    "mask_phrase": (
        "highlighted by the overlaid mask",
        "outlined by the mask",
        "covered by the mask overlay",
    ),
}


@dataclass
class MaskStats:
    """Geometry summary of a binary region mask (normalized coordinates)."""

    area_fraction: float
    centroid: tuple[float, float]
    bbox: tuple[float, float, float, float]
    elongation: float
    location_bucket: str


@dataclass
class RegionRecord:
    """One (image, region mask, category) training atom with its captions."""

    image_ref: str
    mask: np.ndarray
    category: str
    modality: str
    captions: list[str] = field(default_factory=list)
    stats: MaskStats | None = None


@dataclass
class DedupDecision:
    max_similarity: float
    accepted: bool
    threshold: float = DEDUP_THRESHOLD
    regeneration_count: int = 0


@dataclass
class QCResult:
    passed: bool
    missing: list[str]


@dataclass(frozen=True)
class ElementRegistry:
    """Known keyword sets driving the required-element check."""

    modalities: frozenset[str]
    categories: frozenset[str]
    locations: frozenset[str]

    def with_categories(self, extra: Iterable[str]) -> "ElementRegistry":
        return ElementRegistry(
            modalities=self.modalities,
            categories=self.categories | {c.lower() for c in extra},
            locations=self.locations,
        )


def _bucket_names() -> frozenset[str]:
    names = set()
    for r in LOCATION_ROWS:
        for c in LOCATION_COLS:
            names.add("center" if (r, c) == ("middle", "center") else f"{r}-{c}")
    return frozenset(names)


DEFAULT_REGISTRY = ElementRegistry(
    modalities=frozenset(
        {"ct", "mri", "x-ray", "xray", "ultrasound", "fundus", "pet", "scan"}
    ),
    categories=frozenset(
        {
            "liver", "kidney", "spleen", "pancreas", "lung", "heart",
            "tumor", "lesion", "cyst", "nodule",
            "disk", "square", "ring", "bar", "cross", "triangle",
        }
    ),
    locations=_bucket_names(),
)


def mask_stats(mask: np.ndarray) -> MaskStats:
    """Area, centroid, tight bbox, extent ratio, and 3×3 location bucket."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise InvalidInput(f"expected H×W mask, got shape {m.shape}")
    rows, cols = np.nonzero(m)
    if rows.size == 0:
        raise InvalidInput("mask has no true pixels")
    h, w = m.shape
    r0, r1 = int(rows.min()), int(rows.max())
    c0, c1 = int(cols.min()), int(cols.max())
    cx = (float(cols.mean()) + 0.5) / w
    cy = (float(rows.mean()) + 0.5) / h
    extent_w = c1 - c0 + 1
    extent_h = r1 - r0 + 1
    elongation = max(extent_w, extent_h) / min(extent_w, extent_h)
    row_name = LOCATION_ROWS[min(int(cy * 3), 2)]
    col_name = LOCATION_COLS[min(int(cx * 3), 2)]
    bucket = "center" if (row_name, col_name) == ("middle", "center") else f"{row_name}-{col_name}"
    return MaskStats(
        area_fraction=rows.size / (h * w),
        centroid=(cx, cy),
        bbox=(c0 / w, r0 / h, (c1 + 1) / w, (r1 + 1) / h),
        elongation=elongation,
        location_bucket=bucket,
    )


def explode_image(
    image_ref: str,
    masks: list[np.ndarray],
    labels: list[str],
    modality: str = "CT",
) -> list[RegionRecord]:
    """One record per non-empty mask; empty masks are skipped with a warning."""
    if len(masks) != len(labels):
        raise InvalidInput(
            f"{len(masks)} masks but {len(labels)} labels for {image_ref}"
        )
    if not masks:
        raise InvalidInput(f"no masks supplied for {image_ref}")
    records = []
    for mask, label in zip(masks, labels):
        if not np.asarray(mask, dtype=bool).any():
            logger.warning("skipping empty mask %r in %s", label, image_ref)
            continue
        records.append(
            RegionRecord(
                image_ref=image_ref,
                mask=np.asarray(mask, dtype=bool),
                category=label,
                modality=modality,
                stats=mask_stats(mask),
            )
        )
    return records


def size_descriptor(area_fraction: float) -> str:
    for name, threshold in SIZE_RULES:
        if area_fraction >= threshold:
            return name
    return SIZE_RULES[-1][0]


def shape_descriptor(elongation: float) -> str:
    for name, threshold in SHAPE_RULES:
        if elongation <= threshold:
            return name
    return SHAPE_RULES[-1][0]


def synth_caption(record: RegionRecord, template_id: int, variant_seed: int = 0) -> str:
    """Deterministic slot fill of one caption template.

    variant_seed selects synonyms in mixed radix over the synonym tables;
    seed 0 is the canonical (first-synonym) rendering.
    """
    if not 0 <= template_id < len(CAPTION_TEMPLATES):
        raise InvalidInput(f"unknown template id {template_id}")
    stats = record.stats if record.stats is not None else mask_stats(record.mask)
    slots = {
        "modality": record.modality,
        "category": record.category,
        "location": stats.location_bucket,
        "size": size_descriptor(stats.area_fraction),
        "shape": shape_descriptor(stats.elongation),
    }
    remainder = int(variant_seed)
    for key in ("verb", "region_word", "mask_phrase"):
        options = SYNONYMS[key]
        slots[key] = options[remainder % len(options)]
        remainder //= len(options)
    return CAPTION_TEMPLATES[template_id].format(**slots)


def qc_required_elements(
    caption: str, registry: ElementRegistry = DEFAULT_REGISTRY
) -> QCResult:
    """Keyword check: a known modality plus a known category or location."""
    words = {w.strip(".,;:!?()\"'") for w in caption.lower().split()}
    missing = []
    if not words & registry.modalities:
        missing.append("modality")
    if not words & (registry.categories | registry.locations):
        missing.append("category")
    return QCResult(passed=not missing, missing=missing)


def qc_dedup(
    candidate: str,
    corpus: list[str],
    embed: Callable[[str], np.ndarray],
    threshold: float = DEDUP_THRESHOLD,
) -> DedupDecision:
    """Max cosine similarity of the candidate against the corpus.

    Empty corpus accepts with max_similarity = -1; similarity strictly above
    the threshold rejects.
    """
    if not corpus:
        return DedupDecision(max_similarity=-1.0, accepted=True, threshold=threshold)
    v = np.asarray(embed(candidate), dtype=np.float64)
    v = v / np.linalg.norm(v)
    best = -1.0
    for other in corpus:
        u = np.asarray(embed(other), dtype=np.float64)
        u = u / np.linalg.norm(u)
        best = max(best, float(v @ u))
    return DedupDecision(max_similarity=best, accepted=best <= threshold, threshold=threshold)


def caption_record(
    record: RegionRecord,
    embed: Callable[[str], np.ndarray],
    n_captions: int = 3,
    max_retries: int = 8,
    variant_base: int = 0,
    keep_flagged: bool = False,
) -> list[DedupDecision]:
    """Fill ``record.captions`` with up to n_captions deduplicated captions.

    Each slot cycles through templates and synonym variants until a candidate
    passes both QC gates.  When retries are exhausted, the least-similar
    candidate is either dropped (default, so manifests keep the pairwise
    similarity bound) or kept with accepted=False when ``keep_flagged``.
    """
    decisions: list[DedupDecision] = []
    record.captions = []
    for slot in range(n_captions):
        best_caption = None
        best_decision = None
        for attempt in range(max_retries):
            template_id = (slot + attempt) % len(CAPTION_TEMPLATES)
            variant = variant_base + slot * max_retries + attempt
            candidate = synth_caption(record, template_id, variant)
            if candidate in record.captions:
                continue
            if not qc_required_elements(candidate).passed:
                continue
            decision = qc_dedup(candidate, record.captions, embed)
            decision.regeneration_count = attempt
            if decision.accepted:
                best_caption, best_decision = candidate, decision
                break
            if best_decision is None or decision.max_similarity < best_decision.max_similarity:
                best_caption, best_decision = candidate, decision
        if best_decision is None:
            continue
        if best_decision.accepted or keep_flagged:
            record.captions.append(best_caption)
        decisions.append(best_decision)
    return decisions


def record_seed(master_seed: int, record_id: str | int) -> int:
    """Stable per-record seed derived from the master seed."""
    h = 0xCBF29CE484222325
    for b in f"{master_seed}:{record_id}".encode("utf-8"):
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h % (2**32)


PROMPT_KINDS = (
    PromptKind.POINTS,
    PromptKind.BOX,
    PromptKind.MASK,
    PromptKind.POINTS_AND_BOX,
)
PROMPT_PROBS = (0.3, 0.3, 0.3, 0.1)
DISCARD_PROB = 0.1
BOX_JITTER = 0.05


def _sample_points(
    mask: np.ndarray, rng: np.random.Generator, n: int
) -> list[tuple[float, float]]:
    coords = np.argwhere(mask)
    h, w = mask.shape
    picks = rng.integers(0, len(coords), size=n)
    return [
        ((int(c) + 0.5) / w, (int(r) + 0.5) / h) for r, c in coords[picks]
    ]


def _sample_box(
    mask: np.ndarray, rng: np.random.Generator, jitter: float
) -> tuple[float, float, float, float]:
    x0, y0, x1, y1 = mask_stats(mask).bbox
    bw, bh = x1 - x0, y1 - y0
    deltas = rng.uniform(-1.0, 1.0, size=4) * jitter
    x0 = float(np.clip(x0 + deltas[0] * bw, 0.0, 1.0))
    y0 = float(np.clip(y0 + deltas[1] * bh, 0.0, 1.0))
    x1 = float(np.clip(x1 + deltas[2] * bw, 0.0, 1.0))
    y1 = float(np.clip(y1 + deltas[3] * bh, 0.0, 1.0))
    return (x0, y0, x1, y1)


def sample_training_prompt(
    mask: np.ndarray,
    rng: np.random.Generator,
    discard_prob: float = DISCARD_PROB,
    jitter: float = BOX_JITTER,
) -> SpatialPrompt:
    """Draw one training prompt for a region.

    A Bernoulli(discard_prob) gate first decides to discard the prompt
    entirely; otherwise the kind is drawn from
    {points, box, mask, points+box} with probabilities (0.3, 0.3, 0.3, 0.1).
    Points are 1-3 uniform pixels inside the mask; boxes are the tight bbox
    with per-side jitter up to ``jitter`` of the side length.
    """
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise InvalidInput("cannot sample a prompt from an empty mask")
    if rng.random() < discard_prob:
        return SpatialPrompt(kind=PromptKind.NONE)
    kind = PROMPT_KINDS[rng.choice(len(PROMPT_KINDS), p=PROMPT_PROBS)]
    if kind is PromptKind.POINTS:
        n = int(rng.integers(1, 4))
        return SpatialPrompt(kind=kind, points=_sample_points(m, rng, n))
    if kind is PromptKind.BOX:
        return SpatialPrompt(kind=kind, box=_sample_box(m, rng, jitter))
    if kind is PromptKind.MASK:
        return SpatialPrompt(kind=kind, mask=m)
    n = int(rng.integers(1, 4))
    return SpatialPrompt(
        kind=kind,
        points=_sample_points(m, rng, n),
        box=_sample_box(m, rng, jitter),
    )


# --- manifest IO ------------------------------------------------------------

def record_to_json(record: RegionRecord) -> dict:
    stats = record.stats if record.stats is not None else mask_stats(record.mask)
    return {
        "image": record.image_ref,
        "mask_rle": rle_encode(record.mask),
        "category": record.category,
        "modality": record.modality,
        "captions": list(record.captions),
        "stats": {
            "area_fraction": stats.area_fraction,
            "centroid": list(stats.centroid),
            "bbox": list(stats.bbox),
            "elongation": stats.elongation,
            "bucket": stats.location_bucket,
        },
    }


def record_from_json(d: dict) -> RegionRecord:
    stats = d["stats"]
    return RegionRecord(
        image_ref=d["image"],
        mask=rle_decode(d["mask_rle"]),
        category=d["category"],
        modality=d["modality"],
        captions=list(d["captions"]),
        stats=MaskStats(
            area_fraction=float(stats["area_fraction"]),
            centroid=tuple(stats["centroid"]),
            bbox=tuple(stats["bbox"]),
            elongation=float(stats["elongation"]),
            location_bucket=stats["bucket"],
        ),
    )


def write_manifest(records: list[RegionRecord], path) -> None:
    """Line-delimited JSON, one record per line."""
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record_to_json(record), sort_keys=True))
            f.write("\n")


def read_manifest(path) -> list[RegionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for i, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(record_from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ParseError(f"malformed manifest record: {e}", line=i) from e
    return records
