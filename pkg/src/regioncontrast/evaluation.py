"""Evaluation harness: zero-shot classification, retrieval, and studies."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import ndimage

from .datagen import RegionRecord
from .encoders import ImageSample, load_image
from .errors import InvalidInput
from .fusion import attention_map
from .model import RegionTextModel
from .prompts import PromptKind, SpatialPrompt, none_prompt

logger = logging.getLogger(__name__)

EVAL_MODES = ("none", "point", "box", "both", "mask")


def center_point(mask: np.ndarray) -> Tuple[float, float]:
    """Most interior pixel of the mask, as normalized (x, y).

    Uses the Euclidean distance transform so the point never lands outside a
    concave region the way a centroid can.
    """
    if mask.ndim != 2 or not mask.any():
        raise InvalidInput("mask must be a non-empty 2-D boolean array")
    dist = ndimage.distance_transform_edt(mask)
    r, c = np.unravel_index(int(np.argmax(dist)), mask.shape)
    h, w = mask.shape
    return ((c + 0.5) / w, (r + 0.5) / h)


def tight_box(mask: np.ndarray) -> Tuple[float, float, float, float]:
    if mask.ndim != 2 or not mask.any():
        raise InvalidInput("mask must be a non-empty 2-D boolean array")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    h, w = mask.shape
    return (cols[0] / w, rows[0] / h, (cols[-1] + 1) / w, (rows[-1] + 1) / h)


def deterministic_prompt(mask: np.ndarray, mode: str) -> SpatialPrompt:
    """Reproducible prompt for evaluation; no randomness involved."""
    if mode == "none":
        return none_prompt()
    if mode == "point":
        return SpatialPrompt(kind=PromptKind.POINTS, points=[center_point(mask)])
    if mode == "box":
        return SpatialPrompt(kind=PromptKind.BOX, box=tight_box(mask))
    if mode == "both":
        return SpatialPrompt(
            kind=PromptKind.POINTS_AND_BOX,
            points=[center_point(mask)],
            box=tight_box(mask),
        )
    if mode == "mask":
        return SpatialPrompt(kind=PromptKind.MASK, mask=mask.copy())
    raise InvalidInput(f"unknown eval mode {mode!r}; expected one of {EVAL_MODES}")


@dataclass(frozen=True)
class ClassPromptSet:
    """Named set of text prompts per class for zero-shot scoring."""

    prompts: Dict[str, Tuple[str, ...]]

    def __post_init__(self) -> None:
        if not self.prompts:
            raise InvalidInput("class prompt set must not be empty")
        for name, texts in self.prompts.items():
            if not texts:
                raise InvalidInput(f"class {name!r} has no prompts")

    @classmethod
    def from_dict(cls, d: Dict[str, Sequence[str]]) -> "ClassPromptSet":
        return cls({k: tuple(v) for k, v in d.items()})

    @property
    def classes(self) -> List[str]:
        return sorted(self.prompts)


def ensemble_text_embedding(model: RegionTextModel, texts: Sequence[str]) -> torch.Tensor:
    """Mean of the unit text embeddings, renormalized back to the sphere."""
    embs = model.embed_texts(list(texts))
    mean = embs.mean(dim=0)
    norm = mean.norm()
    if float(norm) < 1e-12:
        raise InvalidInput("prompt ensemble collapsed to the zero vector")
    return mean / norm


def class_embedding_matrix(
    model: RegionTextModel, prompt_set: ClassPromptSet
) -> Tuple[List[str], torch.Tensor]:
    names = prompt_set.classes
    rows = [ensemble_text_embedding(model, prompt_set.prompts[n]) for n in names]
    return names, torch.stack(rows)


def _rank_classes(names: Sequence[str], scores: np.ndarray) -> List[str]:
    return [names[i] for i in sorted(range(len(names)), key=lambda i: (-scores[i], names[i]))]


def zero_shot_classify(
    model: RegionTextModel,
    sample: ImageSample,
    prompt: SpatialPrompt,
    prompt_set: ClassPromptSet,
) -> Tuple[str, Dict[str, float]]:
    """Predict a class for the prompted region.

    Ties resolve to the lexicographically smallest class name so repeated
    runs can never disagree.
    """
    names, mat = class_embedding_matrix(model, prompt_set)
    emb, _ = model.embed_sample(sample, prompt)
    scores = (mat @ emb).numpy()
    best = names[0]
    best_score = scores[0]
    for name, score in zip(names[1:], scores[1:]):
        if score > best_score:
            best, best_score = name, score
    return best, {n: float(s) for n, s in zip(names, scores)}


def region_retrieval(
    model: RegionTextModel,
    sample: ImageSample,
    prompt: SpatialPrompt,
    candidates: Sequence[str],
    k: int = 5,
) -> List[Dict[str, object]]:
    """Rank candidate captions for the prompted region.

    Confidence is a softmax over the scaled similarities of *all* candidates,
    so the full ranking's confidences always sum to one.
    """
    if not candidates:
        raise InvalidInput("candidates must not be empty")
    if k < 1:
        raise InvalidInput("k must be >= 1")
    emb, _ = model.embed_sample(sample, prompt)
    texts = model.embed_texts(list(candidates))
    cos = (texts @ emb).numpy().astype(np.float64)
    logits = model.logit_scale.value * cos
    z = np.exp(logits - logits.max())
    conf = z / z.sum()
    order = sorted(range(len(candidates)), key=lambda i: (-cos[i], candidates[i]))
    return [
        {
            "text": candidates[i],
            "score": float(cos[i]),
            "confidence": float(conf[i]),
        }
        for i in order[: min(k, len(candidates))]
    ]


@dataclass
class MetricsReport:
    n: int
    top1: float
    top5: float
    macro_recall: float
    per_class: Dict[str, Dict[str, float]]
    mode: str

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def eval_manifest(
    model: RegionTextModel,
    records: Sequence[RegionRecord],
    image_root: str,
    prompt_set: ClassPromptSet,
    mode: str = "point",
    out_dir: Optional[str] = None,
) -> Tuple[MetricsReport, List[dict]]:
    """Zero-shot classify every record under one deterministic prompt mode."""
    if mode not in EVAL_MODES:
        raise InvalidInput(f"unknown eval mode {mode!r}; expected one of {EVAL_MODES}")
    records = list(records)
    if not records:
        raise InvalidInput("cannot evaluate an empty manifest")
    names, mat = class_embedding_matrix(model, prompt_set)
    sample_cache: Dict[str, ImageSample] = {}
    predictions: List[dict] = []
    correct = 0
    top5_correct = 0
    per_class: Dict[str, Dict[str, float]] = {}
    for i, rec in enumerate(records):
        sample = sample_cache.get(rec.image_ref)
        if sample is None:
            sample = load_image(os.path.join(image_root, rec.image_ref)).normalize()
            sample_cache[rec.image_ref] = sample
        prompt = deterministic_prompt(rec.mask, mode)
        emb, _ = model.embed_sample(sample, prompt)
        scores = (mat @ emb).numpy()
        ranked = _rank_classes(names, scores)
        pred = ranked[0]
        top5 = ranked[:5]
        hit = pred == rec.category
        correct += hit
        top5_correct += rec.category in top5
        stats = per_class.setdefault(rec.category, {"support": 0, "correct": 0})
        stats["support"] += 1
        stats["correct"] += hit
        predictions.append(
            {
                "record_id": f"r{i:05d}",
                "true": rec.category,
                "pred": pred,
                "top5": top5,
                "score": float(max(scores)),
            }
        )
    for stats in per_class.values():
        stats["recall"] = stats["correct"] / stats["support"]
    recalls = [s["recall"] for s in per_class.values()]
    report = MetricsReport(
        n=len(records),
        top1=correct / len(records),
        top5=top5_correct / len(records),
        macro_recall=float(np.mean(recalls)),
        per_class=per_class,
        mode=mode,
    )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"metrics_{mode}.json"), "w") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        with open(
            os.path.join(out_dir, f"predictions_{mode}.csv"), "w", newline=""
        ) as fh:
            writer = csv.writer(fh)
            writer.writerow(["record_id", "true", "pred", "top5", "score"])
            for p in predictions:
                writer.writerow(
                    [
                        p["record_id"],
                        p["true"],
                        p["pred"],
                        "|".join(p["top5"]),
                        f"{p['score']:.6f}",
                    ]
                )
    return report, predictions


def subsample_indices(n: int, fraction: float, seed: int) -> List[int]:
    """Seeded subset of ``range(n)``, returned sorted.

    Sorting keeps the original record order, so a fraction of 1.0 reproduces
    the unsubsampled run bit for bit.
    """
    if not 0 < fraction <= 1:
        raise InvalidInput("fraction must be in (0, 1]")
    keep = int(np.floor(fraction * n))
    if keep < 2:
        raise InvalidInput(f"fraction {fraction} keeps {keep} records; need >= 2")
    perm = np.random.default_rng(seed).permutation(n)
    return sorted(int(i) for i in perm[:keep])


def scaling_study(
    records: Sequence[RegionRecord],
    image_root: str,
    fractions: Sequence[float],
    train_cfg,
    enc_cfg,
    prompt_set: ClassPromptSet,
    mode: str = "point",
    eval_records: Optional[Sequence[RegionRecord]] = None,
) -> List[dict]:
    """Retrain from scratch on nested-seed subsets of the manifest."""
    from .training import fit  # local import to avoid a cycle

    records = list(records)
    rows: List[dict] = []
    for fraction in fractions:
        idx = subsample_indices(len(records), fraction, train_cfg.seed)
        subset = [records[i] for i in idx]
        model = RegionTextModel.build(enc_cfg, seed=train_cfg.seed)
        result = fit(model, subset, image_root, train_cfg)
        report, _ = eval_manifest(
            model, eval_records if eval_records is not None else records,
            image_root, prompt_set, mode=mode,
        )
        logger.info(
            "scaling fraction=%.3f n=%d top1=%.3f", fraction, len(subset), report.top1
        )
        rows.append(
            {
                "fraction": float(fraction),
                "n_train": len(subset),
                "steps": result.steps,
                "final_loss": result.final_loss,
                "top1": report.top1,
                "top5": report.top5,
                "macro_recall": report.macro_recall,
            }
        )
    return rows


def unfreeze_study(
    records: Sequence[RegionRecord],
    image_root: str,
    block_counts: Sequence[int],
    train_cfg,
    enc_cfg,
    prompt_set: ClassPromptSet,
    mode: str = "point",
) -> List[dict]:
    """Sweep how many trailing image-encoder blocks are trainable."""
    from .training import fit

    rows: List[dict] = []
    for k in block_counts:
        cfg_k = dataclasses.replace(train_cfg, trainable_blocks=int(k))
        model = RegionTextModel.build(enc_cfg, seed=cfg_k.seed)
        model.set_trainable_blocks(int(k))
        n_trainable = sum(p.numel() for _, p in model.trainable_parameters())
        result = fit(model, records, image_root, cfg_k)
        report, _ = eval_manifest(model, records, image_root, prompt_set, mode=mode)
        logger.info("unfreeze k=%d top1=%.3f", k, report.top1)
        rows.append(
            {
                "trainable_blocks": int(k),
                "n_trainable_params": int(n_trainable),
                "final_loss": result.final_loss,
                "top1": report.top1,
                "top5": report.top5,
                "macro_recall": report.macro_recall,
            }
        )
    return rows


def export_embeddings(
    model: RegionTextModel,
    records: Sequence[RegionRecord],
    image_root: str,
    out_path: str,
    mode: str = "point",
) -> dict:
    """Write per-record region embeddings to an ``.npz`` archive."""
    records = list(records)
    if not records:
        raise InvalidInput("no records to export")
    cache: Dict[str, ImageSample] = {}
    ids, cats, rows = [], [], []
    for i, rec in enumerate(records):
        sample = cache.get(rec.image_ref)
        if sample is None:
            sample = load_image(os.path.join(image_root, rec.image_ref)).normalize()
            cache[rec.image_ref] = sample
        prompt = deterministic_prompt(rec.mask, mode)
        emb, _ = model.embed_sample(sample, prompt)
        ids.append(f"r{i:05d}")
        cats.append(rec.category)
        rows.append(emb.numpy())
    arr = np.stack(rows)
    np.savez(
        out_path,
        ids=np.array(ids),
        categories=np.array(cats),
        embeddings=arr,
        mode=np.array(mode),
    )
    return {"n": len(ids), "dim": int(arr.shape[1]), "path": out_path}


def export_attention(
    model: RegionTextModel,
    sample: ImageSample,
    prompt: SpatialPrompt,
    out_path: Optional[str] = None,
) -> np.ndarray:
    """Region-to-patch attention as an image-sized heatmap in [0, 1]."""
    from PIL import Image

    _, trace = model.embed_sample(sample, prompt)
    grid = model.cfg.grid
    heat = attention_map(trace, grid)
    scale = model.cfg.patch_size
    up = np.kron(heat, np.ones((scale, scale)))
    if out_path is not None:
        Image.fromarray((up * 255).astype(np.uint8), mode="L").save(out_path)
    return up
