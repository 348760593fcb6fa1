"""Training loop, learning-rate schedule, and checkpoint serialization."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .datagen import RegionRecord, sample_training_prompt
from .encoders import EncoderConfig, ImageSample, load_image
from .errors import CorruptCheckpoint, InvalidInput, NumericalError
from .model import RegionTextModel
from .prompts import SpatialPrompt

logger = logging.getLogger(__name__)

_MAGIC_HEADER_LIMIT = 1 << 24  # sanity cap on the JSON header size (16 MiB)

_DTYPES = {
    "float32": (np.float32, torch.float32),
    "float64": (np.float64, torch.float64),
    "int64": (np.int64, torch.int64),
    "int32": (np.int32, torch.int32),
    "uint8": (np.uint8, torch.uint8),
    "bool": (np.bool_, torch.bool),
}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 150
    base_lr: float = 1e-2
    weight_decay: float = 1e-2
    betas: Tuple[float, float] = (0.9, 0.999)
    milestones: Tuple[int, ...] = (25, 50, 75, 90, 120)
    gamma: float = 0.1
    warmup_steps: int = 800
    seed: int = 2025
    trainable_blocks: int = 4
    augment: bool = True

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise InvalidInput("batch_size must be >= 2 for the contrastive objective")
        if self.epochs < 1:
            raise InvalidInput("epochs must be >= 1")
        if self.base_lr <= 0:
            raise InvalidInput("base_lr must be positive")
        if self.warmup_steps < 0:
            raise InvalidInput("warmup_steps must be >= 0")
        if not 0 < self.gamma <= 1:
            raise InvalidInput("gamma must be in (0, 1]")
        if any(m <= 0 for m in self.milestones) or list(self.milestones) != sorted(
            set(self.milestones)
        ):
            raise InvalidInput("milestones must be strictly increasing positive ints")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kw = dict(d)
        if "betas" in kw:
            kw["betas"] = tuple(kw["betas"])
        if "milestones" in kw:
            kw["milestones"] = tuple(kw["milestones"])
        return cls(**kw)


def lr_at(cfg: TrainConfig, step: int, epoch: int) -> float:
    """Learning rate for global ``step`` during 0-based ``epoch``.

    Linear warmup ``base_lr * step / warmup_steps`` for the first
    ``warmup_steps`` updates, then a step decay that multiplies by ``gamma``
    once for every milestone the current epoch has reached.
    """
    if step < 0 or epoch < 0:
        raise InvalidInput("step and epoch must be non-negative")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    hits = sum(1 for m in cfg.milestones if epoch >= m)
    return cfg.base_lr * (cfg.gamma**hits)


def make_optimizer(model: RegionTextModel, cfg: TrainConfig) -> torch.optim.AdamW:
    params = [p for _, p in model.trainable_parameters()]
    if not params:
        raise InvalidInput("model has no trainable parameters")
    return torch.optim.AdamW(
        params, lr=cfg.base_lr, betas=cfg.betas, weight_decay=cfg.weight_decay
    )


def train_step(
    model: RegionTextModel,
    optimizer: torch.optim.Optimizer,
    images: torch.Tensor,
    prompts: Sequence[SpatialPrompt],
    captions: Sequence[str],
    lr: float,
    step: int = 0,
) -> float:
    """One optimizer update; returns the scalar loss."""
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    loss, sim = model.contrastive_loss(images, prompts, captions)
    if not torch.isfinite(loss):
        with torch.no_grad():
            lo = float(sim.logits.min())
            hi = float(sim.logits.max())
        raise NumericalError(
            f"non-finite loss at step {step}: logits in [{lo:.3g}, {hi:.3g}], "
            f"scale={sim.scale:.3g}"
        )
    loss.backward()
    optimizer.step()
    model.logit_scale.clamp_()
    return float(loss.detach())


@dataclass
class FitResult:
    steps: int
    epochs: int
    final_loss: float
    history: List[Tuple[int, int, float, float]] = field(default_factory=list)
    checkpoint_path: Optional[str] = None
    history_path: Optional[str] = None


def _augment(img: torch.Tensor, rng: np.random.Generator, enabled: bool) -> torch.Tensor:
    # Global intensity jitter on already-standardized pixels. Both draws
    # always consume rng state so toggling one never shifts the other.
    do_scale = rng.random() < 0.5
    scale = rng.uniform(0.9, 1.1)
    do_shift = rng.random() < 0.5
    shift = rng.uniform(-0.1, 0.1)
    if not enabled:
        return img
    out = img
    if do_scale:
        out = out * scale
    if do_shift:
        out = out + shift
    return out


class _ImageCache:
    def __init__(self, root: str, cfg: EncoderConfig) -> None:
        self.root = root
        self.cfg = cfg
        self._store: Dict[str, torch.Tensor] = {}

    def get(self, rel_path: str) -> torch.Tensor:
        hit = self._store.get(rel_path)
        if hit is None:
            sample = load_image(os.path.join(self.root, rel_path))
            hit = torch.from_numpy(
                sample.normalize().pixels.transpose(2, 0, 1).copy()
            )
            self._store[rel_path] = hit
        return hit


def fit(
    model: RegionTextModel,
    records: Sequence[RegionRecord],
    image_root: str,
    cfg: TrainConfig,
    out_dir: Optional[str] = None,
    log_every: int = 50,
) -> FitResult:
    """Train ``model`` on a captioned manifest.

    Per step: seeded shuffle order, one sampled prompt and one sampled
    caption per record, optional intensity augmentation, AdamW update under
    :func:`lr_at`, then projection of the temperature back to its cap.
    Writes ``loss_history.csv`` and ``checkpoint.ckpt`` under ``out_dir``.
    """
    records = list(records)
    if len(records) < 2:
        raise InvalidInput("need at least 2 records to train")
    for rec in records:
        if not rec.captions:
            raise InvalidInput(f"record for {rec.image_ref!r} has no captions")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model.set_trainable_blocks(cfg.trainable_blocks)
    model.train()
    optimizer = make_optimizer(model, cfg)
    cache = _ImageCache(image_root, model.cfg)
    masks = [np.asarray(r.mask, dtype=bool) for r in records]

    history: List[Tuple[int, int, float, float]] = []
    step = 0
    loss_val = float("nan")
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(records))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            images, prompts, captions = [], [], []
            for i in idx:
                rec = records[i]
                images.append(_augment(cache.get(rec.image_ref), rng, cfg.augment))
                prompts.append(sample_training_prompt(masks[i], rng))
                captions.append(rec.captions[int(rng.integers(len(rec.captions)))])
            lr = lr_at(cfg, step, epoch)
            loss_val = train_step(
                model, optimizer, torch.stack(images), prompts, captions, lr, step
            )
            history.append((step, epoch, lr, loss_val))
            if log_every and step % log_every == 0:
                logger.info(
                    "step=%d epoch=%d lr=%.2e loss=%.4f", step, epoch, lr, loss_val
                )
            step += 1

    result = FitResult(steps=step, epochs=cfg.epochs, final_loss=loss_val, history=history)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        result.history_path = os.path.join(out_dir, "loss_history.csv")
        write_loss_history(result.history_path, history)
        result.checkpoint_path = os.path.join(out_dir, "checkpoint.ckpt")
        save_checkpoint(
            model,
            result.checkpoint_path,
            metadata={
                "step": step,
                "epochs": cfg.epochs,
                "final_loss": loss_val,
                "train_config": cfg.to_dict(),
            },
        )
    model.eval()
    return result


def write_loss_history(path: str, history: Sequence[Tuple[int, int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "lr", "loss"])
        for step, epoch, lr, loss in history:
            writer.writerow([step, epoch, f"{lr:.10g}", f"{loss:.10g}"])


def read_loss_history(path: str) -> List[Tuple[int, int, float, float]]:
    out: List[Tuple[int, int, float, float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["step", "epoch", "lr", "loss"]:
            raise InvalidInput(f"unexpected loss history header: {header!r}")
        for row in reader:
            out.append((int(row[0]), int(row[1]), float(row[2]), float(row[3])))
    return out


def save_checkpoint(
    model: RegionTextModel, path: str, metadata: Optional[dict] = None
) -> None:
    """Write model weights: 8-byte header length, JSON header, raw payload.

    The header carries the model config, a tensor index (name, dtype, shape,
    byte offset), and caller metadata. Tensor bytes are little-endian and
    concatenated in index order.
    """
    index = []
    chunks = []
    offset = 0
    for name, tensor in model.named_state_tensors().items():
        arr = tensor.detach().cpu().numpy()
        dtype_name = arr.dtype.name
        if dtype_name not in _DTYPES:
            raise InvalidInput(f"cannot serialize tensor {name!r} of dtype {dtype_name}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append(
            {
                "name": name,
                "dtype": dtype_name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": 1,
        "config": model.cfg.to_dict(),
        "tensors": index,
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path: str) -> Tuple[RegionTextModel, dict]:
    """Rebuild a model from a checkpoint file; returns ``(model, metadata)``.

    Raises :class:`CorruptCheckpoint` on truncated files, malformed headers,
    payload size mismatches, or a tensor index that does not match the model
    the embedded config describes.
    """
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CorruptCheckpoint(f"cannot read checkpoint: {exc}") from exc
    if len(data) < 8:
        raise CorruptCheckpoint("file too short for header length")
    (hlen,) = struct.unpack("<Q", data[:8])
    if hlen > _MAGIC_HEADER_LIMIT or 8 + hlen > len(data):
        raise CorruptCheckpoint(f"implausible header length {hlen}")
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"header is not valid JSON: {exc}") from exc
    for key in ("config", "tensors", "metadata"):
        if key not in header:
            raise CorruptCheckpoint(f"header missing {key!r}")
    try:
        cfg = EncoderConfig.from_dict(header["config"])
    except (InvalidInput, TypeError, KeyError) as exc:
        raise CorruptCheckpoint(f"bad config in header: {exc}") from exc
    payload = data[8 + hlen :]
    index = header["tensors"]
    expected = sum(int(t["nbytes"]) for t in index)
    if expected != len(payload):
        raise CorruptCheckpoint(
            f"payload size mismatch: index says {expected}, file has {len(payload)}"
        )
    model = RegionTextModel.build(cfg, seed=0)
    state = model.named_state_tensors()
    names = [t["name"] for t in index]
    if set(names) != set(state):
        missing = sorted(set(state) - set(names))[:3]
        extra = sorted(set(names) - set(state))[:3]
        raise CorruptCheckpoint(
            f"tensor index mismatch (missing={missing}, unexpected={extra})"
        )
    with torch.no_grad():
        for entry in index:
            if entry["dtype"] not in _DTYPES:
                raise CorruptCheckpoint(f"unknown dtype {entry['dtype']!r}")
            np_dtype, _ = _DTYPES[entry["dtype"]]
            start, nbytes = int(entry["offset"]), int(entry["nbytes"])
            if start < 0 or start + nbytes > len(payload):
                raise CorruptCheckpoint(f"tensor {entry['name']!r} overruns payload")
            arr = np.frombuffer(
                payload, dtype=np.dtype(np_dtype).newbyteorder("<"), count=nbytes // np.dtype(np_dtype).itemsize, offset=start
            ).reshape(entry["shape"])
            target = state[entry["name"]]
            if tuple(target.shape) != tuple(arr.shape):
                raise CorruptCheckpoint(
                    f"tensor {entry['name']!r} shape {list(arr.shape)} != model "
                    f"{list(target.shape)}"
                )
            target.copy_(torch.from_numpy(arr.astype(np_dtype, copy=True)))
    model.eval()
    return model, header["metadata"]
