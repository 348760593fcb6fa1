"""HTTP inference service.

Endpoints:
  POST /v1/images   upload a PNG (raw bytes or ``{"image_b64": ...}``)
  POST /v1/query    score candidate texts or a named class set for a prompt
  GET  /v1/healthz  readiness probe with the checkpoint content hash
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import io
import json
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from fastapi import Body, FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from PIL import Image

from .encoders import ImageSample
from .errors import InvalidInput
from .evaluation import ClassPromptSet, class_embedding_matrix
from .fusion import attention_map
from .model import RegionTextModel
from .prompts import PromptKind, SpatialPrompt, prompt_from_json, prompt_to_json

logger = logging.getLogger(__name__)

DEFAULT_PORT = 8080
DEFAULT_MAX_IMAGE_BYTES = 4 * 1024 * 1024
DEFAULT_CACHE_CAPACITY = 256


@dataclass
class CachedImage:
    sample: ImageSample
    height: int
    width: int


class LRUCache:
    """Bounded mapping that evicts the least recently used entry on insert."""

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise InvalidInput("cache capacity must be >= 1")
        self.capacity = capacity
        self._store: "OrderedDict[str, CachedImage]" = OrderedDict()

    def get(self, key: str) -> Optional[CachedImage]:
        item = self._store.get(key)
        if item is not None:
            self._store.move_to_end(key)
        return item

    def put(self, key: str, value: CachedImage) -> None:
        if key in self._store:
            self._store.move_to_end(key)
        self._store[key] = value
        while len(self._store) > self.capacity:
            evicted, _ = self._store.popitem(last=False)
            logger.info("evicted image %s from cache", evicted)

    def __len__(self) -> int:
        return len(self._store)

    def __contains__(self, key: str) -> bool:
        return key in self._store


def _error(status: int, code: str, message: str) -> HTTPException:
    return HTTPException(status_code=status, detail={"code": code, "message": message})


def _decode_png(raw: bytes) -> Image.Image:
    try:
        img = Image.open(io.BytesIO(raw))
        img.load()
    except Exception as exc:
        raise _error(400, "bad_image", f"could not decode image: {exc}") from exc
    if img.format != "PNG":
        raise _error(400, "bad_image", f"expected PNG, got {img.format or 'unknown'}")
    return img


def _resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    if mask.shape == (size, size):
        return mask
    im = Image.fromarray((mask.astype(np.uint8)) * 255, mode="L")
    im = im.resize((size, size), Image.NEAREST)
    out = np.asarray(im) > 127
    if not out.any():
        # A sliver mask can vanish under nearest resize; keep its anchor pixel.
        rows, cols = np.nonzero(mask)
        r = int(rows.mean() * size / mask.shape[0])
        c = int(cols.mean() * size / mask.shape[1])
        out = np.zeros((size, size), dtype=bool)
        out[min(r, size - 1), min(c, size - 1)] = True
    return out


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def create_app(
    model: Optional[RegionTextModel] = None,
    class_sets: Optional[Dict[str, ClassPromptSet]] = None,
    checkpoint_id: Optional[str] = None,
    max_image_bytes: int = DEFAULT_MAX_IMAGE_BYTES,
    cache_capacity: int = DEFAULT_CACHE_CAPACITY,
) -> FastAPI:
    app = FastAPI(title="regioncontrast", docs_url=None, redoc_url=None)
    # The browser companion is served from its own origin and talks to this
    # API directly; the service carries no credentials, so a permissive CORS
    # policy is safe for the localhost research deployments it targets.
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    app.state.model = model
    app.state.class_sets = class_sets or {}
    app.state.checkpoint_id = checkpoint_id
    app.state.max_image_bytes = max_image_bytes
    app.state.cache = LRUCache(cache_capacity)
    # Class text embeddings never change for a fixed checkpoint; build once.
    app.state.class_matrices = {}
    if model is not None:
        for name, ps in app.state.class_sets.items():
            app.state.class_matrices[name] = class_embedding_matrix(model, ps)

    def _require_model() -> RegionTextModel:
        if app.state.model is None:
            raise _error(503, "not_ready", "no model checkpoint is loaded")
        return app.state.model

    @app.post("/v1/images", status_code=201)
    async def upload_image(request: Request):
        mdl = _require_model()
        raw = await request.body()
        ctype = request.headers.get("content-type", "")
        if ctype.startswith("application/json"):
            try:
                payload = json.loads(raw)
                raw = base64.b64decode(payload["image_b64"], validate=True)
            except (json.JSONDecodeError, KeyError, TypeError, binascii.Error) as exc:
                raise _error(400, "bad_request", f"invalid base64 upload: {exc}")
        if not raw:
            raise _error(400, "bad_image", "empty request body")
        if len(raw) > app.state.max_image_bytes:
            raise _error(
                413,
                "too_large",
                f"image is {len(raw)} bytes; limit is {app.state.max_image_bytes}",
            )
        img = _decode_png(raw)
        width, height = img.size
        size = mdl.cfg.image_size
        resized = img.convert("RGB").resize((size, size), Image.BILINEAR)
        pixels = np.asarray(resized, dtype=np.float32)
        sample = ImageSample(pixels=pixels).normalize()
        image_id = "img_" + hashlib.sha256(raw).hexdigest()[:32]
        app.state.cache.put(image_id, CachedImage(sample, height, width))
        gh, gw = mdl.cfg.grid
        return {
            "image_id": image_id,
            "h": height,
            "w": width,
            "patch_grid": [gh, gw],
        }

    @app.post("/v1/query")
    def query(payload: dict = Body(...)):
        mdl = _require_model()
        image_id = payload.get("image_id")
        if not isinstance(image_id, str):
            raise _error(422, "bad_request", "image_id must be a string")
        entry = app.state.cache.get(image_id)
        if entry is None:
            raise _error(404, "unknown_image", f"image {image_id!r} is not cached")
        if "prompt" not in payload:
            raise _error(422, "bad_request", "missing prompt")
        try:
            prompt = prompt_from_json(payload["prompt"])
        except InvalidInput as exc:
            raise _error(422, "bad_prompt", str(exc))
        if prompt.kind in (PromptKind.MASK,) and prompt.mask is not None:
            prompt = SpatialPrompt(
                kind=PromptKind.MASK,
                mask=_resize_mask(prompt.mask, mdl.cfg.image_size),
            )
        k = payload.get("k", 5)
        if not isinstance(k, int) or k < 1:
            raise _error(422, "bad_request", "k must be a positive integer")
        has_cands = "candidates" in payload
        has_set = "class_set" in payload
        if has_cands == has_set:
            raise _error(
                422, "bad_request", "provide exactly one of candidates or class_set"
            )
        emb, trace = mdl.embed_sample(entry.sample, prompt)
        if has_cands:
            cands = payload["candidates"]
            if (
                not isinstance(cands, list)
                or not cands
                or not all(isinstance(c, str) and c.strip() for c in cands)
            ):
                raise _error(
                    422, "bad_request", "candidates must be a non-empty list of strings"
                )
            names = list(cands)
            mat = mdl.embed_texts(names)
        else:
            set_name = payload["class_set"]
            if set_name not in app.state.class_matrices:
                raise _error(404, "unknown_class_set", f"no class set {set_name!r}")
            names, mat = app.state.class_matrices[set_name]
        cos = (mat @ emb).numpy().astype(np.float64)
        logits = mdl.logit_scale.value * cos
        z = np.exp(logits - logits.max())
        conf = z / z.sum()
        order = sorted(range(len(names)), key=lambda i: (-cos[i], names[i]))
        matches = [
            {
                "text": names[i],
                "score": float(cos[i]),
                "confidence": float(conf[i]),
            }
            for i in order[: min(k, len(names))]
        ]
        gh, gw = mdl.cfg.grid
        heat = attention_map(trace, (gh, gw))
        return {
            "matches": matches,
            "heatmap": {"h": gh, "w": gw, "values": [float(v) for v in heat.ravel()]},
            "prompt": prompt_to_json(prompt),
        }

    @app.get("/v1/healthz")
    def healthz():
        if app.state.model is None:
            raise _error(503, "not_ready", "no model checkpoint is loaded")
        cfg = app.state.model.cfg
        return {
            "status": "ok",
            "checkpoint_id": app.state.checkpoint_id,
            "image_size": cfg.image_size,
            "embed_dim": cfg.d,
            "class_sets": sorted(app.state.class_sets),
        }

    return app


def load_class_sets(path: str) -> Dict[str, ClassPromptSet]:
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise InvalidInput("class sets file must map set name -> {class: [prompts]}")
    return {name: ClassPromptSet.from_dict(spec) for name, spec in raw.items()}


def app_from_env() -> FastAPI:
    """Build the app from CHECKPOINT / CLASS_SETS / MAX_IMAGE_BYTES / CACHE_CAPACITY."""
    from .training import load_checkpoint

    model = None
    checkpoint_id = None
    ckpt = os.environ.get("CHECKPOINT")
    if ckpt:
        model, _ = load_checkpoint(ckpt)
        checkpoint_id = sha256_file(ckpt)
    class_sets = {}
    sets_path = os.environ.get("CLASS_SETS")
    if sets_path:
        class_sets = load_class_sets(sets_path)
    return create_app(
        model=model,
        class_sets=class_sets,
        checkpoint_id=checkpoint_id,
        max_image_bytes=int(os.environ.get("MAX_IMAGE_BYTES", DEFAULT_MAX_IMAGE_BYTES)),
        cache_capacity=int(os.environ.get("CACHE_CAPACITY", DEFAULT_CACHE_CAPACITY)),
    )


def serve(app: FastAPI, host: str = "127.0.0.1", port: Optional[int] = None) -> None:
    import uvicorn

    if port is None:
        port = int(os.environ.get("PORT", DEFAULT_PORT))
    uvicorn.run(app, host=host, port=port, log_level="info")
