import base64
import io
import json

import numpy as np
import pytest
from PIL import Image
from starlette.testclient import TestClient

from regioncontrast.errors import InvalidInput
from regioncontrast.evaluation import ClassPromptSet
from regioncontrast.prompts import PromptKind, rle_encode
from regioncontrast.service import (
    CachedImage,
    LRUCache,
    create_app,
    load_class_sets,
    sha256_file,
)


def _png_bytes(size=32, seed=0):
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


@pytest.fixture()
def client(small_model):
    sets = {
        "shapes": ClassPromptSet.from_dict(
            {"disk": ["a round disk"], "ring": ["a hollow ring"]}
        )
    }
    app = create_app(
        model=small_model,
        class_sets=sets,
        checkpoint_id="cafebabe",
        max_image_bytes=64 * 1024,
        cache_capacity=4,
    )
    return TestClient(app)


def _upload(client, seed=0, size=32):
    resp = client.post(
        "/v1/images",
        content=_png_bytes(size=size, seed=seed),
        headers={"content-type": "image/png"},
    )
    assert resp.status_code == 201, resp.text
    return resp.json()


# ---------------------------------------------------------------------------
# upload


def test_upload_returns_metadata(client, small_cfg):
    body = _upload(client, size=48)
    assert body["image_id"].startswith("img_")
    assert len(body["image_id"]) == 4 + 32
    assert (body["h"], body["w"]) == (48, 48)
    assert body["patch_grid"] == [4, 4]


def test_upload_is_idempotent(client):
    a = _upload(client, seed=1)
    b = _upload(client, seed=1)
    assert a == b


def test_upload_distinct_images_distinct_ids(client):
    assert _upload(client, seed=1)["image_id"] != _upload(client, seed=2)["image_id"]


def test_upload_b64_route_matches_raw(client):
    raw = _png_bytes(seed=3)
    via_raw = client.post(
        "/v1/images", content=raw, headers={"content-type": "image/png"}
    ).json()
    via_b64 = client.post(
        "/v1/images", json={"image_b64": base64.b64encode(raw).decode()}
    ).json()
    assert via_raw == via_b64


def test_upload_rejects_bad_b64(client):
    resp = client.post("/v1/images", json={"image_b64": "!!notb64!!"})
    assert resp.status_code == 400
    assert resp.json()["detail"]["code"] == "bad_request"


def test_upload_rejects_empty_body(client):
    resp = client.post("/v1/images", content=b"", headers={"content-type": "image/png"})
    assert resp.status_code == 400


def test_upload_rejects_non_png(client):
    buf = io.BytesIO()
    Image.new("RGB", (8, 8)).save(buf, format="JPEG")
    resp = client.post(
        "/v1/images", content=buf.getvalue(), headers={"content-type": "image/jpeg"}
    )
    assert resp.status_code == 400
    assert resp.json()["detail"]["code"] == "bad_image"


def test_upload_rejects_garbage_bytes(client):
    resp = client.post(
        "/v1/images", content=b"\x89PNG but not really", headers={"content-type": "image/png"}
    )
    assert resp.status_code == 400


def test_upload_rejects_oversize(client):
    resp = client.post(
        "/v1/images",
        content=b"\x00" * (64 * 1024 + 1),
        headers={"content-type": "image/png"},
    )
    assert resp.status_code == 413
    assert resp.json()["detail"]["code"] == "too_large"


# ---------------------------------------------------------------------------
# query


def _point_prompt():
    return {"kind": "points", "points": [[0.5, 0.5]]}


def test_query_with_candidates(client):
    image_id = _upload(client)["image_id"]
    resp = client.post(
        "/v1/query",
        json={
            "image_id": image_id,
            "prompt": _point_prompt(),
            "candidates": ["a disk", "a ring", "a bar"],
            "k": 3,
        },
    )
    assert resp.status_code == 200, resp.text
    body = resp.json()
    assert len(body["matches"]) == 3
    scores = [m["score"] for m in body["matches"]]
    assert scores == sorted(scores, reverse=True)
    assert sum(m["confidence"] for m in body["matches"]) == pytest.approx(1.0, abs=1e-9)
    assert body["heatmap"]["h"] == 4 and body["heatmap"]["w"] == 4
    assert len(body["heatmap"]["values"]) == 16
    assert all(0.0 <= v <= 1.0 for v in body["heatmap"]["values"])
    assert body["prompt"]["kind"] == "points"


def test_query_with_class_set(client):
    image_id = _upload(client)["image_id"]
    resp = client.post(
        "/v1/query",
        json={"image_id": image_id, "prompt": _point_prompt(), "class_set": "shapes"},
    )
    assert resp.status_code == 200
    texts = {m["text"] for m in resp.json()["matches"]}
    assert texts == {"disk", "ring"}


def test_query_repeats_are_deterministic(client):
    image_id = _upload(client)["image_id"]
    payload = {
        "image_id": image_id,
        "prompt": {"kind": "box", "box": [0.1, 0.1, 0.9, 0.9]},
        "candidates": ["alpha", "beta", "gamma"],
    }
    a = client.post("/v1/query", json=payload).json()
    b = client.post("/v1/query", json=payload).json()
    assert a == b


def test_query_mask_prompt_any_resolution(client):
    """RLE masks at native resolution are resampled to the model grid."""
    image_id = _upload(client)["image_id"]
    mask = np.zeros((128, 128), dtype=bool)
    mask[32:96, 16:80] = True
    resp = client.post(
        "/v1/query",
        json={
            "image_id": image_id,
            "prompt": {"kind": "mask", "mask_rle": rle_encode(mask)},
            "candidates": ["thing one", "thing two"],
        },
    )
    assert resp.status_code == 200, resp.text
    assert resp.json()["prompt"]["kind"] == "mask"
    # echoed prompt is at model resolution now
    assert resp.json()["prompt"]["mask_rle"]["h"] == 32


def test_query_unknown_image(client):
    resp = client.post(
        "/v1/query",
        json={
            "image_id": "img_" + "0" * 32,
            "prompt": _point_prompt(),
            "candidates": ["x"],
        },
    )
    assert resp.status_code == 404
    assert resp.json()["detail"]["code"] == "unknown_image"


def test_query_unknown_class_set(client):
    image_id = _upload(client)["image_id"]
    resp = client.post(
        "/v1/query",
        json={"image_id": image_id, "prompt": _point_prompt(), "class_set": "nope"},
    )
    assert resp.status_code == 404
    assert resp.json()["detail"]["code"] == "unknown_class_set"


@pytest.mark.parametrize(
    "mutate",
    [
        lambda p: p.pop("prompt"),
        lambda p: p.update(prompt={"kind": "points", "points": []}),
        lambda p: p.update(prompt={"kind": "wedge"}),
        lambda p: p.update(k=0),
        lambda p: p.update(k="five"),
        lambda p: p.update(candidates=[]),
        lambda p: p.update(candidates=["ok", ""]),
        lambda p: p.update(candidates=["ok", 3]),
        lambda p: p.pop("candidates"),
        lambda p: p.update(class_set="shapes"),  # both candidates and class_set
        lambda p: p.update(image_id=17),
    ],
)
def test_query_422_validation(client, mutate):
    image_id = _upload(client)["image_id"]
    payload = {
        "image_id": image_id,
        "prompt": _point_prompt(),
        "candidates": ["a", "b"],
    }
    mutate(payload)
    resp = client.post("/v1/query", json=payload)
    assert resp.status_code == 422, resp.text


def test_query_k_larger_than_pool(client):
    image_id = _upload(client)["image_id"]
    resp = client.post(
        "/v1/query",
        json={
            "image_id": image_id,
            "prompt": _point_prompt(),
            "candidates": ["a", "b"],
            "k": 10,
        },
    )
    assert resp.status_code == 200
    assert len(resp.json()["matches"]) == 2


# ---------------------------------------------------------------------------
# health / lifecycle


def test_healthz_ok(client, small_cfg):
    resp = client.get("/v1/healthz")
    assert resp.status_code == 200
    body = resp.json()
    assert body["status"] == "ok"
    assert body["checkpoint_id"] == "cafebabe"
    assert body["image_size"] == small_cfg.image_size
    assert body["embed_dim"] == small_cfg.d
    assert body["class_sets"] == ["shapes"]


def test_no_model_returns_503():
    bare = TestClient(create_app(model=None))
    assert bare.get("/v1/healthz").status_code == 503
    resp = bare.post("/v1/images", content=_png_bytes())
    assert resp.status_code == 503
    assert resp.json()["detail"]["code"] == "not_ready"


# ---------------------------------------------------------------------------
# cache unit behavior


def _entry():
    return CachedImage(sample=None, height=1, width=1)


def test_lru_evicts_oldest():
    cache = LRUCache(2)
    cache.put("a", _entry())
    cache.put("b", _entry())
    cache.put("c", _entry())
    assert "a" not in cache
    assert "b" in cache and "c" in cache


def test_lru_get_refreshes_recency():
    cache = LRUCache(2)
    cache.put("a", _entry())
    cache.put("b", _entry())
    cache.get("a")
    cache.put("c", _entry())
    assert "b" not in cache
    assert "a" in cache and "c" in cache


def test_lru_put_same_key_refreshes():
    cache = LRUCache(2)
    cache.put("a", _entry())
    cache.put("b", _entry())
    cache.put("a", _entry())
    cache.put("c", _entry())
    assert "b" not in cache and len(cache) == 2


def test_lru_rejects_zero_capacity():
    with pytest.raises(InvalidInput):
        LRUCache(0)


def test_cache_eviction_served_as_404(small_model):
    app = create_app(model=small_model, cache_capacity=1)
    client = TestClient(app)
    first = _upload(client, seed=1)["image_id"]
    _upload(client, seed=2)
    resp = client.post(
        "/v1/query",
        json={"image_id": first, "prompt": _point_prompt(), "candidates": ["x"]},
    )
    assert resp.status_code == 404


# ---------------------------------------------------------------------------
# helpers


def test_sha256_file(tmp_path):
    import hashlib

    path = tmp_path / "blob.bin"
    path.write_bytes(b"q" * 3000)
    assert sha256_file(str(path)) == hashlib.sha256(b"q" * 3000).hexdigest()


def test_load_class_sets(tmp_path):
    path = tmp_path / "sets.json"
    path.write_text(json.dumps({"organs": {"liver": ["the liver"], "kidney": ["a kidney"]}}))
    sets = load_class_sets(str(path))
    assert set(sets) == {"organs"}
    assert sets["organs"].classes == ["kidney", "liver"]


def test_load_class_sets_rejects_non_mapping(tmp_path):
    path = tmp_path / "sets.json"
    path.write_text(json.dumps(["not", "a", "mapping"]))
    with pytest.raises(InvalidInput):
        load_class_sets(str(path))
