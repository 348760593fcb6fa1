import numpy as np
import pytest
import torch

from regioncontrast.encoders import EncoderConfig
from regioncontrast.model import RegionTextModel


@pytest.fixture
def small_cfg():
    # 32px/8 -> 4x4 patch grid; keeps per-test forward passes cheap.
    return EncoderConfig(
        image_size=32, patch_size=8, d1=32, d=16, depth=2, heads=2,
        vocab_size=512, max_len=16, trainable_blocks=2,
    )


@pytest.fixture
def desk_cfg():
    return EncoderConfig()


@pytest.fixture
def small_model(small_cfg):
    return RegionTextModel.build(small_cfg, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_sample(small_cfg, rng):
    from regioncontrast.encoders import ImageSample

    px = rng.uniform(0, 255, size=(small_cfg.image_size, small_cfg.image_size, 3))
    return ImageSample(px.astype(np.float32)).normalize()


@pytest.fixture(scope="session")
def toy_archive(tmp_path_factory):
    """Small captioned archive at the full 64px model size."""
    from regioncontrast.toydata import generate_dataset

    root = tmp_path_factory.mktemp("toy_archive")
    records = generate_dataset(str(root), n_images=6, image_size=64, seed=41)
    return str(root), records


@pytest.fixture(scope="session")
def toy_archive32(tmp_path_factory):
    """32px archive matching small_cfg, for fast fit()/eval tests."""
    from regioncontrast.toydata import generate_dataset

    root = tmp_path_factory.mktemp("toy_archive32")
    records = generate_dataset(str(root), n_images=6, image_size=32, seed=41)
    return str(root), records


def relative_grad_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def central_difference(f, tensor: torch.Tensor, eps: float = 1e-6) -> np.ndarray:
    """Numeric d f / d tensor via central differences; expects float64."""
    assert tensor.dtype == torch.float64
    flat = tensor.detach().clone().reshape(-1)
    out = np.zeros(flat.shape[0])
    for i in range(flat.shape[0]):
        orig = float(flat[i])
        flat[i] = orig + eps
        with torch.no_grad():
            hi = float(f(flat.reshape(tensor.shape)))
        flat[i] = orig - eps
        with torch.no_grad():
            lo = float(f(flat.reshape(tensor.shape)))
        flat[i] = orig
        out[i] = (hi - lo) / (2 * eps)
    return out.reshape(tuple(tensor.shape))
