import math

import numpy as np
import pytest
import torch

from regioncontrast.errors import InvalidInput, NumericalError, ShapeError
from regioncontrast.objective import (
    LOG_SCALE_INIT,
    MAX_LOG_SCALE,
    LogitScale,
    SimilarityMatrix,
    nce_loss,
    normalize,
    similarity_logits,
)

from conftest import central_difference, relative_grad_error


def brute_force_loss(logits: np.ndarray) -> float:
    """Direct transcription of the symmetric contrastive objective.

    Computes each row/column softmax with explicit python loops so it shares
    no code with the tensor implementation.
    """
    n = logits.shape[0]
    total_i2t = 0.0
    total_t2i = 0.0
    for i in range(n):
        row = logits[i, :]
        total_i2t += -(row[i] - math.log(sum(math.exp(v) for v in row)))
        col = logits[:, i]
        total_t2i += -(col[i] - math.log(sum(math.exp(v) for v in col)))
    return 0.5 * (total_i2t / n + total_t2i / n)


# --- loss values ------------------------------------------------------------

@pytest.mark.parametrize("n", [2, 4, 6])
def test_nce_matches_brute_force(n):
    rng = np.random.default_rng(n)
    logits = rng.normal(0, 3, size=(n, n))
    got = float(nce_loss(torch.tensor(logits, dtype=torch.float64)))
    assert abs(got - brute_force_loss(logits)) < 1e-10


@pytest.mark.parametrize("n", [2, 3, 8])
def test_uniform_logits_give_log_n(n):
    loss = float(nce_loss(torch.zeros(n, n, dtype=torch.float64)))
    assert abs(loss - math.log(n)) < 1e-12


def test_perfect_separation_drives_loss_to_zero():
    logits = torch.full((4, 4), -50.0, dtype=torch.float64)
    logits.fill_diagonal_(50.0)
    assert float(nce_loss(logits)) < 1e-12


def test_loss_is_symmetric_under_transpose():
    rng = np.random.default_rng(7)
    logits = torch.tensor(rng.normal(size=(5, 5)))
    torch.testing.assert_close(nce_loss(logits), nce_loss(logits.T))


def test_nce_rejects_non_square():
    with pytest.raises(ShapeError):
        nce_loss(torch.zeros(3, 4))
    with pytest.raises(ShapeError):
        nce_loss(torch.zeros(3))


def test_nce_accepts_similarity_matrix():
    m = SimilarityMatrix(logits=torch.zeros(2, 2, dtype=torch.float64), scale=1.0)
    assert abs(float(nce_loss(m)) - math.log(2)) < 1e-12


# --- normalize / similarity -------------------------------------------------

def test_normalize_unit_rows():
    rng = np.random.default_rng(0)
    v = torch.tensor(rng.normal(size=(5, 7)))
    norms = torch.linalg.vector_norm(normalize(v), dim=-1)
    torch.testing.assert_close(norms, torch.ones(5, dtype=torch.float64))


def test_normalize_rejects_zero():
    v = torch.zeros(2, 4)
    with pytest.raises(NumericalError):
        normalize(v)


def test_similarity_logits_oracle():
    rng = np.random.default_rng(1)
    img = normalize(torch.tensor(rng.normal(size=(3, 8))))
    txt = normalize(torch.tensor(rng.normal(size=(4, 8))))
    sim = similarity_logits(img, txt, 10.0)
    expect = 10.0 * (img.numpy() @ txt.numpy().T)
    np.testing.assert_allclose(sim.logits.numpy(), expect, atol=1e-12)
    assert sim.scale == 10.0


def test_similarity_logits_requires_unit_rows():
    img = torch.full((2, 4), 0.5)
    with pytest.raises(InvalidInput):
        similarity_logits(img * 3, normalize(img), 1.0)


def test_similarity_logits_shape_check():
    with pytest.raises(ShapeError):
        similarity_logits(torch.zeros(2, 4), torch.zeros(2, 5), 1.0)


# --- logit scale ------------------------------------------------------------

def test_scale_initializes_near_100():
    ls = LogitScale()
    assert LOG_SCALE_INIT == pytest.approx(4.6052)
    assert ls.value == pytest.approx(100.0, rel=1e-3)


def test_scale_clamps_at_100():
    ls = LogitScale(init=9.0)
    assert ls.value <= 100.0 * (1 + 1e-6)  # float32 exp of the cap
    with torch.no_grad():
        ls.log_scale.fill_(8.0)
    ls.clamp_()
    assert float(ls.log_scale.detach()) == pytest.approx(MAX_LOG_SCALE)
    assert ls.value == pytest.approx(100.0)


def test_scale_is_trainable_parameter():
    ls = LogitScale()
    assert ls.log_scale.requires_grad
    loss = ls.scale * 2.0
    loss.backward()
    assert ls.log_scale.grad is not None


# --- gradients (finite differences) -----------------------------------------

def _composite_loss(img_raw, txt_raw, log_scale):
    scale = torch.exp(torch.clamp(log_scale, max=MAX_LOG_SCALE))
    logits = scale * (normalize(img_raw) @ normalize(txt_raw).T)
    return nce_loss(logits)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(21)
    img = torch.tensor(rng.normal(size=(4, 6)), requires_grad=True)
    txt = torch.tensor(rng.normal(size=(4, 6)), requires_grad=True)
    log_scale = torch.tensor(2.0, dtype=torch.float64, requires_grad=True)

    loss = _composite_loss(img, txt, log_scale)
    gi, gt, gs = torch.autograd.grad(loss, (img, txt, log_scale))

    fd_img = central_difference(lambda v: _composite_loss(v, txt.detach(), log_scale.detach()), img.detach())
    fd_txt = central_difference(lambda v: _composite_loss(img.detach(), v, log_scale.detach()), txt.detach())
    fd_s = central_difference(
        lambda v: _composite_loss(img.detach(), txt.detach(), v.reshape(())),
        log_scale.detach().reshape(1),
    )
    assert relative_grad_error(gi.numpy(), fd_img) < 1e-7
    assert relative_grad_error(gt.numpy(), fd_txt) < 1e-7
    assert relative_grad_error(np.array([float(gs)]), fd_s) < 1e-7


def test_grad_at_clamp_boundary_is_zero():
    """Beyond the cap the clamp gates the gradient off."""
    log_scale = torch.tensor(6.0, dtype=torch.float64, requires_grad=True)
    rng = np.random.default_rng(3)
    img = torch.tensor(rng.normal(size=(3, 5)))
    txt = torch.tensor(rng.normal(size=(3, 5)))
    loss = _composite_loss(img, txt, log_scale)
    (g,) = torch.autograd.grad(loss, (log_scale,))
    assert float(g) == 0.0
