import math

import numpy as np
import pytest
import torch

from ditic.alignment import contrastive_loss, distill_loss, text_embed_provider, text_embeddings
from ditic.tensor import finite_diff_gradcheck

D = torch.float64


def test_distill_examples():
    y = torch.randn(1, 4, 3, 3, dtype=D)
    assert float(distill_loss(y, y.clone(), 0.0)) == pytest.approx(0.0, abs=1e-12)
    a = torch.tensor([[1.0, 0.0]], dtype=D)
    b = torch.tensor([[0.0, 2.0]], dtype=D)
    assert float(distill_loss(a, b, 0.0)) == pytest.approx(1.0, abs=1e-12)
    assert float(distill_loss(-y, y, 0.1)) == pytest.approx(1.9, abs=1e-12)


def test_distill_hinge_clamps_at_zero():
    y = torch.randn(2, 8, dtype=D)
    assert float(distill_loss(y * 1.0001, y, 0.1)) == 0.0


def test_distill_zero_norm_error():
    with pytest.raises(ValueError):
        distill_loss(torch.zeros(1, 4), torch.ones(1, 4))


def test_distill_gradient_only_into_prediction():
    y_ref = torch.randn(2, 6, dtype=D, requires_grad=True)
    y_pred = torch.randn(2, 6, dtype=D, requires_grad=True)
    distill_loss(y_pred, y_ref, 0.1).backward()
    assert y_ref.grad is None or torch.equal(y_ref.grad, torch.zeros_like(y_ref))
    assert y_pred.grad.abs().sum() > 0


def test_contrastive_single_pair_zero():
    c = torch.nn.functional.normalize(torch.randn(1, 8, dtype=D), dim=-1)
    assert float(contrastive_loss(c, c, 0.07)) == pytest.approx(0.0, abs=1e-12)


def test_contrastive_identical_rows_is_log_n():
    row = torch.nn.functional.normalize(torch.randn(1, 8, dtype=D), dim=-1)
    for n in (2, 5, 9):
        batch = row.expand(n, 8)
        assert float(contrastive_loss(batch, batch, 0.07)) == pytest.approx(math.log(n), abs=1e-12)


def test_contrastive_identity_logits():
    eye = torch.eye(2, dtype=D)
    oracle = -math.log(math.e / (math.e + 1))
    assert abs(oracle - 0.3133) < 1e-4
    assert float(contrastive_loss(eye, eye, 1.0)) == pytest.approx(oracle, abs=1e-12)
    assert float(contrastive_loss(eye, eye, 1.0, symmetric=True)) == pytest.approx(oracle, abs=1e-12)


def test_contrastive_errors():
    with pytest.raises(ValueError):
        contrastive_loss(torch.zeros(0, 4), torch.zeros(0, 4))
    with pytest.raises(ValueError):
        contrastive_loss(torch.eye(2), torch.eye(2), 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_contrastive_monotone_in_matched_similarity(seed):
    g = torch.Generator().manual_seed(seed)
    lat = torch.nn.functional.normalize(torch.randn(4, 16, generator=g, dtype=D), dim=-1)
    txt = torch.nn.functional.normalize(torch.randn(4, 16, generator=g, dtype=D), dim=-1)
    base = float(contrastive_loss(lat, txt, 0.07))
    # raise one matched logit, leaving every other logit unchanged
    logits = lat @ txt.T
    logits[2, 2] += 0.1
    bumped = torch.nn.functional.cross_entropy(logits / 0.07, torch.arange(4))
    assert float(bumped) < base


def test_loss_gradients_fd():
    worst = 0.0
    for seed in range(20):
        g = torch.Generator().manual_seed(seed)
        a = torch.randn(3, 10, generator=g, dtype=D)
        b = torch.randn(3, 10, generator=g, dtype=D)
        worst = max(worst, finite_diff_gradcheck(lambda x: distill_loss(x, b, 0.0), a).max_rel_err)
        t = torch.nn.functional.normalize(b, dim=-1)
        f = lambda x: contrastive_loss(torch.nn.functional.normalize(x, dim=-1), t, 0.07)
        worst = max(worst, finite_diff_gradcheck(f, a).max_rel_err)
    assert worst < 1e-4


def test_text_embedding_provider():
    a = text_embed_provider("grf beta=2.5 palette=1", 64)
    b = text_embed_provider("grf beta=2.5 palette=1", 64)
    assert torch.equal(a.c, b.c) and a.source == "text"
    assert abs(float(a.c.norm()) - 1.0) < 1e-6


def test_text_embeddings_near_orthogonal():
    d = 64
    e = text_embeddings([f"key {i}" for i in range(1000)], d, D).numpy()
    cos = e @ e.T
    iu = np.triu_indices(1000, 1)
    assert np.abs(cos[iu]).mean() < 3 / math.sqrt(d)
