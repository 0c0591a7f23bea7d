import numpy as np
import pytest
import torch

from evfuse import losses as ls

from conftest import central_difference, relative_error


def rand_feat(seed=0, b=2, c=6, h=4, w=4, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(b, c, h, w, generator=g, dtype=dtype)


def test_gram_zero_map():
    g = ls.gram(torch.zeros(1, 4, 3, 3))
    assert not g.any()


def test_gram_one_hot_channel_analytic():
    feat = torch.zeros(1, 4, 5, 5)
    feat[0, 2] = 1.0
    g = ls.gram(feat)[0]
    want = torch.zeros(4, 4)
    want[2, 2] = 1.0
    assert torch.allclose(g, want)


def test_gram_symmetric_and_psd():
    for seed in range(100):
        g = ls.gram(rand_feat(seed, b=1))[0]
        assert (g - g.T).abs().max() <= 1e-6
        eigvals = np.linalg.eigvalsh(g.numpy())
        assert eigvals.min() >= -1e-6


def test_gram_unbatched_input():
    feat = rand_feat(1, b=1)[0]
    assert ls.gram(feat).shape == (6, 6)


def test_recon_loss_trivials():
    a = rand_feat(2)
    assert float(ls.recon_loss(a, a)) == 0.0
    assert float(ls.recon_loss(a + 1.0, a)) == pytest.approx(1.0, abs=1e-12)
    b = rand_feat(3)
    assert float(ls.recon_loss(a, b)) == pytest.approx(float(ls.recon_loss(b, a)))
    with pytest.raises(ls.LossError):
        ls.recon_loss(a, a[:, :3])


def test_style_loss_identical_and_permutation():
    a = rand_feat(4, b=1)
    assert float(ls.style_loss(a, a)) == 0.0
    flat = a.reshape(1, 6, 16)
    perm = torch.randperm(16, generator=torch.Generator().manual_seed(0))
    shuffled = flat[:, :, perm].reshape(1, 6, 4, 4)
    # Gram pools over space, so any spatial permutation of the same map
    # leaves the style loss at zero.
    assert float(ls.style_loss(a, shuffled)) == pytest.approx(0.0, abs=1e-12)
    b = rand_feat(5, b=1)
    assert float(ls.style_loss(a, b)) > 0.0


def test_task_loss_centroid_analytic():
    pred = torch.tensor([[[10.0 / 64, 20.0 / 64]]], dtype=torch.float64)
    pseudo = torch.tensor([[[7.0 / 64, 16.0 / 64]]], dtype=torch.float64)
    got = float(ls.task_loss("centroid", pred, pseudo))
    want = ((3 / 64) ** 2 + (4 / 64) ** 2) / 2
    assert got == pytest.approx(want, rel=1e-12)
    assert float(ls.task_loss("centroid", pred, pred)) == 0.0


def test_task_loss_segmentation_convex_direction():
    g = torch.Generator().manual_seed(6)
    logits = torch.randn(1, 1, 8, 8, generator=g, dtype=torch.float64)
    target = torch.sigmoid(torch.randn(1, 1, 8, 8, generator=g, dtype=torch.float64))
    base = float(ls.task_loss("segmentation", logits, target))
    toward = logits + 0.1 * (torch.logit(target) - logits)
    assert float(ls.task_loss("segmentation", toward, target)) < base
    with pytest.raises(ls.LossError, match="task"):
        ls.task_loss("detection", logits, target)


def test_total_loss_single_term_and_default_weighting():
    t = lambda v: torch.tensor(v, dtype=torch.float64)
    terms = [{"j": 0, "task": t(0.5), "recon": t(0.0), "style": t(0.0)}]
    total, report = ls.total_loss(ls.LossWeights(1.0, 0.0, 0.0), terms)
    assert float(total) == 0.5
    report.check()

    terms = [{"j": j, "task": t(0.0), "recon": t(0.1 * (j + 1)), "style": t(0.0)}
             for j in range(3)]
    total, report = ls.total_loss(ls.LossWeights(0.0, 10.0, 0.0), terms)
    assert float(total) == pytest.approx(10 * (0.1 + 0.2 + 0.3), rel=1e-12)
    report.check()


def test_total_loss_linear_in_weights():
    t = lambda v: torch.tensor(v, dtype=torch.float64)
    terms = [{"j": 0, "task": t(0.2), "recon": t(0.3), "style": t(0.4)}]
    one, _ = ls.total_loss(ls.LossWeights(1.0, 2.0, 3.0), terms)
    two, _ = ls.total_loss(ls.LossWeights(2.0, 4.0, 6.0), terms)
    assert float(two) == pytest.approx(2 * float(one), rel=1e-12)


def test_loss_weights_validation():
    with pytest.raises(ls.LossError):
        ls.LossWeights(-1.0, 0.0, 0.0)
    with pytest.raises(ls.LossError):
        ls.LossWeights(0.0, 0.0, 0.0)


def test_report_check_catches_mismatch():
    report = ls.LossReport(steps=[{"j": 0, "task": 1.0, "recon": 0.0, "style": 0.0}],
                           weights=ls.LossWeights(1.0, 1.0, 1.0), total=5.0)
    with pytest.raises(ls.LossError):
        report.check()


def test_loss_gradients_match_finite_differences():
    torch.manual_seed(0)
    a = rand_feat(7).requires_grad_(True)
    b = rand_feat(8)
    for fn in (lambda: ls.recon_loss(a, b), lambda: ls.style_loss(a, b)):
        a.grad = None
        fn().backward()
        idx = (1, 3, 2, 1)
        fd = central_difference(fn, a.data, idx)
        assert relative_error(fd, float(a.grad[idx])) < 1e-4
