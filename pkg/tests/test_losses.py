import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from crispedge._validation import ConfigError, ShapeError
from crispedge.losses import LossConfig, bce_loss, focal_loss, hybrid_loss


def rand_case(seed, shape=(1, 1, 5, 5)):
    g = torch.Generator().manual_seed(seed)
    p = 0.05 + 0.9 * torch.rand(shape, generator=g, dtype=torch.float64)
    y = (torch.rand(shape, generator=g) < 0.3).double()
    return p, y


def test_bce_analytic_values():
    y = (torch.rand(1, 1, 4, 4) < 0.5).double()
    assert bce_loss(torch.full_like(y, 0.5), y).item() == pytest.approx(math.log(2), rel=1e-6)
    assert bce_loss(y.clone(), y).item() <= -math.log(1 - 1e-7) + 1e-9
    p = torch.tensor([[[[math.exp(-1)]]]], dtype=torch.float64)
    assert bce_loss(p, torch.ones_like(p)).item() == pytest.approx(1.0, abs=1e-12)


def test_bce_rejects_nan_and_shape_mismatch():
    with pytest.raises(ValueError):
        bce_loss(torch.tensor([float("nan")]), torch.tensor([1.0]))
    with pytest.raises(ShapeError):
        bce_loss(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 3))


def test_focal_reductions():
    p, y = rand_case(0)
    cfg = LossConfig(focal_gamma=0.0, focal_alpha_pos=0.5)
    assert focal_loss(p, y, cfg).item() == pytest.approx(0.5 * bce_loss(p, y).item(), rel=1e-12)

    one = torch.tensor([[[[0.5]]]], dtype=torch.float64)
    cfg = LossConfig(focal_gamma=2.0, focal_alpha_pos=1 - 1e-12)
    assert focal_loss(one, torch.ones_like(one), cfg).item() == pytest.approx(0.25 * math.log(2), rel=1e-9)

    yb = (torch.rand(1, 1, 6, 6) < 0.4).double()
    assert focal_loss(yb.clone(), yb).item() == pytest.approx(0.0, abs=1e-12)


def test_logit_and_probability_paths_agree():
    p, y = rand_case(1)
    logits = torch.logit(p)
    assert bce_loss(logits, y, logits=True).item() == pytest.approx(bce_loss(p, y).item(), rel=1e-9)
    assert focal_loss(logits, y, logits=True).item() == pytest.approx(focal_loss(p, y).item(), rel=1e-9)


def test_hybrid_definition_and_linearity():
    p, y = rand_case(2)
    cfg1 = LossConfig(alpha_k=[1.0])
    single = hybrid_loss([p], y, cfg1).item()
    assert single == pytest.approx(bce_loss(p, y).item() + focal_loss(p, y, cfg1).item(), rel=1e-12)

    outs = [rand_case(s)[0] for s in range(6)]
    cfg = LossConfig(alpha_k=[0.5, 1, 2, 0.1, 3, 1])
    doubled = LossConfig(alpha_k=[2 * a for a in cfg.alpha_k])
    assert hybrid_loss(outs, y, doubled).item() == pytest.approx(2 * hybrid_loss(outs, y, cfg).item(), rel=1e-12)

    assert hybrid_loss([p] * 6, y, LossConfig()).item() == pytest.approx(6 * single, rel=1e-12)


def test_hybrid_length_mismatch():
    p, y = rand_case(0)
    with pytest.raises(ConfigError):
        hybrid_loss([p, p], y, LossConfig(alpha_k=[1.0] * 6))


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(focal_alpha_pos=1.0).validate()
    with pytest.raises(ConfigError):
        LossConfig(alpha_k=[1, -1]).validate()
    with pytest.raises(ConfigError):
        LossConfig().validate(k=9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.0, 4.0), st.floats(0.05, 0.95))
def test_losses_non_negative(seed, gamma, apos):
    p, y = rand_case(seed)
    cfg = LossConfig(alpha_k=[1.0, 0.3], focal_gamma=gamma, focal_alpha_pos=apos)
    assert bce_loss(p, y).item() >= 0
    assert focal_loss(p, y, cfg).item() >= 0
    assert hybrid_loss([p, 1 - p], y, cfg).item() >= 0


def test_focal_damps_cross_entropy_per_pixel():
    p = torch.linspace(0.01, 0.99, 99, dtype=torch.float64).reshape(1, 1, 9, 11)
    y = torch.ones_like(p)
    cfg = LossConfig(focal_gamma=2.0, focal_alpha_pos=1 - 1e-15)
    for pi, yi in zip(p.flatten(), y.flatten()):
        pi, yi = pi.reshape(1), yi.reshape(1)
        assert focal_loss(pi, yi, cfg).item() <= bce_loss(pi, yi).item()


def test_losses_permutation_invariant():
    p, y = rand_case(7, shape=(1, 1, 6, 6))
    perm = torch.randperm(36)
    pp = p.flatten()[perm].reshape(p.shape)
    yp = y.flatten()[perm].reshape(y.shape)
    assert bce_loss(pp, yp).item() == pytest.approx(bce_loss(p, y).item(), rel=1e-12)
    assert focal_loss(pp, yp).item() == pytest.approx(focal_loss(p, y).item(), rel=1e-12)


@pytest.mark.parametrize("which", ["bce", "focal", "hybrid"])
def test_loss_gradients_finite_differences(which):
    cfg = LossConfig(alpha_k=[1.0, 0.5])
    for seed in range(20):
        p, y = rand_case(seed, shape=(1, 1, 3, 3))
        p.requires_grad_()
        if which == "bce":
            fn = lambda q: bce_loss(q, y)
        elif which == "focal":
            fn = lambda q: focal_loss(q, y, cfg)
        else:
            fn = lambda q: hybrid_loss([q, q**2], y, cfg)
        assert torch.autograd.gradcheck(fn, (p,), eps=1e-5, atol=1e-8, rtol=1e-4)
