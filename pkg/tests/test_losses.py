import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from edgestereo import imageops, losses as L
from edgestereo.errors import ConfigError, DimensionError, DivergenceError, EmptySupportError


def t64(rng, *shape, lo=-1, hi=1):
    return torch.from_numpy(rng.uniform(lo, hi, size=shape))


def test_weights_defaults_and_validation():
    w = L.LossWeights()
    assert (w.warp_l1, w.warp_ssim, w.reconstruction, w.cycle, w.adversarial) == (1, 1, 0.8, 10, 10)
    with pytest.raises(ConfigError) as exc:
        L.LossWeights(cycle=-1, adversarial=float("nan")).validate()
    assert len(exc.value.problems) == 2


def test_reconstruction_simple():
    x = torch.rand(2, 3, 4, 5)
    assert float(L.reconstruction_loss(x, x)) == 0
    assert abs(float(L.reconstruction_loss(x, x + 0.5)) - 0.5) < 1e-7
    with pytest.raises(DimensionError):
        L.reconstruction_loss(x, x[..., :4])


@pytest.mark.parametrize("seed", range(4))
def test_l1_reductions_match_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = t64(rng, 2, 3, 6, 8).float(), t64(rng, 2, 3, 6, 8).float()
    ref = oracles.l1(a.numpy(), b.numpy())
    assert abs(float(L.reconstruction_loss(a, b)) - ref) < 1e-7
    assert abs(float(L.cycle_loss(a, b)) - ref) < 1e-7
    assert float(L.cycle_loss(a, b)) == float(L.reconstruction_loss(a, b))


def test_adversarial_at_zero():
    z = torch.zeros(1, 1, 3, 4)
    assert abs(float(L.adversarial_d(z, z)) - 2 * math.log(2)) < 1e-12
    assert abs(float(L.adversarial_g(z)) - math.log(2)) < 1e-12


def test_adversarial_g_monotone():
    vals = [float(L.adversarial_g(torch.full((1, 1, 2, 2), v))) for v in (-5.0, 0.0, 5.0, 50.0, 500.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-100


@pytest.mark.parametrize("seed", range(4))
def test_adversarial_oracle(seed):
    rng = np.random.default_rng(seed)
    real, fake = t64(rng, 2, 1, 3, 5, lo=-30, hi=30), t64(rng, 2, 1, 3, 5, lo=-30, hi=30)
    assert abs(float(L.adversarial_d(real, fake)) - oracles.adversarial_d(real.numpy(), fake.numpy())) < 1e-6
    assert abs(float(L.adversarial_g(fake)) - oracles.adversarial_g(fake.numpy())) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_losses_non_negative(seed):
    rng = np.random.default_rng(seed)
    a, b = t64(rng, 3, 12, 14), t64(rng, 3, 12, 14)
    disp = t64(rng, 1, 12, 14, lo=0, hi=3)
    assert float(L.reconstruction_loss(a, b)) >= 0
    assert float(L.adversarial_d(a[:1], b[:1])) >= 0 and float(L.adversarial_g(a[:1])) >= 0
    assert float(L.warp_loss(a, b, disp)) >= 0


def test_warp_loss_self_consistent_is_zero():
    rng = np.random.default_rng(1)
    left = t64(rng, 3, 16, 32)
    disp = torch.from_numpy(rng.integers(0, 4, size=(1, 16, 32)).astype(np.float64))
    right, _ = imageops.warp_horizontal(left, disp)
    assert float(L.warp_loss(left, right, disp)) == 0.0
    assert float(L.warp_loss(left, left, torch.zeros(1, 16, 32, dtype=torch.float64))) == 0.0


def test_warp_loss_matches_oracle_composition():
    rng = np.random.default_rng(2)
    left, right = t64(rng, 3, 16, 32), t64(rng, 3, 16, 32)
    disp = torch.full((1, 16, 32), 3.0, dtype=torch.float64)
    w = L.LossWeights(warp_l1=0.7, warp_ssim=1.3)
    ref = oracles.warp_loss(left.numpy(), right.numpy(), disp[0].numpy(), 0.7, 1.3)
    assert abs(float(L.warp_loss(left, right, disp, w)) - ref) < 1e-5


def test_warp_loss_excludes_nan_disparity():
    rng = np.random.default_rng(3)
    left, right = t64(rng, 3, 12, 16), t64(rng, 3, 12, 16)
    disp = t64(rng, 1, 12, 16, lo=0, hi=2)
    disp[0, :, 9:] = float("nan")
    ref = oracles.warp_loss(left.numpy(), right.numpy(), disp[0].numpy())
    assert abs(float(L.warp_loss(left, right, disp)) - ref) < 1e-5
    # scribbling over NaN pixels of the target does not change the loss
    scribbled = right.clone()
    scribbled[..., 9:] = 5.0
    assert float(L.warp_loss(left, right, disp, L.LossWeights(warp_ssim=0))) == float(
        L.warp_loss(left, scribbled, disp, L.LossWeights(warp_ssim=0))
    )


def test_warp_loss_empty_support():
    x = torch.zeros(3, 6, 8)
    with pytest.raises(EmptySupportError):
        L.warp_loss(x, x, torch.full((1, 6, 8), 100.0))


def test_total_generator_arithmetic():
    one = torch.tensor(1.0, dtype=torch.float64)
    parts = {k: one for k in L.GENERATOR_PARTS}
    assert abs(float(L.total_generator_loss(parts, L.LossWeights())) - 42.6) < 1e-12
    zero = {k: torch.zeros((), dtype=torch.float64) for k in L.GENERATOR_PARTS}
    assert float(L.total_generator_loss(zero, L.LossWeights())) == 0


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=7, max_size=7), st.floats(0.1, 5))
def test_total_linear_in_weights(vals, k):
    parts = {name: torch.tensor(v, dtype=torch.float64) for name, v in zip(L.GENERATOR_PARTS, vals)}
    w = L.LossWeights()
    base = float(L.total_generator_loss(parts, w)) - vals[-1]
    scaled = float(L.total_generator_loss(parts, w.scaled(k))) - vals[-1]
    assert abs(scaled - k * base) <= 1e-9 * max(1.0, abs(k * base))
    bd = L.LossBreakdown(*vals, total_g=float(L.total_generator_loss(parts, w)))
    assert bd.consistent(w)


def test_divergence_names_component():
    parts = {k: torch.tensor(1.0) for k in L.GENERATOR_PARTS}
    parts["cyc_bab"] = torch.tensor(float("inf"))
    with pytest.raises(DivergenceError, match="cyc_bab"):
        L.total_generator_loss(parts, L.LossWeights())
    with pytest.raises(DivergenceError, match="adv_d_a"):
        L.total_discriminator_loss({"adv_d_a": torch.tensor(float("nan")), "adv_d_b": torch.tensor(0.0)})


def test_discriminator_total():
    parts = {"adv_d_a": torch.tensor(0.25), "adv_d_b": torch.tensor(0.5)}
    assert float(L.total_discriminator_loss(parts)) == 0.75


# ------------------------------------------------------------- gradients


def gradcheck(fn, *inputs, rtol=1e-3):
    inputs = tuple(x.clone().requires_grad_(True) for x in inputs)
    return torch.autograd.gradcheck(fn, inputs, eps=1e-6, atol=1e-8, rtol=rtol)


def test_gradients_l1_and_adversarial():
    rng = np.random.default_rng(0)
    a, b = t64(rng, 3, 6, 8), t64(rng, 3, 6, 8)
    assert gradcheck(L.reconstruction_loss, a, b)
    assert gradcheck(L.cycle_loss, a, b)
    real, fake = t64(rng, 1, 1, 6, 8, lo=-3, hi=3), t64(rng, 1, 1, 6, 8, lo=-3, hi=3)
    assert gradcheck(L.adversarial_d, real, fake)
    assert gradcheck(L.adversarial_g, fake)


def test_gradients_warp():
    rng = np.random.default_rng(1)
    a, b = t64(rng, 3, 6, 8), t64(rng, 3, 6, 8)
    disp = t64(rng, 1, 6, 8, lo=0, hi=1.5)
    l1_only = L.LossWeights(warp_ssim=0)
    assert gradcheck(lambda x, y: L.warp_loss(x, y, disp, l1_only), a, b)
    full = torch.zeros(1, 6, 8, dtype=torch.float64)
    assert gradcheck(lambda x, y: L.warp_loss(x, y, full), a, b, rtol=1e-2)
