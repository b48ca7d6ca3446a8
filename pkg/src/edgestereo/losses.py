"""Training objectives.

Reductions are carried out in float64 so that the scalar losses agree with
loop-based references to ~1e-12 regardless of the image dtype; gradients flow
back into the original dtype.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F

from . import imageops
from .errors import ConfigError, DimensionError, DivergenceError, EmptySupportError


@dataclass
class LossWeights:
    warp_l1: float = 1.0
    warp_ssim: float = 1.0
    reconstruction: float = 0.8
    cycle: float = 10.0
    adversarial: float = 10.0

    def validate(self) -> None:
        bad = [
            f"weights.{f.name} must be a finite number >= 0, got {getattr(self, f.name)!r}"
            for f in fields(self)
            if not isinstance(getattr(self, f.name), (int, float))
            or not math.isfinite(getattr(self, f.name))
            or getattr(self, f.name) < 0
        ]
        if bad:
            raise ConfigError(bad)

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(**{k: v * factor for k, v in asdict(self).items()})


GENERATOR_PARTS = ("rec_aa", "rec_bb", "cyc_aba", "cyc_bab", "adv_a", "adv_b", "warp")


@dataclass
class LossBreakdown:
    rec_aa: float = 0.0
    rec_bb: float = 0.0
    cyc_aba: float = 0.0
    cyc_bab: float = 0.0
    adv_a: float = 0.0
    adv_b: float = 0.0
    warp: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0

    def composed_total(self, weights: LossWeights) -> float:
        return (
            weights.reconstruction * (self.rec_aa + self.rec_bb)
            + weights.cycle * (self.cyc_aba + self.cyc_bab)
            + weights.adversarial * (self.adv_a + self.adv_b)
            + self.warp
        )

    def consistent(self, weights: LossWeights, rtol: float = 1e-6) -> bool:
        expect = self.composed_total(weights)
        return abs(self.total_g - expect) <= rtol * max(abs(expect), 1e-12)

    def to_dict(self) -> dict:
        return asdict(self)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes differ {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_mean(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    _same_shape(x, y, "l1")
    return (x.to(torch.float64) - y.to(torch.float64)).abs().mean()


def reconstruction_loss(x: torch.Tensor, x_recon: torch.Tensor) -> torch.Tensor:
    return l1_mean(x_recon, x)


def cycle_loss(x: torch.Tensor, x_cycled: torch.Tensor) -> torch.Tensor:
    return l1_mean(x_cycled, x)


def adversarial_d(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """``-[log sigmoid(real) + log(1 - sigmoid(fake))]`` averaged over patches."""
    real = real_logits.to(torch.float64)
    fake = fake_logits.to(torch.float64)
    return F.softplus(-real).mean() + F.softplus(fake).mean()


def adversarial_g(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator term ``-log sigmoid(fake)``."""
    return F.softplus(-fake_logits.to(torch.float64)).mean()


def warp_loss(
    left_ab: torch.Tensor,
    right_ab: torch.Tensor,
    disp: torch.Tensor,
    weights: LossWeights | None = None,
    sign: int = 1,
) -> torch.Tensor:
    """Photometric consistency of the translated pair under the ground-truth disparity.

    The translated left view is warped onto the right one; pixels without a
    valid source sample (out of bounds or undefined disparity) are excluded
    from both the L1 and the SSIM term.
    """
    weights = weights or LossWeights()
    _same_shape(left_ab, right_ab, "warp_loss")
    warped, mask = imageops.warp_horizontal(left_ab, disp, sign)
    if not bool(mask.any()):
        raise EmptySupportError("warp_loss: no pixel has a valid warped sample")
    m = mask.unsqueeze(-3)
    count = int(mask.sum()) * left_ab.shape[-3]
    diff = (right_ab.to(torch.float64) - warped.to(torch.float64)).abs()
    l1 = torch.where(m, diff, torch.zeros_like(diff)).sum() / count
    total = weights.warp_l1 * l1
    if weights.warp_ssim:
        s = imageops.ssim(right_ab, warped, mask).to(torch.float64)
        total = total + weights.warp_ssim * (1 - s)
    return total


def _check_finite(parts: dict) -> None:
    for name, value in parts.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise DivergenceError(name, v)


def total_generator_loss(parts: dict, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the generator terms; the warp term carries its own weights."""
    _check_finite({k: parts[k] for k in GENERATOR_PARTS})
    return (
        weights.reconstruction * (parts["rec_aa"] + parts["rec_bb"])
        + weights.cycle * (parts["cyc_aba"] + parts["cyc_bab"])
        + weights.adversarial * (parts["adv_a"] + parts["adv_b"])
        + parts["warp"]
    )


def total_discriminator_loss(parts: dict) -> torch.Tensor:
    _check_finite({k: parts[k] for k in ("adv_d_a", "adv_d_b")})
    return parts["adv_d_a"] + parts["adv_d_b"]
