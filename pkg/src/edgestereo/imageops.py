"""Image kernels shared by data loading, the losses and the CLI.

Every function accepts a single image ``(C, H, W)`` or a batch ``(N, C, H, W)``
and returns the same rank it was given. Pixel conventions:

* signed images live in [-1, 1] (network inputs/outputs),
* unit rasters live in [0, 1] (edge maps, masks),
* disparities are free-valued pixel offsets, NaN where undefined.

All kernels are written with plain tensor arithmetic so autograd flows through
them when the inputs require grad.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DimensionError, EmptySupportError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _batched(img: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if img.dim() == 3:
        return img.unsqueeze(0), True
    if img.dim() == 4:
        return img, False
    raise DimensionError(f"expected (C,H,W) or (N,C,H,W), got shape {tuple(img.shape)}")


def _unbatch(img: torch.Tensor, squeeze: bool) -> torch.Tensor:
    return img.squeeze(0) if squeeze else img


def to_grayscale(img: torch.Tensor) -> torch.Tensor:
    x, single = _batched(img)
    if x.shape[1] != 3:
        raise DimensionError(f"grayscale needs 3 channels, got {x.shape[1]}")
    r, g, b = x[:, 0:1], x[:, 1:2], x[:, 2:3]
    gray = LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b
    return _unbatch(gray, single)


def _smoothed_difference(p: torch.Tensor, axis: int) -> torch.Tensor:
    # Difference along `axis`, [1, 2, 1] smoothing across the other spatial axis.
    # Gx and Gy share this code path so transposing the input transposes the
    # output bit for bit.
    other = 5 - axis  # spatial axes are 2 and 3
    n_axis = p.shape[axis] - 2
    n_other = p.shape[other] - 2
    ahead = p.narrow(axis, 2, n_axis)
    behind = p.narrow(axis, 0, n_axis)
    d = ahead - behind
    return d.narrow(other, 0, n_other) + 2 * d.narrow(other, 1, n_other) + d.narrow(other, 2, n_other)


def sobel_edges(img: torch.Tensor) -> torch.Tensor:
    """Sobel gradient magnitude, rescaled per image so its maximum is 1.

    Three-channel input is converted to luminance first. Borders use replicate
    padding; a constant image yields an all-zero map.
    """
    x, single = _batched(img)
    if x.shape[1] == 3:
        x = to_grayscale(x)
    elif x.shape[1] != 1:
        raise DimensionError(f"sobel_edges takes 1 or 3 channels, got {x.shape[1]}")
    if x.shape[2] < 3 or x.shape[3] < 3:
        raise DimensionError(f"image must be at least 3x3, got {x.shape[2]}x{x.shape[3]}")

    p = F.pad(x, (1, 1, 1, 1), mode="replicate")
    gx = _smoothed_difference(p, axis=3)
    gy = _smoothed_difference(p, axis=2)
    mag = torch.sqrt(gx * gx + gy * gy)

    peak = mag.amax(dim=(1, 2, 3), keepdim=True)
    scaled = torch.where(peak > 0, mag / torch.where(peak > 0, peak, torch.ones_like(peak)), torch.zeros_like(mag))
    return _unbatch(scaled, single)


def warp_horizontal(src: torch.Tensor, disp: torch.Tensor, sign: int = 1):
    """Resample ``src`` along rows at ``u + sign * disp``.

    Returns ``(warped, mask)``. Samples whose source column falls outside
    ``[0, W-1]`` (or whose disparity is not finite) are zero and flagged false
    in the mask. The result is differentiable with respect to ``src``; the
    disparity is treated as a constant.
    """
    if sign not in (1, -1):
        raise ValueError(f"sign must be +1 or -1, got {sign}")
    x, single = _batched(src)
    d, _ = _batched(disp)
    if d.shape[1] != 1:
        raise DimensionError(f"disparity must have one channel, got {d.shape[1]}")
    if d.shape[0] != x.shape[0] or d.shape[2:] != x.shape[2:]:
        raise DimensionError(f"disparity {tuple(d.shape)} does not match image {tuple(x.shape)}")

    n, c, h, w = x.shape
    d = d.detach().to(x.dtype)
    cols = torch.arange(w, dtype=x.dtype, device=x.device).view(1, 1, 1, w)
    coord = cols + sign * d

    valid = torch.isfinite(coord) & (coord >= 0) & (coord <= w - 1)
    coord = torch.where(valid, coord, torch.zeros_like(coord))
    left = torch.floor(coord)
    frac = coord - left
    left_idx = left.long().clamp_(0, w - 1)
    right_idx = (left_idx + 1).clamp_(max=w - 1)

    v0 = torch.gather(x, 3, left_idx.expand(n, c, h, w))
    v1 = torch.gather(x, 3, right_idx.expand(n, c, h, w))
    out = (1 - frac) * v0 + frac * v1
    out = torch.where(valid, out, torch.zeros_like(out))

    mask = valid[:, 0]
    if single:
        return out.squeeze(0), mask.squeeze(0)
    return out, mask


@lru_cache(maxsize=8)
def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    k = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(k * k) / (2 * sigma * sigma))
    g = g / g.sum()
    return torch.outer(g, g)


def _window_sum(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    k = kernel.to(x.dtype).expand(c, 1, *kernel.shape)
    pad = kernel.shape[-1] // 2
    return F.conv2d(x, k, padding=pad, groups=c)


def ssim_map(a: torch.Tensor, b: torch.Tensor):
    """Per-pixel SSIM index of two signed batches ``(N, C, H, W)``.

    The Gaussian window is truncated at the image border and renormalised over
    the in-image taps, so images smaller than the window still have an index.
    Computation is carried out in float64.
    """
    x = (a.to(torch.float64) + 1) / 2
    y = (b.to(torch.float64) + 1) / 2
    h, w = x.shape[2:]
    window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    weight = _window_sum(torch.ones(1, 1, h, w, dtype=torch.float64, device=x.device), window)

    mu_x = _window_sum(x, window) / weight
    mu_y = _window_sum(y, window) / weight
    sxx = _window_sum(x * x, window) / weight - mu_x * mu_x
    syy = _window_sum(y * y, window) / weight - mu_y * mu_y
    sxy = _window_sum(x * y, window) / weight - mu_x * mu_y

    c1 = SSIM_K1**2  # dynamic range L = 1
    c2 = SSIM_K2**2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return num / den


def complete_windows(mask: torch.Tensor) -> torch.Tensor:
    """True where the SSIM window centred on a pixel holds no masked-out pixel."""
    m = mask.unsqueeze(1).to(torch.float64)
    box = torch.ones(SSIM_WINDOW, SSIM_WINDOW, dtype=torch.float64)
    holes = _window_sum(1 - m, box)
    return (holes < 0.5)[:, 0]


def ssim(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean SSIM over pixels whose whole window lies on the valid support.

    ``a`` and ``b`` are signed images (mapped to [0, 1] internally, dynamic
    range 1). Returns a 0-dim tensor in the input dtype.
    """
    x, _ = _batched(a)
    y, _ = _batched(b)
    if x.shape != y.shape:
        raise DimensionError(f"ssim inputs differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")
    n, c, h, w = x.shape
    if mask is None:
        m = torch.ones(n, h, w, dtype=torch.bool, device=x.device)
    else:
        m = mask.unsqueeze(0) if mask.dim() == 2 else mask
        if m.shape != (n, h, w):
            raise DimensionError(f"mask {tuple(mask.shape)} does not match images {tuple(x.shape)}")

    ok = complete_windows(m.bool())
    count = int(ok.sum()) * c
    if count == 0:
        raise EmptySupportError("no SSIM window lies entirely on the valid mask")
    smap = ssim_map(x, y)
    total = torch.where(ok.unsqueeze(1), smap, torch.zeros_like(smap)).sum()
    return (total / count).to(x.dtype)


def resize_bilinear(img: torch.Tensor, rows: int, cols: int, domain: str = "signed") -> torch.Tensor:
    if rows < 1 or cols < 1:
        raise DimensionError(f"resize target must be positive, got {rows}x{cols}")
    x, single = _batched(img)
    if x.shape[2:] == (rows, cols):
        return _unbatch(x.clone(), single)
    out = F.interpolate(x, size=(rows, cols), mode="bilinear", align_corners=False)
    if domain == "signed":
        out = out.clamp(-1.0, 1.0)
    elif domain == "unit":
        out = out.clamp(0.0, 1.0)
    return _unbatch(out, single)


def resize_nearest(img: torch.Tensor, rows: int, cols: int) -> torch.Tensor:
    """Nearest-neighbour resize using the integer source index ``floor(i * in / out)``."""
    if rows < 1 or cols < 1:
        raise DimensionError(f"resize target must be positive, got {rows}x{cols}")
    x, single = _batched(img)
    h, w = x.shape[2:]
    ri = torch.div(torch.arange(rows) * h, rows, rounding_mode="floor")
    ci = torch.div(torch.arange(cols) * w, cols, rounding_mode="floor")
    out = x[:, :, ri][:, :, :, ci]
    return _unbatch(out, single)


def resize_disparity(disp: torch.Tensor, rows: int, cols: int) -> torch.Tensor:
    """Nearest-neighbour resample, magnitudes scaled by the width ratio."""
    x, _ = _batched(disp)
    scale = cols / x.shape[3]
    return resize_nearest(disp, rows, cols) * scale


def normalize(raster) -> torch.Tensor:
    """8-bit ``(H, W, C)`` or ``(H, W)`` raster to a signed float32 ``(C, H, W)`` tensor."""
    arr = np.asarray(raster, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(torch.float32)
    return 2 * (t / 255.0) - 1


def denormalize(img: torch.Tensor) -> np.ndarray:
    """Signed ``(C, H, W)`` tensor to an 8-bit ``(H, W, C)`` array, rounding half away from zero."""
    v = (img.detach().to(torch.float64).cpu().numpy() + 1.0) * 127.5
    v = np.clip(v, 0.0, 255.0)
    return np.floor(v + 0.5).astype(np.uint8).transpose(1, 2, 0)


def unit_to_bytes(img: torch.Tensor) -> np.ndarray:
    """Unit-domain ``(C, H, W)`` tensor to 8-bit ``(H, W, C)``."""
    v = np.clip(img.detach().to(torch.float64).cpu().numpy(), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8).transpose(1, 2, 0)


def is_signed(img: torch.Tensor) -> bool:
    return bool(torch.isfinite(img).all()) and float(img.min()) >= -1.0 and float(img.max()) <= 1.0


__all__ = [
    "to_grayscale",
    "sobel_edges",
    "warp_horizontal",
    "ssim",
    "ssim_map",
    "complete_windows",
    "resize_bilinear",
    "resize_nearest",
    "resize_disparity",
    "normalize",
    "denormalize",
    "unit_to_bytes",
    "is_signed",
]
