"""Disparity comparison metrics and report emission.

MAD here is the median of absolute disparity errors over pixels with defined
ground truth (not the deviation from the median). Set-level numbers pool all
pixels of all items rather than averaging per-image values.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DimensionError, EmptySupportError, ManifestError


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    arr = np.asarray(x, dtype=np.float64)
    return arr.reshape(arr.shape[-2:]) if arr.ndim == 3 and arr.shape[0] == 1 else arr


def mask_defined(gt) -> np.ndarray:
    g = _np(gt)
    with np.errstate(invalid="ignore"):
        return np.isfinite(g) & (g >= 0)


def _abs_errors(pred, gt, mask) -> np.ndarray:
    p, g = _np(pred), _np(gt)
    m = np.asarray(mask, dtype=bool)
    if p.shape != g.shape or m.shape != g.shape:
        raise DimensionError(f"shape mismatch: pred {p.shape}, gt {g.shape}, mask {m.shape}")
    if not m.any():
        raise EmptySupportError("no pixel with defined ground truth")
    return np.abs(p[m] - g[m])


def mad(pred, gt, mask) -> float:
    """Median absolute error in pixels; even counts average the central pair."""
    return float(np.median(_abs_errors(pred, gt, mask)))


def px_accuracy(pred, gt, mask, tau: float) -> float:
    """Percentage of masked pixels whose error is at most ``tau``."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    err = _abs_errors(pred, gt, mask)
    return 100.0 * np.count_nonzero(err <= tau) / err.size


@dataclass
class ItemMetrics:
    id: str
    mad: float
    acc_3px: float
    acc_1px: float
    valid_pixel_count: int


@dataclass
class EvalReport:
    mad: float
    acc_3px: float
    acc_1px: float
    valid_pixel_count: int
    items: list[ItemMetrics] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        lines = [
            "# disparity evaluation (pixel-pooled)",
            f"{'id':<24}{'MAD':>10}{'3px-acc%':>12}{'1px-acc%':>12}{'pixels':>10}",
        ]
        for it in self.items:
            lines.append(f"{it.id:<24}{it.mad:>10.4f}{it.acc_3px:>12.3f}{it.acc_1px:>12.3f}{it.valid_pixel_count:>10d}")
        lines.append(f"{'POOLED':<24}{self.mad:>10.4f}{self.acc_3px:>12.3f}{self.acc_1px:>12.3f}{self.valid_pixel_count:>10d}")
        return "\n".join(lines) + "\n"

    def records(self) -> str:
        out = [json.dumps({"kind": "item", **asdict(it)}) for it in self.items]
        summary = {k: v for k, v in asdict(self).items() if k != "items"}
        out.append(json.dumps({"kind": "pooled", **summary}))
        return "\n".join(out) + "\n"

    def write(self, table_path, records_path) -> None:
        Path(table_path).write_text(self.table())
        Path(records_path).write_text(self.records())


def _summarise(errors: np.ndarray) -> tuple[float, float, float]:
    if errors.size == 0:
        return float("nan"), float("nan"), float("nan")
    return (
        float(np.median(errors)),
        100.0 * np.count_nonzero(errors <= 3.0) / errors.size,
        100.0 * np.count_nonzero(errors <= 1.0) / errors.size,
    )


def evaluate(preds: dict, gts: dict) -> EvalReport:
    """Pool errors over every item; ``preds`` and ``gts`` map id -> disparity map."""
    if set(preds) != set(gts):
        missing = sorted(set(gts) - set(preds))
        extra = sorted(set(preds) - set(gts))
        raise ManifestError(f"prediction/ground-truth ids differ (missing {missing[:5]}, unexpected {extra[:5]})")
    if not gts:
        raise ManifestError("nothing to evaluate: empty id set")
    pooled, items = [], []
    for key in sorted(gts):
        m = mask_defined(gts[key])
        err = _abs_errors(preds[key], gts[key], m) if m.any() else np.empty(0)
        pooled.append(err)
        items.append(ItemMetrics(key, *_summarise(err), int(err.size)))
    allerr = np.concatenate(pooled)
    if allerr.size == 0:
        raise EmptySupportError("no pixel with defined ground truth in the whole set")
    return EvalReport(*_summarise(allerr), int(allerr.size), items)
