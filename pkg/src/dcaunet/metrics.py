"""Overlap and boundary-distance metrics for integer label masks.

Dice is the classic 2|P∩R| / (|P| + |R|) with the both-empty case scored 1.
Hausdorff distance is computed between boundary pixels (foreground pixels
with a 4-neighbor outside the class, image border included) via an exact
Euclidean distance transform; the default reports the robust 95th-percentile
variant, with percentile=100 giving the classic symmetric maximum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ShapeError


@dataclass
class LabelMask:
    """H x W integer class ids with an optional isotropic pixel spacing."""

    ids: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        if self.ids.ndim != 2:
            raise ShapeError(f"label mask must be 2-d, got shape {self.ids.shape}")
        if not np.issubdtype(self.ids.dtype, np.integer):
            raise ConfigError(f"label mask must hold integers, got {self.ids.dtype}")
        if self.spacing <= 0:
            raise ConfigError(f"pixel spacing must be positive, got {self.spacing}")


def _as_mask(mask) -> LabelMask:
    return mask if isinstance(mask, LabelMask) else LabelMask(np.asarray(mask))


def _check_pair(pred: LabelMask, ref: LabelMask) -> None:
    if pred.ids.shape != ref.ids.shape:
        raise ShapeError(f"mask shapes differ: {pred.ids.shape} vs {ref.ids.shape}")


def dice(pred, ref, class_id: int) -> float:
    """2|P∩R|/(|P|+|R|); 1.0 when the class is absent from both masks."""
    pred, ref = _as_mask(pred), _as_mask(ref)
    _check_pair(pred, ref)
    p = pred.ids == class_id
    r = ref.ids == class_id
    total = int(p.sum()) + int(r.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & r).sum()) / total


def mean_dice(pred, ref, num_classes: int) -> tuple:
    """Mean Dice over foreground classes present in either mask, plus per-class values."""
    pred, ref = _as_mask(pred), _as_mask(ref)
    _check_pair(pred, ref)
    per_class = {}
    for class_id in range(1, num_classes):
        present = np.any(pred.ids == class_id) or np.any(ref.ids == class_id)
        if present:
            per_class[class_id] = dice(pred, ref, class_id)
    mean = float(np.mean(list(per_class.values()))) if per_class else 1.0
    return mean, per_class


def boundary_pixels(binary: np.ndarray) -> np.ndarray:
    """(n, 2) coordinates of foreground pixels 4-adjacent to background.

    Pixels on the image border count as boundary (outside is background).
    """
    binary = np.asarray(binary, dtype=bool)
    padded = np.pad(binary, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(binary & ~interior)


def hausdorff(pred, ref, class_id: int, percentile: int = 95) -> float:
    """Symmetric boundary distance between one class in two masks.

    Returns NaN when the class is empty on either side (a defined-missing
    result the aggregation excludes with a count). ``percentile=100`` is the
    classic maximum; 95 the robust variant: the max of the two directed
    percentiles.
    """
    if percentile not in (95, 100):
        raise ConfigError(f"percentile must be 95 or 100, got {percentile}")
    pred, ref = _as_mask(pred), _as_mask(ref)
    _check_pair(pred, ref)
    if pred.spacing != ref.spacing:
        raise ConfigError(f"pixel spacings differ: {pred.spacing} vs {ref.spacing}")
    p = pred.ids == class_id
    r = ref.ids == class_id
    if not p.any() or not r.any():
        return float("nan")
    bp = boundary_pixels(p)
    br = boundary_pixels(r)
    d_pr = _distances_to_boundary(bp, br, p.shape)
    d_rp = _distances_to_boundary(br, bp, p.shape)
    if percentile == 100:
        value = max(d_pr.max(), d_rp.max())
    else:
        value = max(np.percentile(d_pr, 95), np.percentile(d_rp, 95))
    return float(value) * pred.spacing


def _distances_to_boundary(points: np.ndarray, targets: np.ndarray, shape) -> np.ndarray:
    """Distance from each point to the nearest target pixel, via exact EDT."""
    target_mask = np.ones(shape, dtype=bool)
    target_mask[targets[:, 0], targets[:, 1]] = False
    edt = ndimage.distance_transform_edt(target_mask)
    return edt[points[:, 0], points[:, 1]]


def evaluate_masks(preds: Sequence, refs: Sequence, num_classes: int,
                   percentile: int = 95) -> dict:
    """Aggregate Dice/Hausdorff over (case, class) pairs into a report dict.

    Per-class Dice averages over cases where the class appears in either
    mask; per-class HD averages over cases where it appears in both, with the
    number of skipped (one-sided) cases reported. DSC is reported in percent.
    """
    if len(preds) != len(refs):
        raise ShapeError(f"{len(preds)} predictions vs {len(refs)} references")
    dice_values = {c: [] for c in range(1, num_classes)}
    hd_values = {c: [] for c in range(1, num_classes)}
    hd_missing = 0
    for pred, ref in zip(preds, refs):
        pred, ref = _as_mask(pred), _as_mask(ref)
        for class_id in range(1, num_classes):
            present = np.any(pred.ids == class_id) or np.any(ref.ids == class_id)
            if not present:
                continue
            dice_values[class_id].append(dice(pred, ref, class_id))
            value = hausdorff(pred, ref, class_id, percentile=percentile)
            if math.isnan(value):
                hd_missing += 1
            else:
                hd_values[class_id].append(value)
    per_class = {}
    for class_id in range(1, num_classes):
        entry = {}
        if dice_values[class_id]:
            entry["dsc_percent"] = 100.0 * float(np.mean(dice_values[class_id]))
        if hd_values[class_id]:
            entry["hd"] = float(np.mean(hd_values[class_id]))
        entry["cases"] = len(dice_values[class_id])
        per_class[class_id] = entry
    class_dscs = [e["dsc_percent"] for e in per_class.values() if "dsc_percent" in e]
    class_hds = [e["hd"] for e in per_class.values() if "hd" in e]
    return {
        "mean_dsc_percent": float(np.mean(class_dscs)) if class_dscs else 100.0,
        "mean_hd": float(np.mean(class_hds)) if class_hds else 0.0,
        "hd_percentile": percentile,
        "hd_missing_pairs": hd_missing,
        "per_class": per_class,
        "num_cases": len(preds),
    }


def format_report(report: dict) -> str:
    """Render an evaluation report as an aligned delimited table."""
    lines = []
    lines.append(f"cases\t{report['num_cases']}")
    lines.append(f"mean_dsc_percent\t{report['mean_dsc_percent']:.2f}")
    lines.append(f"mean_hd\t{report['mean_hd']:.4f}")
    lines.append(f"hd_percentile\t{report['hd_percentile']}")
    lines.append(f"hd_missing_pairs\t{report['hd_missing_pairs']}")
    lines.append("class\tdsc_percent\thd\tcases")
    for class_id, entry in sorted(report["per_class"].items()):
        dsc = f"{entry['dsc_percent']:.2f}" if "dsc_percent" in entry else "-"
        hd = f"{entry['hd']:.4f}" if "hd" in entry else "-"
        lines.append(f"{class_id}\t{dsc}\t{hd}\t{entry['cases']}")
    return "\n".join(lines) + "\n"
