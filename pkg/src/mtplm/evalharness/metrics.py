"""Downstream metrics: accuracy, Spearman, contact maps and Precision@k."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .. import kernels

CONTACT_THRESHOLD = 8.0
MIN_SEPARATION = 6


class MetricError(ValueError):
    pass


class DegenerateInput(MetricError):
    pass


class LengthMismatch(MetricError):
    pass


class NoQualifyingPairs(MetricError):
    pass


class NonFiniteCoordinate(MetricError):
    pass


def accuracy(pred: Sequence[int], true: Sequence[int], ignore_index: int = -1) -> float:
    """Fraction of matching labels; positions where ``true == ignore_index`` are skipped."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise LengthMismatch(f"{pred.shape} vs {true.shape}")
    keep = true != ignore_index
    if not keep.any():
        raise LengthMismatch("no labelled positions")
    return float((pred[keep] == true[keep]).mean())


def rankdata(x: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties given their average rank."""
    return kernels.average_ranks(np.asarray(x, dtype=np.float64))


def spearman(pred: Sequence[float], target: Sequence[float]) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 1:
        raise LengthMismatch(f"{pred.shape} vs {target.shape}")
    if len(pred) < 2:
        raise DegenerateInput("need at least two points")
    rx = rankdata(pred)
    ry = rankdata(target)
    rx -= rx.mean()
    ry -= ry.mean()
    sxx, syy = float(rx @ rx), float(ry @ ry)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInput("constant input; correlation undefined")
    return float(np.clip((rx @ ry) / math.sqrt(sxx * syy), -1.0, 1.0))


def contact_map_from_coords(ca_coords) -> np.ndarray:
    """Binary ``[L, L]`` map: 1 where C-alpha distance < 8.0 and i != j."""
    xyz = np.asarray(ca_coords, dtype=np.float64)
    if xyz.ndim != 2 or xyz.shape[1] != 3:
        raise MetricError(f"expected [L, 3] coordinates, got {xyz.shape}")
    if not np.isfinite(xyz).all():
        raise NonFiniteCoordinate("coordinates contain NaN or inf")
    diff = xyz[:, None, :] - xyz[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    cmap = (dist < CONTACT_THRESHOLD).astype(np.int8)
    np.fill_diagonal(cmap, 0)
    return cmap


def top_k(length: int, fraction: str | int) -> int:
    """k for ``"L"`` or ``"L/5"`` (floored, at least 1); integers pass through."""
    if fraction == "L":
        return length
    if fraction == "L/5":
        return max(1, length // 5)
    return int(fraction)


def precision_at(scores, truth, k: str | int = "L", min_separation: int = MIN_SEPARATION) -> float:
    """Precision of the top-k scored pairs with ``|i - j| >= min_separation``.

    Scores are symmetrized first. Ties are broken by ``(i, j)`` order. The
    denominator is always ``k``, even when fewer qualifying pairs exist.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truth)
    L = s.shape[0]
    if s.shape != (L, L) or t.shape != (L, L):
        raise LengthMismatch(f"scores {s.shape} and truth {t.shape} must both be [L, L]")
    s = 0.5 * (s + s.T)
    ii, jj = np.triu_indices(L, k=min_separation)
    if len(ii) == 0:
        raise NoQualifyingPairs(f"no pairs with separation >= {min_separation} at L={L}")
    n = top_k(L, k)
    order = np.lexsort((jj, ii, -s[ii, jj]))[:n]
    return float((t[ii[order], jj[order]] != 0).sum() / n)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof=1; 0.0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def format_mean_std(values: Sequence[float], scale: float = 100.0) -> str:
    m, s = mean_std(values)
    return f"{m * scale:.2f} ± {s * scale:.2f}"
