"""Detection matching, precision/recall/F1, localization error and the
quantization-floor oracle.

Matching is an optimal one-to-one assignment: maximize the number of pairs
within the match radius, then minimize total paired distance. Standard
deviations use the population (n) convention throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .grid import GridSpec

# Mean distance of a uniform point in a unit square to the square's center.
UNIT_SQUARE_MEAN_RADIUS = (math.sqrt(2.0) + math.log(1.0 + math.sqrt(2.0))) / 6.0

_BIG = 1e12


@dataclass
class MatchResult:
    pairs: list  # (pred idx, gt idx, distance_um)
    tp: int
    fp: int
    fn: int


@dataclass
class Metrics:
    precision: float
    recall: float
    f1: float
    mean_loc_error_um: float | None = None
    std_loc_error_um: float | None = None


def match_detections(pred, gt, radius_um: float) -> MatchResult:
    """Optimal assignment between predicted and ground-truth positions;
    only pairs within radius_um count as matches."""
    if radius_um <= 0:
        raise ValueError("radius must be positive")
    pred = np.asarray(pred, dtype=float).reshape(-1, 2)
    gt = np.asarray(gt, dtype=float).reshape(-1, 2)
    if len(pred) == 0 or len(gt) == 0:
        return MatchResult([], 0, len(pred), len(gt))
    d = np.linalg.norm(pred[:, None, :] - gt[None, :, :], axis=2)
    cost = np.where(d <= radius_um, d, _BIG)
    ri, ci = linear_sum_assignment(cost)
    pairs = [(int(i), int(j), float(d[i, j]))
             for i, j in zip(ri, ci) if d[i, j] <= radius_um]
    tp = len(pairs)
    return MatchResult(pairs, tp, len(pred) - tp, len(gt) - tp)


def f1_score(m: MatchResult) -> Metrics:
    """Precision = TP/(TP+FP), recall = TP/(TP+FN),
    F1 = 2*precision*recall/(precision+recall); empty denominators give 0."""
    precision = m.tp / (m.tp + m.fp) if (m.tp + m.fp) > 0 else 0.0
    recall = m.tp / (m.tp + m.fn) if (m.tp + m.fn) > 0 else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if (precision + recall) > 0 else 0.0)
    return Metrics(precision=precision, recall=recall, f1=f1)


def localization_error(m: MatchResult):
    """(mean, std) of paired distances in um; None when there are no pairs."""
    if m.tp == 0:
        return None, None
    d = np.array([p[2] for p in m.pairs])
    return float(d.mean()), float(d.std())


def evaluate(pred, gt, radius_um: float) -> Metrics:
    m = match_detections(pred, gt, radius_um)
    metrics = f1_score(m)
    mean, std = localization_error(m)
    metrics.mean_loc_error_um = mean
    metrics.std_loc_error_um = std
    return metrics


def aggregate(per_set) -> dict:
    """Field-wise mean and population std over a list of Metrics."""
    per_set = list(per_set)
    if not per_set:
        raise ValueError("cannot aggregate an empty list")
    out = {}
    for name in ("precision", "recall", "f1", "mean_loc_error_um", "std_loc_error_um"):
        vals = [getattr(m, name) for m in per_set]
        if any(v is None for v in vals):
            out[name] = {"mean": None, "std": None}
        else:
            arr = np.array(vals, dtype=float)
            out[name] = {"mean": float(arr.mean()), "std": float(arr.std())}
    return out


def quantization_oracle(grid: GridSpec, n_samples: int = 20000, seed: int = 0) -> float:
    """Monte Carlo mean Euclidean error of the encode->decode quantizer;
    the floor any K-bin offset predictor can reach. Equals
    0.3826 * pitch / K in closed form."""
    from .fieldsim import encode_labels
    from .network import Detection
    from .srusform import decode_detections

    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    xs = rng.uniform(0, grid.width_um, n_samples)
    zs = rng.uniform(0, grid.height_um, n_samples)
    K, pitch = grid.upsample_k, grid.pitch_um
    errs = np.empty(n_samples)
    for n, (x, z) in enumerate(zip(xs, zs)):
        lm, _ = encode_labels([(x, z)], grid)
        i, j = np.argwhere(lm.detect == 1)[0]
        det = Detection(i=int(i), j=int(j), kz=int(lm.zbin[i, j]),
                        kx=int(lm.xbin[i, j]), prob=1.0)
        (xd, zd), = decode_detections([det], grid)
        errs[n] = math.hypot(xd - x, zd - z)
    return float(errs.mean())


def quantization_floor_um(grid: GridSpec) -> float:
    """Closed-form counterpart of quantization_oracle."""
    return UNIT_SQUARE_MEAN_RADIUS * grid.pitch_um / grid.upsample_k
