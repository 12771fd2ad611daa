"""Keypoint extraction, thresholded matching and localization metrics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import geom
from .geom import ARRAY_GRID, GridSpec


@dataclass(frozen=True)
class Keypoint:
    position: tuple
    score: float


@dataclass
class MatchReport:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    # (prediction index, truth index, distance)
    pairs: list = field(default_factory=list)

    @property
    def cost(self) -> float:
        return float(sum(d for _, _, d in self.pairs))


@dataclass(frozen=True)
class Protocol:
    peak_thresh: float = 0.5
    nms_radius: float = 1.0
    resolution: float = 0.3
    average: str = "micro"

    def __post_init__(self):
        if not 0 < self.peak_thresh < 1:
            raise ValueError("peak_thresh must lie in (0, 1)")
        if self.average not in ("micro", "macro"):
            raise ValueError("average must be 'micro' or 'macro'")


SYNTHETIC = Protocol()
REAL = Protocol(resolution=1.0)


def extract_keypoints(h, grid: GridSpec = ARRAY_GRID, peak_thresh: float = 0.5, nms_radius: float = 1.0):
    """Strict 8-neighbourhood maxima above ``peak_thresh``, greedily kept in
    descending score order; a peak closer than ``nms_radius`` to an already
    kept one is dropped. Positions are cell centres."""
    values = np.asarray(getattr(h, "values", h), dtype=np.float64)
    if hasattr(h, "grid"):
        grid = h.grid
    rows, cols = values.shape
    pad = np.pad(values, 1, constant_values=-np.inf)
    neigh = np.max(
        [pad[1 + dr : 1 + dr + rows, 1 + dc : 1 + dc + cols] for dr in (-1, 0, 1) for dc in (-1, 0, 1) if dr or dc],
        axis=0,
    )
    r, c = np.nonzero((values > neigh) & (values >= peak_thresh))
    order = np.argsort(-values[r, c], kind="stable")
    kept = []
    for i in order:
        p = geom.grid_to_world(grid, (c[i], r[i]))
        if all(math.dist(p, k.position) >= nms_radius for k in kept):
            kept.append(Keypoint((float(p[0]), float(p[1])), float(values[r[i], c[i]])))
    return kept


def _positions(points):
    out = [k.position if isinstance(k, Keypoint) else k for k in points]
    return np.asarray(out, dtype=np.float64).reshape(-1, 2)


def match(preds, truths, resolution: float = 0.3) -> MatchReport:
    """One-to-one matching with the most pairs within ``resolution`` and,
    among those, the smallest total distance."""
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    p, t = _positions(preds), _positions(truths)
    if len(p) == 0 or len(t) == 0:
        return MatchReport(0, len(p), len(t), [])
    d = np.linalg.norm(p[:, None, :] - t[None, :, :], axis=-1)
    feasible = d <= resolution
    # a penalty above any feasible total makes cardinality the first criterion
    big = (min(len(p), len(t)) + 1) * resolution + 1.0
    rows, cols = linear_sum_assignment(np.where(feasible, d, big))
    pairs = [(int(i), int(j), float(d[i, j])) for i, j in zip(rows, cols) if feasible[i, j]]
    tp = len(pairs)
    return MatchReport(tp, len(p) - tp, len(t) - tp, pairs)


def _ratio(num, den, tp, fp, fn):
    if tp + fp + fn == 0:
        return 1.0
    return num / den if den else 0.0


def metrics(r: MatchReport) -> dict:
    """Precision, recall, F1 and match RMSE (``None`` without matches).

    An empty scene with no predictions scores 1 on every ratio; a zero
    denominator otherwise scores 0.
    """
    precision = _ratio(r.tp, r.tp + r.fp, r.tp, r.fp, r.fn)
    recall = _ratio(r.tp, r.tp + r.fn, r.tp, r.fp, r.fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    rmse = math.sqrt(sum(d * d for _, _, d in r.pairs) / r.tp) if r.tp else None
    return {"precision": precision, "recall": recall, "f1": f1, "rmse": rmse}


def evaluate_heatmaps(heatmaps, truths, grid: GridSpec = ARRAY_GRID, protocol: Protocol = SYNTHETIC) -> dict:
    """Aggregate metrics over predicted heatmaps ``(N, rows, cols)``."""
    if len(heatmaps) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if len(heatmaps) != len(truths):
        raise ValueError(f"{len(heatmaps)} heatmaps for {len(truths)} ground-truth sets")
    tp = fp = fn = 0
    sq = []
    per_sample = []
    for h, t in zip(heatmaps, truths):
        kps = extract_keypoints(h, grid, protocol.peak_thresh, protocol.nms_radius)
        r = match(kps, t, protocol.resolution)
        tp, fp, fn = tp + r.tp, fp + r.fp, fn + r.fn
        sq += [d * d for _, _, d in r.pairs]
        per_sample.append(metrics(r))
    out = metrics(MatchReport(tp, fp, fn, []))
    if protocol.average == "macro":
        for k in ("precision", "recall", "f1"):
            out[k] = float(np.mean([m[k] for m in per_sample]))
    out["rmse"] = math.sqrt(sum(sq) / len(sq)) if sq else None
    out.update(tp=tp, fp=fp, fn=fn, n_samples=len(heatmaps))
    return out


def evaluate_dataset(model, dataset, protocol: Protocol = SYNTHETIC, batch_size: int = 64) -> dict:
    """Run ``model`` over ``dataset`` and score its heatmaps.

    ``model`` is anything with ``predict(dataset, batch_size)`` returning
    ``(N, rows, cols)`` heatmaps, or the string ``"oracle"`` to score the
    labels themselves.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if isinstance(model, str) and model == "oracle":
        if dataset.labels is None:
            raise ValueError("oracle evaluation needs labels")
        heatmaps = dataset.labels
    else:
        heatmaps = model.predict(dataset, batch_size=batch_size)
    return evaluate_heatmaps(heatmaps, dataset.sources, dataset.grid, protocol)


REPORT_KEYS = ("precision", "recall", "f1", "rmse", "tp", "fp", "fn", "n_samples")


def write_metrics_json(path, report: dict):
    Path(path).write_text(json.dumps({k: report.get(k) for k in REPORT_KEYS}, indent=2, sort_keys=True) + "\n")


def append_csv_row(path, row: dict, columns=("name",) + REPORT_KEYS):
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        if new:
            w.writeheader()
        w.writerow(row)
