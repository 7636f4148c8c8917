"""Boundary evaluation: tolerance matching, ODS/OIS, Dice, Hausdorff.

The match radius is resolution-relative: ``radius = d * diagonal`` where the
diagonal is ``sqrt(sum(extent**2))`` of each image. Predictions are binarized
at each threshold of the grid with no thinning or suppression.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching
from scipy.spatial import cKDTree

__all__ = [
    "EvalConfig",
    "MatchCounts",
    "ReportRow",
    "DEFAULT_SWEEP",
    "REPORT_HEADER",
    "match_edges",
    "pr_f",
    "count_table",
    "ods",
    "ois",
    "per_image_f",
    "dice",
    "hausdorff",
    "crispness_sweep",
    "to_points",
    "diagonal",
    "format_report",
]

DEFAULT_SWEEP = (0.01, 0.0075, 0.005, 0.003)
REPORT_HEADER = ("metric", "dataset", "phase", "d", "threshold", "precision", "recall", "f", "dsc", "hd")


def _default_thresholds():
    return [round(i / 100, 2) for i in range(1, 100)]


@dataclass
class EvalConfig:
    d: float = 0.0075
    thresholds: list = field(default_factory=_default_thresholds)
    hd_empty_value: float | None = None  # None -> image diagonal

    def validate(self) -> "EvalConfig":
        if not 0 < self.d < 1:
            raise ValueError(f"tolerance d must lie in (0, 1), got {self.d}")
        t = np.asarray(self.thresholds, dtype=float)
        if t.size == 0 or np.any(t <= 0) or np.any(t >= 1) or np.any(np.diff(t) <= 0):
            raise ValueError("thresholds must be strictly ascending within (0, 1)")
        return self


@dataclass(frozen=True)
class MatchCounts:
    tp_pred: int = 0
    n_pred: int = 0
    tp_gt: int = 0
    n_gt: int = 0

    def __add__(self, other: "MatchCounts") -> "MatchCounts":
        return MatchCounts(
            self.tp_pred + other.tp_pred,
            self.n_pred + other.n_pred,
            self.tp_gt + other.tp_gt,
            self.n_gt + other.n_gt,
        )


def to_points(mask) -> np.ndarray:
    return np.argwhere(np.asarray(mask).astype(bool))


def diagonal(shape) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(shape, dtype=float)))))


def _matched(pred_pts, gt_pts, radius: float, gt_tree=None) -> int:
    if len(pred_pts) == 0 or len(gt_pts) == 0:
        return 0
    tree = gt_tree if gt_tree is not None else cKDTree(gt_pts)
    # tiny slack so integer lattice distances equal to the radius count as inside
    neigh = tree.query_ball_point(pred_pts, r=radius + 1e-9)
    lengths = np.fromiter((len(n) for n in neigh), dtype=np.int64, count=len(neigh))
    if lengths.sum() == 0:
        return 0
    indptr = np.concatenate([[0], np.cumsum(lengths)])
    indices = np.fromiter((j for n in neigh for j in n), dtype=np.int64, count=int(lengths.sum()))
    if np.all(lengths <= 1):
        # every predicted point sees at most one gt point: matching = distinct targets hit
        return int(np.unique(indices).size)
    graph = csr_matrix((np.ones_like(indices, dtype=np.int8), indices, indptr), shape=(len(pred_pts), len(gt_pts)))
    match = maximum_bipartite_matching(graph, perm_type="column")
    return int(np.count_nonzero(match >= 0))


def match_edges(pred_pts, gt_pts, radius: float) -> MatchCounts:
    """Maximum-cardinality one-to-one matching within ``radius`` pixels."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    p = np.asarray(pred_pts, dtype=float).reshape(-1, np.asarray(pred_pts).shape[-1] if len(pred_pts) else 1)
    g = np.asarray(gt_pts, dtype=float).reshape(-1, np.asarray(gt_pts).shape[-1] if len(gt_pts) else 1)
    tp = _matched(p, g, radius)
    return MatchCounts(tp, len(p), tp, len(g))


def pr_f(c: MatchCounts):
    p = c.tp_pred / c.n_pred if c.n_pred else 1.0
    r = c.tp_gt / c.n_gt if c.n_gt else 1.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def _prf_arrays(tp, n_pred, n_gt):
    tp, n_pred, n_gt = (np.asarray(a, dtype=float) for a in (tp, n_pred, n_gt))
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(n_pred > 0, tp / np.maximum(n_pred, 1), 1.0)
        r = np.where(n_gt > 0, tp / np.maximum(n_gt, 1), 1.0)
        f = np.where(p + r > 0, 2 * p * r / np.where(p + r > 0, p + r, 1), 0.0)
    return p, r, f


def count_table(pred, gt, thresholds, d: float):
    """Per-threshold (tp, n_pred, n_gt) for one probability map.

    A pixel counts as predicted at threshold ``t`` when ``p >= t``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    t = np.asarray(thresholds, dtype=float)
    radius = d * diagonal(gt.shape)
    gt_pts = to_points(gt)
    n_gt = np.full(t.size, len(gt_pts), dtype=np.int64)
    cand = np.argwhere(pred >= t.min())
    vals = pred[tuple(cand.T)] if len(cand) else np.zeros(0)
    n_pred = np.array([(vals >= th).sum() for th in t], dtype=np.int64)
    tp = np.zeros(t.size, dtype=np.int64)
    if not len(gt_pts) or not len(cand):
        return tp, n_pred, n_gt

    # the neighbour graph of the loosest threshold contains every stricter one
    neigh = cKDTree(gt_pts).query_ball_point(cand.astype(float), r=radius + 1e-9)
    lengths = np.fromiter((len(n) for n in neigh), dtype=np.int64, count=len(neigh))
    indices = np.fromiter((j for n in neigh for j in n), dtype=np.int64, count=int(lengths.sum()))
    if np.all(lengths <= 1):
        target = np.full(len(cand), -1, dtype=np.int64)
        target[lengths == 1] = indices
        for i, th in enumerate(t):
            hit = target[(vals >= th) & (target >= 0)]
            tp[i] = np.unique(hit).size
        return tp, n_pred, n_gt
    indptr = np.concatenate([[0], np.cumsum(lengths)])
    graph = csr_matrix((np.ones(indices.size, dtype=np.int8), indices, indptr), shape=(len(cand), len(gt_pts)))
    for i, th in enumerate(t):
        rows = np.flatnonzero(vals >= th)
        if rows.size:
            match = maximum_bipartite_matching(graph[rows], perm_type="column")
            tp[i] = np.count_nonzero(match >= 0)
    return tp, n_pred, n_gt


def _tables(preds, gts, cfg: EvalConfig, d: float | None = None):
    preds, gts = list(preds), list(gts)
    if not preds:
        raise ValueError("empty dataset")
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground-truth maps")
    cfg.validate()
    d = cfg.d if d is None else d
    return np.stack([np.stack(count_table(p, g, cfg.thresholds, d)) for p, g in zip(preds, gts)])


def _ods_from(tables, thresholds):
    tp, n_pred, n_gt = tables.sum(axis=0)
    p, r, f = _prf_arrays(tp, n_pred, n_gt)
    i = int(np.argmax(f))  # first maximum = lowest threshold on ties
    return float(thresholds[i]), float(p[i]), float(r[i]), float(f[i]), i


def _ois_from(tables):
    tp, n_pred, n_gt = tables[:, 0], tables[:, 1], tables[:, 2]
    _, _, f = _prf_arrays(tp, n_pred, n_gt)
    best = np.argmax(f, axis=1)
    rows = np.arange(len(best))
    p, r, f_all = _prf_arrays(tp[rows, best].sum(), n_pred[rows, best].sum(), n_gt[rows, best].sum())
    return float(p), float(r), float(f_all), best


def ods(preds, gts, cfg: EvalConfig | None = None):
    """Best single dataset-wide threshold: returns ``(t, P, R, F)``."""
    cfg = cfg or EvalConfig()
    t, p, r, f, _ = _ods_from(_tables(preds, gts, cfg), cfg.thresholds)
    return t, p, r, f


def ois(preds, gts, cfg: EvalConfig | None = None):
    """Per-image best thresholds, counts pooled: returns ``(P, R, F)``."""
    cfg = cfg or EvalConfig()
    p, r, f, _ = _ois_from(_tables(preds, gts, cfg))
    return p, r, f


def per_image_f(preds, gts, cfg: EvalConfig | None = None) -> np.ndarray:
    """F-measure of every image at every grid threshold, shape ``[n, T]``."""
    cfg = cfg or EvalConfig()
    tables = _tables(preds, gts, cfg)
    return _prf_arrays(tables[:, 0], tables[:, 1], tables[:, 2])[2]


def dice(pred, gt) -> float:
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    denom = p.sum() + g.sum()
    return 1.0 if denom == 0 else float(2 * np.logical_and(p, g).sum() / denom)


def hausdorff(pred_pts, gt_pts, cfg: EvalConfig | None = None, shape=None) -> float:
    """Symmetric Hausdorff distance in pixels.

    When exactly one set is empty the configured penalty is returned, falling
    back to the diagonal of ``shape``.
    """
    p = np.asarray(pred_pts, dtype=float)
    g = np.asarray(gt_pts, dtype=float)
    if len(p) == 0 and len(g) == 0:
        return 0.0
    if len(p) == 0 or len(g) == 0:
        if cfg is not None and cfg.hd_empty_value is not None:
            return float(cfg.hd_empty_value)
        if shape is None:
            raise ValueError("an empty point set needs either cfg.hd_empty_value or the image shape")
        return diagonal(shape)
    d_pg = cKDTree(g).query(p)[0].max()
    d_gp = cKDTree(p).query(g)[0].max()
    return float(max(d_pg, d_gp))


def crispness_sweep(preds, gts, d_list=DEFAULT_SWEEP, cfg: EvalConfig | None = None):
    """ODS and OIS F at each tolerance; rows ``(d, ods_f, ois_f)``."""
    cfg = cfg or EvalConfig()
    d_list = [float(d) for d in d_list]
    if any(not 0 < d < 1 for d in d_list) or any(b >= a for a, b in zip(d_list, d_list[1:])):
        raise ValueError("d_list must be strictly descending within (0, 1)")
    rows = []
    for d in d_list:
        tables = _tables(preds, gts, cfg, d)
        f_ods = _ods_from(tables, cfg.thresholds)[3]
        f_ois = _ois_from(tables)[2]
        rows.append((d, f_ods, f_ois))
    return rows


@dataclass
class ReportRow:
    metric: str
    dataset: str
    phase: str
    d: float | None = None
    threshold: float | None = None
    precision: float | None = None
    recall: float | None = None
    f: float | None = None
    dsc: float | None = None
    hd: float | None = None

    def cells(self):
        out = []
        for name in REPORT_HEADER:
            v = getattr(self, name)
            out.append("" if v is None else v if isinstance(v, str) else f"{v:.6f}")
        return out


def format_report(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for row in rows:
        w.writerow(row.cells())
    return buf.getvalue()
