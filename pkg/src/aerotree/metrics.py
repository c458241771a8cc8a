"""Overlap and tree-structure metrics for airway segmentations.

All rates are percentages. Ground truth and prediction are clipped at the
top of the lungs before anything is measured; centerline-based rates (TD,
BD) use the skeleton of the clipped ground truth.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .errors import ParameterError, ShapeError, UndefinedMetricError
from .preprocess import clip_trachea_at_lung_top
from .topology import CenterlineGraph, build_graph, skeletonize
from .volume import VoxelGrid

__all__ = [
    "ConfusionCounts",
    "MetricParams",
    "CaseRow",
    "Aggregate",
    "MetricsReport",
    "METRIC_COLUMNS",
    "CSV_COLUMNS",
    "confusion",
    "dsc",
    "precision",
    "sensitivity",
    "specificity",
    "tree_length_detected",
    "branch_detected",
    "evaluate_case",
    "aggregate",
]

# report order of the six rates
METRIC_COLUMNS = ("TD", "BD", "DSC", "Precision", "Sensitivity", "Specificity")
CSV_COLUMNS = ("case_id",) + METRIC_COLUMNS + ("n_gt_branches", "n_detected_branches")
_ROW_FIELDS = ("td_pct", "bd_pct", "dsc_pct", "precision_pct", "sensitivity_pct",
               "specificity_pct")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ParameterError(f"negative voxel count in {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricParams:
    branch_detect_fraction: float = 0.8
    specificity_domain: str = "full-grid"
    td_mode: str = "length"

    def __post_init__(self):
        if not 0 < self.branch_detect_fraction <= 1:
            raise ParameterError(
                f"branch_detect_fraction must lie in (0, 1], got {self.branch_detect_fraction}"
            )
        if self.specificity_domain not in ("full-grid", "lung-mask"):
            raise ParameterError(f"unknown specificity_domain {self.specificity_domain!r}")
        if self.td_mode not in ("length", "voxels"):
            raise ParameterError(f"unknown td_mode {self.td_mode!r}")


def _binary(grid: VoxelGrid, what: str) -> np.ndarray:
    if not grid.is_binary:
        raise ParameterError(f"{what} must be a binary mask, got unit {grid.unit!r}")
    return grid.samples != 0


def confusion(pred: VoxelGrid, gt: VoxelGrid, domain: Optional[np.ndarray] = None) -> ConfusionCounts:
    """Voxel tallies of `pred` against `gt`, optionally restricted to `domain`."""
    p, g = _binary(pred, "pred"), _binary(gt, "gt")
    if p.shape != g.shape:
        raise ShapeError(f"pred {p.shape} and gt {g.shape} differ in dims")
    if domain is not None:
        if domain.shape != p.shape:
            raise ShapeError("domain mask differs in dims")
        p, g = p[domain], g[domain]
    n = p.size
    tp = int(np.count_nonzero(p & g))
    n_p = int(np.count_nonzero(p))
    n_g = int(np.count_nonzero(g))
    return ConfusionCounts(tp, n_p - tp, n_g - tp, n - n_p - n_g + tp)


def _pct(num: int, den: int, name: str) -> float:
    if den == 0:
        raise UndefinedMetricError(f"{name} is undefined (zero denominator)")
    return 100 * int(num) / int(den)


def dsc(c: ConfusionCounts) -> float:
    return _pct(2 * c.tp, 2 * c.tp + c.fp + c.fn, "DSC")


def precision(c: ConfusionCounts) -> float:
    return _pct(c.tp, c.tp + c.fp, "precision")


def sensitivity(c: ConfusionCounts) -> float:
    return _pct(c.tp, c.tp + c.fn, "sensitivity")


def specificity(c: ConfusionCounts) -> float:
    return _pct(c.tn, c.tn + c.fp, "specificity")


def _inside(pred: np.ndarray, voxels: np.ndarray) -> np.ndarray:
    if len(voxels) == 0:
        return np.zeros(0, dtype=bool)
    return pred[tuple(np.asarray(voxels).T)]


def _check_dims(graph: CenterlineGraph, pred: VoxelGrid) -> np.ndarray:
    p = _binary(pred, "pred")
    if tuple(graph.dims) != p.shape:
        raise ShapeError(f"graph dims {graph.dims} differ from pred dims {p.shape}")
    return p


def tree_length_detected(gt_graph: CenterlineGraph, pred: VoxelGrid, mode: str = "length") -> float:
    """Share of the ground-truth centerline covered by `pred`, in percent.

    In ``"length"`` mode every centerline step (pair of consecutive path
    voxels) contributes its physical length when both of its voxels are
    foreground in `pred`. In ``"voxels"`` mode the rate is the share of
    skeleton voxels inside `pred`.
    """
    p = _check_dims(gt_graph, pred)
    if mode == "voxels":
        vox = gt_graph.voxels()
        return _pct(int(np.count_nonzero(_inside(p, vox))), len(vox), "TD")
    if mode != "length":
        raise ParameterError(f"unknown TD mode {mode!r}")
    spacing = np.asarray(gt_graph.spacing, dtype=float)
    # steps come in at most 7 offset types; count them as integers per type
    all_steps = np.zeros(8, dtype=np.int64)
    hit_steps = np.zeros(8, dtype=np.int64)
    for b in gt_graph.branches:
        path = b.voxel_path
        if b.closed and len(path) > 2:
            path = np.vstack([path, path[:1]])
        if len(path) < 2:
            continue
        kind = np.abs(np.diff(path, axis=0)) @ np.array([1, 2, 4])
        ins = _inside(p, path)
        all_steps += np.bincount(kind, minlength=8)
        hit_steps += np.bincount(kind[ins[:-1] & ins[1:]], minlength=8)
    unit = np.array([[(k >> a) & 1 for a in range(3)] for k in range(8)], dtype=float)
    length = np.sqrt(((unit * spacing) ** 2).sum(axis=1))
    total = float(all_steps @ length)
    if total == 0:
        raise UndefinedMetricError("TD is undefined for a centerline of zero length")
    # divide first so that full coverage is exactly 100
    return 100.0 * (float(hit_steps @ length) / total)


def branch_detected(
    gt_graph: CenterlineGraph, pred: VoxelGrid, params: MetricParams = MetricParams()
):
    """Percentage of ground-truth branches found in `pred`, and their number.

    A branch counts when at least ``branch_detect_fraction`` of its
    centerline voxels lie inside the prediction.
    """
    p = _check_dims(gt_graph, pred)
    n = len(gt_graph.branches)
    if n == 0:
        raise UndefinedMetricError("BD is undefined without ground-truth branches")
    found = 0
    for b in gt_graph.branches:
        ins = _inside(p, b.voxel_path)
        if np.count_nonzero(ins) >= params.branch_detect_fraction * len(ins) - 1e-12:
            found += 1
    return 100 * found / n, found


@dataclass
class CaseRow:
    case_id: str
    td_pct: float = math.nan
    bd_pct: float = math.nan
    dsc_pct: float = math.nan
    precision_pct: float = math.nan
    sensitivity_pct: float = math.nan
    specificity_pct: float = math.nan
    n_gt_branches: int = 0
    n_detected_branches: int = 0
    flag: Optional[str] = None

    @property
    def flagged(self) -> bool:
        return self.flag is not None

    def values(self) -> List[float]:
        return [getattr(self, f) for f in _ROW_FIELDS]

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_case(
    pred: VoxelGrid,
    gt: VoxelGrid,
    lung: VoxelGrid,
    params: MetricParams = MetricParams(),
    case_id: str = "case",
) -> CaseRow:
    """All six rates for one case after clipping both masks at the lung top."""
    if not (pred.same_geometry(gt) and gt.same_geometry(lung)):
        raise ShapeError("pred, gt and lung masks must share one geometry")
    pred_c = clip_trachea_at_lung_top(pred, lung)
    gt_c = clip_trachea_at_lung_top(gt, lung)
    domain = (lung.samples != 0) if params.specificity_domain == "lung-mask" else None

    counts = confusion(pred_c, gt_c)
    spec_counts = counts if domain is None else confusion(pred_c, gt_c, domain)
    graph = build_graph(skeletonize(gt_c))
    bd, found = branch_detected(graph, pred_c, params)
    return CaseRow(
        case_id=case_id,
        td_pct=tree_length_detected(graph, pred_c, params.td_mode),
        bd_pct=bd,
        dsc_pct=dsc(counts),
        precision_pct=precision(counts),
        sensitivity_pct=sensitivity(counts),
        specificity_pct=specificity(spec_counts),
        n_gt_branches=len(graph.branches),
        n_detected_branches=found,
    )


@dataclass(frozen=True)
class Aggregate:
    mean: dict
    std: dict
    n: int
    excluded: tuple = ()
    ddof: int = 1

    def fmt(self, column: str, digits: int = 2) -> str:
        return f"{self.mean[column]:.{digits}f}±{self.std[column]:.{digits}f}"


def _mean_std(values: Sequence[float], ddof: int):
    v = np.asarray(values, dtype=float)
    mean = float(v.mean())
    std = float(v.std(ddof=ddof)) if len(v) > ddof else 0.0
    return mean, std


def aggregate(rows: Iterable, ddof: int = 1) -> Aggregate:
    """Mean and standard deviation of every rate over unflagged rows.

    Rows may be `CaseRow` objects or plain sequences of values in
    ``METRIC_COLUMNS`` order (or scalars, for a single column). With fewer
    rows than ``ddof + 1`` the deviation is reported as 0.
    """
    rows = list(rows)
    if not rows:
        raise ParameterError("aggregate needs at least one row")
    if ddof not in (0, 1):
        raise ParameterError("ddof must be 0 (population) or 1 (sample)")
    excluded = tuple(r.case_id for r in rows if isinstance(r, CaseRow) and r.flagged)
    kept = [r for r in rows if not (isinstance(r, CaseRow) and r.flagged)]
    if not kept:
        raise ParameterError("every row is flagged; nothing to aggregate")
    table = []
    for r in kept:
        if isinstance(r, CaseRow):
            table.append(r.values())
        else:
            table.append(list(np.atleast_1d(np.asarray(r, dtype=float))))
    width = len(table[0])
    if any(len(t) != width for t in table):
        raise ParameterError("rows differ in length")
    cols = METRIC_COLUMNS[:width] if width <= len(METRIC_COLUMNS) else range(width)
    mean, std = {}, {}
    for k, name in enumerate(cols):
        mean[name], std[name] = _mean_std([t[k] for t in table], ddof)
    return Aggregate(mean, std, len(kept), excluded, ddof)


@dataclass
class MetricsReport:
    rows: List[CaseRow]
    ddof: int = 1
    summary: Aggregate = field(init=False, default=None)

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: r.case_id)
        ok = [r for r in self.rows if not r.flagged]
        self.summary = aggregate(self.rows, self.ddof) if ok else None

    def to_dict(self) -> dict:
        out = {
            "columns": list(METRIC_COLUMNS),
            "cases": [r.to_dict() for r in self.rows],
            "ddof": self.ddof,
        }
        if self.summary is not None:
            out["aggregate"] = {
                "n": self.summary.n,
                "mean": self.summary.mean,
                "std": self.summary.std,
            }
        out["excluded"] = [r.case_id for r in self.rows if r.flagged]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            vals = ["" if r.flagged else repr(float(v)) for v in r.values()]
            w.writerow([r.case_id, *vals, r.n_gt_branches, r.n_detected_branches])
        return buf.getvalue()

    def table(self, digits: int = 2) -> str:
        """Plain-text table of the rows followed by a mean±std line."""
        head = ["case"] + [f"{c} (%)" for c in METRIC_COLUMNS]
        lines = ["  ".join(head)]
        for r in self.rows:
            if r.flagged:
                lines.append(f"{r.case_id}  FLAGGED: {r.flag}")
            else:
                lines.append("  ".join([r.case_id] + [f"{v:.{digits}f}" for v in r.values()]))
        if self.summary is not None:
            total = [self.summary.fmt(c, digits) for c in METRIC_COLUMNS]
            lines.append("  ".join(["Total"] + total))
            if self.summary.excluded:
                lines.append(f"excluded from total: {', '.join(self.summary.excluded)}")
        return "\n".join(lines)
