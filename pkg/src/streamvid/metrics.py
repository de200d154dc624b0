"""Task metrics and the cross-task normalized average."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

AJ_THRESHOLDS = (1, 2, 4, 8, 16)
HIGHER, LOWER = "higher", "lower"


def top1(logits, labels):
    """Percent of argmax matches; ties go to the lowest class index."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("top1 needs at least one example")
    if logits.shape[:-1] != labels.shape:
        raise ContractError(f"{logits.shape[:-1]} predictions vs {labels.shape} labels")
    return float(np.mean(np.argmax(logits, axis=-1) == labels) * 100.0)


def box_iou(a, b):
    """IoU of ``[cx, cy, w, h]`` boxes, elementwise over leading axes."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    ax0, ay0 = a[..., 0] - a[..., 2] / 2, a[..., 1] - a[..., 3] / 2
    ax1, ay1 = a[..., 0] + a[..., 2] / 2, a[..., 1] + a[..., 3] / 2
    bx0, by0 = b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2
    bx1, by1 = b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2
    iw = np.clip(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0.0, None)
    ih = np.clip(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0.0, None)
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def miou(pred_boxes, gt_boxes):
    """Mean IoU over every object and frame."""
    ious = box_iou(pred_boxes, gt_boxes)
    if ious.size == 0:
        raise ContractError("miou needs at least one box")
    return float(ious.mean())


def jaccard_per_threshold(pred_xy, pred_visible, gt_xy, gt_visible, resolution, thresholds=AJ_THRESHOLDS):
    """Jaccard at each pixel threshold.

    Positions are normalised to ``[0, 1]`` and scaled by ``resolution``
    (``(width, height)`` or one number). A prediction is a true positive when
    both it and the target are visible and the pixel distance is strictly
    below the threshold. When nothing is visible on either side the score is 1.
    """
    scale = np.broadcast_to(np.asarray(resolution, dtype=np.float64), (2,))
    dist = np.linalg.norm((np.asarray(pred_xy) - np.asarray(gt_xy)) * scale, axis=-1)
    pv = np.asarray(pred_visible, dtype=bool)
    gv = np.asarray(gt_visible, dtype=bool)
    scores = []
    for thr in thresholds:
        close = dist < thr
        tp = np.sum(pv & gv & close)
        fp = np.sum(pv & ~(gv & close))
        fn = np.sum(gv & ~(pv & close))
        denom = tp + fp + fn
        scores.append(1.0 if denom == 0 else tp / denom)
    return np.array(scores)


def average_jaccard(pred_xy, pred_visible, gt_xy, gt_visible, resolution):
    return float(jaccard_per_threshold(pred_xy, pred_visible, gt_xy, gt_visible, resolution).mean())


def absrel(pred_depth, gt_depth, valid=None):
    """Mean of ``|d - d_hat| / d`` over valid pixels."""
    pred = np.asarray(pred_depth, dtype=np.float64)
    gt = np.asarray(gt_depth, dtype=np.float64)
    valid = gt > 0 if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ContractError("absrel needs at least one valid pixel")
    return float(np.mean(np.abs(gt[valid] - pred[valid]) / gt[valid]))


def _rot6d_to_matrix(r6):
    a1, a2 = r6[..., :3], r6[..., 3:6]
    b1 = a1 / np.linalg.norm(a1, axis=-1, keepdims=True)
    a2 = a2 - (b1 * a2).sum(-1, keepdims=True) * b1
    b2 = a2 / np.linalg.norm(a2, axis=-1, keepdims=True)
    return np.stack([b1, b2, np.cross(b1, b2)], axis=-1)


def rotation_angle_deg(R_pred, R_gt):
    """Geodesic angle between rotations: ``arccos((tr(R_pred^T R_gt) - 1) / 2)``."""
    rel = np.swapaxes(R_pred, -1, -2) @ R_gt
    cos = (np.trace(rel, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def rpe(pred_deltas, gt_deltas, to_mm=1.0):
    """Mean relative pose error between consecutive frames.

    Deltas are ``(..., 9)`` vectors: translation then the 6D rotation code.
    ``to_mm`` converts translation units to millimetres. Returns
    ``(translation_mm, rotation_degrees)``.
    """
    pred = np.asarray(pred_deltas, dtype=np.float64)
    gt = np.asarray(gt_deltas, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 9:
        raise ContractError(f"pose deltas must be matching (..., 9) arrays, got {pred.shape} and {gt.shape}")
    if pred.size == 0:
        raise ContractError("rpe needs at least one frame pair")
    trans = np.linalg.norm(pred[..., :3] - gt[..., :3], axis=-1) * to_mm
    rot = rotation_angle_deg(_rot6d_to_matrix(pred[..., 3:]), _rot6d_to_matrix(gt[..., 3:]))
    return float(trans.mean()), float(rot.mean())


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

@dataclass
class MetricTable:
    """Rows of per-column scores plus each column's direction (higher/lower is better)."""

    directions: dict
    rows: dict = field(default_factory=dict)

    def __post_init__(self):
        for col, d in self.directions.items():
            if d not in (HIGHER, LOWER):
                raise ContractError(f"column {col!r} direction must be {HIGHER!r} or {LOWER!r}, got {d!r}")

    @property
    def columns(self):
        return list(self.directions)

    def add_row(self, name, scores):
        unknown = set(scores) - set(self.directions)
        if unknown:
            raise ContractError(f"row {name!r} has undeclared columns {sorted(unknown)}")
        self.rows[name] = {k: (None if v is None else float(v)) for k, v in scores.items()}

    def column_best(self, column):
        values = [r.get(column) for r in self.rows.values()]
        values = [v for v in values if v is not None and math.isfinite(v)]
        if not values:
            raise ContractError(f"column {column!r} has no finite entry")
        return max(values) if self.directions[column] == HIGHER else min(values)

    def to_json(self):
        return json.dumps({"directions": self.directions, "rows": self.rows}, indent=2)

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        table = cls(dict(raw["directions"]))
        for name, scores in raw.get("rows", {}).items():
            table.add_row(name, scores)
        return table

    def format_text(self, extra=None, digits=4):
        """Aligned plain-text table; ``extra`` maps column name -> {row: value}."""
        extra = extra or {}
        headers = ["model"] + self.columns + list(extra)
        body = []
        for name, scores in self.rows.items():
            cells = [name]
            for col in self.columns:
                v = scores.get(col)
                cells.append("n/a" if v is None else f"{v:.{digits}g}")
            for col, vals in extra.items():
                v = vals.get(name)
                cells.append("n/a" if v is None else f"{v:.1f}")
            body.append(cells)
        widths = [max(len(r[i]) for r in [headers] + body) for i in range(len(headers))]
        line = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
        return "\n".join([line(headers), line(["-" * w for w in widths])] + [line(r) for r in body])


def normalized_average(table, row, columns=None):
    """Mean over ``columns`` of score/column-best (best/score for lower-better), in percent."""
    if row not in table.rows:
        raise ContractError(f"row {row!r} not in table")
    columns = table.columns if columns is None else list(columns)
    if not columns:
        raise ContractError("normalized average needs at least one column")
    ratios = []
    for col in columns:
        if col not in table.directions:
            raise ContractError(f"unknown column {col!r}")
        score = table.rows[row].get(col)
        if score is None or not math.isfinite(score):
            raise ContractError(f"row {row!r} has no score for column {col!r}")
        best = table.column_best(col)
        if table.directions[col] == HIGHER:
            if best == 0:
                raise ContractError(f"column {col!r} best is zero")
            ratios.append(score / best)
        else:
            if score == 0:
                raise ContractError(f"row {row!r} scores zero on lower-better column {col!r}")
            ratios.append(best / score)
    return 100.0 * sum(ratios) / len(ratios)


def normalized_averages(table, columns=None):
    return {name: normalized_average(table, name, columns) for name in table.rows}


def read_records(path):
    """JSON-lines prediction/ground-truth records, one object per frame."""
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_records(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
