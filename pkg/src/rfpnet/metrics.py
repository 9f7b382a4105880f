"""Segmentation quality metrics: overlap (DSC) and surface distances (ASSD,
95th-percentile Hausdorff), with spacing-aware exact Euclidean distances.

Surface voxels are foreground voxels with at least one 6-connected background
neighbor; the volume border counts as background. Distances are pooled from
both directions (prediction surface to reference surface and back), so every
reported distance metric is symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

_FACE_OFFSETS = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def dsc(pred: np.ndarray, ref: np.ndarray, k: int) -> float:
    """Dice overlap 2|A∩B| / (|A|+|B|) for class k. NaN when both masks are
    empty (vacuous class)."""
    if pred.shape != ref.shape:
        raise ValueError(f"volumes differ in shape: {pred.shape} vs {ref.shape}")
    a = pred == k
    b = ref == k
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return float("nan")
    return 2.0 * int((a & b).sum()) / (na + nb)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels exposed to the background through any face."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1)
    interior = np.ones_like(m)
    for dx, dy, dz in _FACE_OFFSETS:
        sl = tuple(slice(1 + d, 1 + d + s) for d, s in zip((dx, dy, dz), m.shape))
        interior &= padded[sl]
    return m & ~interior


def surface_distances(pred_mask: np.ndarray, ref_mask: np.ndarray,
                      spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Pooled bidirectional nearest-surface distances in mm.

    Raises ValueError on an empty mask; callers report the metric as missing
    rather than zero.
    """
    pm = np.asarray(pred_mask, dtype=bool)
    rm = np.asarray(ref_mask, dtype=bool)
    if pm.shape != rm.shape:
        raise ValueError(f"masks differ in shape: {pm.shape} vs {rm.shape}")
    if not pm.any() or not rm.any():
        raise ValueError("surface distances are undefined for an empty mask")
    ps = surface_voxels(pm)
    rs = surface_voxels(rm)
    spacing = tuple(float(s) for s in spacing)
    dist_to_ref = ndimage.distance_transform_edt(~rs, sampling=spacing)
    dist_to_pred = ndimage.distance_transform_edt(~ps, sampling=spacing)
    return np.concatenate([dist_to_ref[ps], dist_to_pred[rs]])


def assd(distances: np.ndarray) -> float:
    """Mean of the pooled surface-distance multiset."""
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("assd of an empty distance multiset")
    return float(d.mean())


def hd95(distances: np.ndarray) -> float:
    """95th percentile of the pooled distances, linear interpolation between
    order statistics."""
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("hd95 of an empty distance multiset")
    return float(np.percentile(d, 95.0))


@dataclass
class ClassResult:
    dsc: float          # NaN when vacuous (both masks empty)
    assd: float         # NaN when either mask is empty
    hd95: float
    vacuous: bool = False
    missing_surface: bool = False


@dataclass
class CaseResult:
    case_id: str
    per_class: dict = field(default_factory=dict)  # class index -> ClassResult


@dataclass
class MetricsReport:
    """Per-case results plus per-class corpus mean and standard deviation.

    Vacuous or surface-missing entries are excluded from the aggregates and
    kept flagged in the per-case records.
    """
    cases: list = field(default_factory=list)
    classes: tuple = ()

    def aggregate(self):
        out = {}
        for k in self.classes:
            for metric in ("dsc", "assd", "hd95"):
                vals = [getattr(c.per_class[k], metric) for c in self.cases
                        if k in c.per_class and np.isfinite(getattr(c.per_class[k], metric))]
                if vals:
                    out[(k, metric)] = (float(np.mean(vals)), float(np.std(vals)), len(vals))
                else:
                    out[(k, metric)] = (float("nan"), float("nan"), 0)
        return out

    def mean_foreground_dsc(self) -> float:
        vals = []
        for c in self.cases:
            for k, r in c.per_class.items():
                if k != 0 and np.isfinite(r.dsc):
                    vals.append(r.dsc)
        return float(np.mean(vals)) if vals else float("nan")


def evaluate_case(case_id: str, pred: np.ndarray, ref: np.ndarray,
                  spacing=(1.0, 1.0, 1.0), classes=None) -> CaseResult:
    """All three metrics for every requested class of one volume pair."""
    if classes is None:
        classes = sorted(set(np.unique(ref)) | set(np.unique(pred)))
        classes = [int(k) for k in classes if k != 0]
    result = CaseResult(case_id=case_id)
    for k in classes:
        d = dsc(pred, ref, k)
        vacuous = not np.isfinite(d)
        pm = pred == k
        rm = ref == k
        if pm.any() and rm.any():
            dist = surface_distances(pm, rm, spacing)
            result.per_class[k] = ClassResult(dsc=d, assd=assd(dist), hd95=hd95(dist),
                                              vacuous=vacuous)
        else:
            result.per_class[k] = ClassResult(dsc=d, assd=float("nan"), hd95=float("nan"),
                                              vacuous=vacuous, missing_surface=True)
    return result


def evaluate_corpus(pairs, spacing=(1.0, 1.0, 1.0), classes=None) -> MetricsReport:
    """pairs: iterable of (case_id, predicted labels, reference labels)."""
    report = MetricsReport()
    seen = set()
    for case_id, pred, ref in pairs:
        case = evaluate_case(case_id, pred, ref, spacing, classes)
        report.cases.append(case)
        seen.update(case.per_class.keys())
    report.classes = tuple(sorted(seen)) if classes is None else tuple(classes)
    return report
