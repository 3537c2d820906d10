"""Post-processing, overlap and surface-distance metrics, leave-one-out harness."""
from __future__ import annotations

import csv
import logging
import math
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import kernels
from .data import PatientCase, Volume, cohort_hash
from .train import pretrain_autoencoder, predict_volume, run_training

log = logging.getLogger(__name__)

_FACE_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


def _binary(v) -> np.ndarray:
    v = np.asarray(v)
    if v.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {v.shape}")
    return v != 0


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def largest_component(mask) -> np.ndarray:
    """Keep the largest 26-connected component.

    Size ties go to the component whose first voxel comes first in raster order.
    """
    m = _binary(mask)
    labels, sizes = kernels.label_components(np.ascontiguousarray(m, dtype=np.uint8))
    if len(sizes) == 0:
        return np.zeros_like(m)
    return labels == int(np.argmax(sizes)) + 1


def count_components(mask) -> int:
    return len(kernels.label_components(np.ascontiguousarray(_binary(mask), dtype=np.uint8))[1])


def ball(radius: int) -> np.ndarray:
    r = int(radius)
    z, y, x = np.mgrid[-r:r + 1, -r:r + 1, -r:r + 1]
    return z * z + y * y + x * x <= r * r


def morphological_closing(mask, radius_voxels: int = 1) -> np.ndarray:
    """Dilation then erosion with a voxel ball, computed as if the volume were
    embedded in an infinite empty background and cropped back."""
    m = _binary(mask)
    if radius_voxels < 1 or not m.any():
        return m.copy()
    r = int(radius_voxels)
    element = ball(r)
    padded = np.pad(m, r)
    closed = ndimage.binary_erosion(ndimage.binary_dilation(padded, element), element)
    return closed[r:-r, r:-r, r:-r]


def dice(pred, gt) -> float:
    p, g = _binary(pred), _binary(gt)
    _same_shape(p, g)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def ravd(pred, gt) -> float:
    """Relative absolute volume difference in percent, relative to the ground truth."""
    p, g = _binary(pred), _binary(gt)
    _same_shape(p, g)
    n_gt = int(g.sum())
    if n_gt == 0:
        raise ValueError("RAVD is undefined for an empty ground truth")
    return 100.0 * abs(int(p.sum()) - n_gt) / n_gt


@dataclass
class SurfaceSet:
    voxels: np.ndarray  # (n, 3) integer (z, y, x)
    spacing_mm: tuple[float, float, float]  # (x, y, z)

    def points_mm(self) -> np.ndarray:
        sx, sy, sz = self.spacing_mm
        return np.ascontiguousarray(self.voxels * np.array([sz, sy, sx], dtype=np.float64))


def surface(mask, spacing_mm=(1.0, 1.0, 1.0)) -> SurfaceSet:
    """Foreground voxels with at least one background face neighbour; outside counts as background."""
    m = _binary(mask)
    interior = ndimage.binary_erosion(m, _FACE_NEIGHBOURS, border_value=0)
    return SurfaceSet(np.argwhere(m & ~interior), tuple(float(s) for s in spacing_mm))


def _directed(pred, gt, spacing_mm) -> tuple[np.ndarray, np.ndarray]:
    p, g = _binary(pred), _binary(gt)
    _same_shape(p, g)
    if not p.any() or not g.any():
        raise ValueError("surface distances are undefined for an empty mask")
    sp = surface(p, spacing_mm).points_mm()
    sg = surface(g, spacing_mm).points_mm()
    return kernels.nearest_distances(sp, sg), kernels.nearest_distances(sg, sp)


def assd(pred, gt, spacing_mm=(1.0, 1.0, 1.0)) -> float:
    a, b = _directed(pred, gt, spacing_mm)
    return float((a.sum() + b.sum()) / (len(a) + len(b)))


def mssd(pred, gt, spacing_mm=(1.0, 1.0, 1.0)) -> float:
    a, b = _directed(pred, gt, spacing_mm)
    return float(max(a.max(), b.max()))


def postprocess(labels: np.ndarray, classes: int, radius_voxels: int = 1) -> list[np.ndarray]:
    """Per foreground class: keep the largest component, then close it."""
    return [morphological_closing(largest_component(labels == c), radius_voxels) for c in range(1, classes)]


METRICS = ("dice", "ravd_percent", "assd_mm", "mssd_mm")


@dataclass
class StructureMetrics:
    structure: int
    dice: float
    ravd_percent: float
    assd_mm: float  # nan when undefined
    mssd_mm: float
    flags: str = ""


@dataclass
class MetricReport:
    case_id: str
    structures: list[StructureMetrics]
    mean: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.mean:
            self.mean = {}
            for m in METRICS:
                vals = [getattr(s, m) for s in self.structures if not math.isnan(getattr(s, m))]
                self.mean[m] = float(np.mean(vals)) if vals else float("nan")


def evaluate_case(pred: Volume, gt: Volume, case_id: str = "", radius_voxels: int = 1,
                  postprocessing: bool = True) -> MetricReport:
    """Post-process the prediction per structure and score it against the ground truth.

    A structure missing from the post-processed prediction keeps its Dice and
    RAVD, gets NaN surface distances flagged ``empty_prediction``, and is left
    out of the surface-distance means.
    """
    if pred.data.shape != gt.data.shape:
        raise ValueError(f"dimension mismatch: {pred.data.shape} vs {gt.data.shape}")
    if pred.spacing_mm != gt.spacing_mm:
        raise ValueError("spacing mismatch between prediction and ground truth")
    classes = max(gt.classes, pred.classes, int(gt.data.max()) + 1)
    if postprocessing:
        structures = postprocess(pred.data, classes, radius_voxels)
    else:
        structures = [pred.data == c for c in range(1, classes)]
    rows = []
    for c, p in enumerate(structures, start=1):
        g = gt.data == c
        flags = []
        if not g.any():
            raise ValueError(f"structure {c} absent from the ground truth")
        if p.any():
            a = assd(p, g, gt.spacing_mm)
            h = mssd(p, g, gt.spacing_mm)
        else:
            a = h = float("nan")
            flags.append("empty_prediction")
        rows.append(StructureMetrics(c, dice(p, g), ravd(p, g), a, h, ";".join(flags)))
    return MetricReport(case_id, rows)


# ---------------------------------------------------------------------------
# CSV and table output

CASE_COLUMNS = ["case_id", "structure", "dice", "ravd_percent", "assd_mm", "mssd_mm", "flags"]
AGGREGATE_COLUMNS = ["method", "metric", "mean", "std", "n"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.9g}"
    return str(v)


def case_rows(report: MetricReport) -> list[list[str]]:
    rows = [[report.case_id, str(s.structure), _fmt(s.dice), _fmt(s.ravd_percent), _fmt(s.assd_mm),
             _fmt(s.mssd_mm), s.flags] for s in report.structures]
    rows.append([report.case_id, "mean"] + [_fmt(report.mean[m]) for m in METRICS] + [""])
    return rows


def write_case_csv(path, reports: Sequence[MetricReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CASE_COLUMNS)
        for r in reports:
            w.writerows(case_rows(r))


@dataclass
class Aggregate:
    method: str
    mean: dict[str, float]
    std: dict[str, float]
    n: dict[str, int]

    @classmethod
    def from_reports(cls, method: str, reports: Sequence[MetricReport]) -> Aggregate:
        mean, std, n = {}, {}, {}
        for m in METRICS:
            vals = np.array([r.mean[m] for r in reports], dtype=np.float64)
            vals = vals[~np.isnan(vals)]
            n[m] = int(len(vals))
            mean[m] = float(vals.mean()) if len(vals) else float("nan")
            std[m] = float(vals.std()) if len(vals) else float("nan")
        return cls(method, mean, std, n)

    def rows(self) -> list[list[str]]:
        return [[self.method, m, _fmt(self.mean[m]), _fmt(self.std[m]), str(self.n[m])] for m in METRICS]

    def table_cells(self) -> list[str]:
        """Cells in the ``mean±std`` layout; Dice in percent."""
        scale = {"dice": 100.0}
        return [f"{self.mean[m] * scale.get(m, 1.0):.1f}±{self.std[m] * scale.get(m, 1.0):.1f}" for m in METRICS]


def write_aggregate_csv(path, aggregates: Sequence[Aggregate]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_COLUMNS)
        for a in aggregates:
            w.writerows(a.rows())


def format_table(aggregates: Sequence[Aggregate]) -> str:
    header = ["Method", "Dice", "RAVD", "ASSD", "MSSD"]
    body = [[a.method] + a.table_cells() for a in aggregates]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# leave-one-out


@dataclass
class LooResult:
    method: str
    reports: list[MetricReport]
    aggregate: Aggregate
    fold_seeds: list[int]
    fold_hashes: list[str]


def leave_one_out(cases: Sequence[PatientCase], net_cfg, train_cfg, out_dir=None,
                  ae_cache: dict | None = None, radius_voxels: int = 1) -> LooResult:
    """Hold each case out once: train on the rest, predict and score the held-out case.

    Fold ``i`` uses seed ``train_cfg.seed ^ i``. ``ae_cache`` (keyed by the
    training cohort hash and seed) lets several methods reuse one identical
    auto-encoder pretraining per fold.
    """
    if len(cases) < 2:
        raise ValueError("leave-one-out needs at least two cases")
    method = train_cfg.method.value
    reports, seeds, hashes = [], [], []
    for i, held_out in enumerate(cases):
        train_cases = [c for c in cases if c.case_id != held_out.case_id]
        fold_cfg = replace(train_cfg, seed=train_cfg.seed ^ i)
        fold_hash = cohort_hash(train_cases)
        pretrained = None
        if train_cfg.method.needs_encoder and ae_cache is not None:
            key = (fold_hash, fold_cfg.seed, fold_cfg.ae_lr, fold_cfg.pretrain_epochs, fold_cfg.batch_size)
            if key not in ae_cache:
                ae_cache[key] = pretrain_autoencoder(train_cases, net_cfg, fold_cfg)
            pretrained = ae_cache[key]
        fold_dir = Path(out_dir) / f"fold_{held_out.case_id}" if out_dir is not None else None
        if fold_dir is not None:
            run = run_training(train_cases, net_cfg, fold_cfg, fold_dir, pretrained=pretrained)
            segmenter = run.segmenter
        else:
            with tempfile.TemporaryDirectory() as tmp:
                segmenter = run_training(train_cases, net_cfg, fold_cfg, tmp, pretrained=pretrained).segmenter
        report = evaluate_case(predict_volume(segmenter, held_out.image), held_out.mask, held_out.case_id,
                               radius_voxels)
        log.info("%s fold %s dice %.4f", method, held_out.case_id, report.mean["dice"])
        reports.append(report)
        seeds.append(fold_cfg.seed)
        hashes.append(fold_hash)
    aggregate = Aggregate.from_reports(method, reports)
    if out_dir is not None:
        write_case_csv(Path(out_dir) / "per_case.csv", reports)
        write_aggregate_csv(Path(out_dir) / "aggregate.csv", [aggregate])
    return LooResult(method, reports, aggregate, seeds, hashes)
