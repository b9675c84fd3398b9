"""Region Dice, Hausdorff-95 surface distance and cohort summaries.

Report files
------------
``report.json``::

    {"cases": [{"case": id, "region": "ET", "dice": 91.2, "hd95": 2.0}, ...],
     "summary": {"ET": {"dice": {"mean", "std", "p5", "p25", "p75", "p95", "n"},
                        "hd95": {...}}, ...}}

``report.csv`` has the header ``case,region,dice,hd95``. Floats are written
with ``repr`` so both files parse back to the same numbers.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .formats import read_nifti, remap_labels
from .volume import GeometryError, LabelSchema, LabelVolume, ShapeError

EMPTY_HD95 = 373.13
PERCENTILES = (5, 25, 75, 95)
SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True, eq=False)
class RegionMask:
    name: str
    mask: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)


def region_masks(labels: LabelVolume, schema: LabelSchema | None = None) -> list[RegionMask]:
    schema = schema or LabelSchema.brats()
    labels.check(schema.num_classes)
    return [RegionMask(name, np.isin(labels.data, idx), labels.spacing) for name, idx in schema.regions.items()]


def _masks(a, b):
    ma = a.mask if isinstance(a, RegionMask) else np.asarray(a, dtype=bool)
    mb = b.mask if isinstance(b, RegionMask) else np.asarray(b, dtype=bool)
    if ma.shape != mb.shape:
        raise ShapeError(f"mask shapes differ: {ma.shape} vs {mb.shape}")
    return ma.astype(bool, copy=False), mb.astype(bool, copy=False)


def dice_score(pred, gt) -> float:
    """Dice in percent; 100 when both masks are empty."""
    a, b = _masks(pred, gt)
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 100.0
    return 100.0 * 2 * int(np.logical_and(a, b).sum()) / (sa + sb)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-connected background or out-of-volume neighbour."""
    eroded = ndimage.binary_erosion(mask, structure=SIX_CONNECTED, border_value=0)
    return mask & ~eroded


def directed_surface_distances(a: np.ndarray, b: np.ndarray, spacing) -> np.ndarray:
    """Distances (mm) from each boundary voxel of ``a`` to the nearest boundary voxel of ``b``."""
    ba, bb = boundary(a), boundary(b)
    dist = ndimage.distance_transform_edt(~bb, sampling=spacing)
    return dist[ba]


def _spacing(pred, gt, spacing):
    if spacing is not None:
        return tuple(float(s) for s in spacing)
    sp = [m.spacing for m in (pred, gt) if isinstance(m, RegionMask)]
    if len(sp) == 2 and not np.allclose(sp[0], sp[1]):
        raise GeometryError(f"spacing mismatch: {sp[0]} vs {sp[1]}")
    return tuple(sp[0]) if sp else (1.0, 1.0, 1.0)


def hausdorff95(pred, gt, spacing=None) -> float:
    """Symmetric 95th-percentile surface distance in mm.

    0 when both masks are empty, :data:`EMPTY_HD95` when exactly one is.
    """
    a, b = _masks(pred, gt)
    sp = _spacing(pred, gt, spacing)
    ea, eb = not a.any(), not b.any()
    if ea and eb:
        return 0.0
    if ea or eb:
        return EMPTY_HD95
    # voxels outside the joint bounding box are background for both masks,
    # so cropping to it changes neither the boundaries nor the distances
    idx = np.nonzero(a | b)
    box = tuple(slice(int(i.min()), int(i.max()) + 1) for i in idx)
    a, b = a[box], b[box]
    d_ab = np.percentile(directed_surface_distances(a, b, sp), 95)
    d_ba = np.percentile(directed_surface_distances(b, a, sp), 95)
    return float(max(d_ab, d_ba))


def summarize(values) -> dict:
    """Mean, sample std (0 for n = 1) and linearly interpolated percentiles."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot summarize an empty list")
    out = {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else 0.0}
    for q in PERCENTILES:
        out[f"p{q}"] = float(np.percentile(v, q, method="linear"))
    out["n"] = int(v.size)
    return out


@dataclass
class CaseResult:
    case_id: str
    dice: dict[str, float] = field(default_factory=dict)
    hd95: dict[str, float] = field(default_factory=dict)


def evaluate_case(case_id: str, pred: LabelVolume, gt: LabelVolume, schema: LabelSchema | None = None) -> CaseResult:
    schema = schema or LabelSchema.brats()
    if pred.dims != gt.dims:
        raise ShapeError(f"case {case_id}: prediction dims {pred.dims} != ground truth dims {gt.dims}")
    if not np.allclose(pred.spacing, gt.spacing):
        raise GeometryError(f"case {case_id}: spacing {pred.spacing} != {gt.spacing}")
    res = CaseResult(case_id)
    for rp, rg in zip(region_masks(pred, schema), region_masks(gt, schema)):
        res.dice[rp.name] = dice_score(rp, rg)
        res.hd95[rp.name] = hausdorff95(rp, rg)
    return res


@dataclass
class CohortReport:
    cases: list[CaseResult]
    regions: tuple[str, ...]

    @property
    def summary(self) -> dict:
        return {
            r: {
                "dice": summarize(c.dice[r] for c in self.cases),
                "hd95": summarize(c.hd95[r] for c in self.cases),
            }
            for r in self.regions
        }

    def to_json(self) -> str:
        rows = [{"case": c.case_id, "region": r, "dice": c.dice[r], "hd95": c.hd95[r]}
                for c in self.cases for r in self.regions]
        return json.dumps({"cases": rows, "summary": self.summary}, indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case", "region", "dice", "hd95"])
        for c in self.cases:
            for r in self.regions:
                w.writerow([c.case_id, r, repr(c.dice[r]), repr(c.hd95[r])])
        return buf.getvalue()

    @classmethod
    def _from_rows(cls, rows) -> "CohortReport":
        cases: dict[str, CaseResult] = {}
        regions: list[str] = []
        for row in rows:
            c = cases.setdefault(row["case"], CaseResult(row["case"]))
            c.dice[row["region"]] = float(row["dice"])
            c.hd95[row["region"]] = float(row["hd95"])
            if row["region"] not in regions:
                regions.append(row["region"])
        return cls(list(cases.values()), tuple(regions))

    @classmethod
    def from_json(cls, text: str) -> "CohortReport":
        return cls._from_rows(json.loads(text)["cases"])

    @classmethod
    def from_csv(cls, text: str) -> "CohortReport":
        return cls._from_rows(csv.DictReader(io.StringIO(text)))

    def table(self) -> str:
        """Summary laid out like the usual challenge table."""
        head = f"{'ROI':<4} {'Dice mean':>9} {'std':>6} {'p25':>6} {'p5':>6} | {'HD95 mean':>9} {'std':>6} {'p75':>6} {'p95':>6}"
        lines = [head, "-" * len(head)]
        summ = self.summary
        for r in self.regions:
            d, h = summ[r]["dice"], summ[r]["hd95"]
            lines.append(
                f"{r:<4} {d['mean']:>9.1f} {d['std']:>6.1f} {d['p25']:>6.1f} {d['p5']:>6.1f} | "
                f"{h['mean']:>9.1f} {h['std']:>6.1f} {h['p75']:>6.1f} {h['p95']:>6.1f}"
            )
        return "\n".join(lines)


def _case_files(directory: Path) -> dict[str, Path]:
    out = {}
    for p in sorted(Path(directory).iterdir()):
        for suffix in (".nii.gz", ".nii"):
            if p.name.endswith(suffix) and p.is_file():
                out[p.name[: -len(suffix)]] = p
    return out


def evaluate_cohort(pred_dir, gt_dir, schema: LabelSchema | None = None, coding=None) -> CohortReport:
    """Evaluate every ``<case>.nii[.gz]`` label map in ``pred_dir`` against ``gt_dir``.

    Both directories hold label maps in the on-disk coding.
    """
    schema = schema or LabelSchema.brats()
    preds, gts = _case_files(pred_dir), _case_files(gt_dir)
    missing = sorted(set(preds) ^ set(gts))
    if missing:
        raise FileNotFoundError(f"cases without a counterpart: {missing}")
    results = []
    for case_id in sorted(preds):
        pred = remap_labels(read_nifti(preds[case_id], labels=True), coding, "to_internal")
        gt = remap_labels(read_nifti(gts[case_id], labels=True), coding, "to_internal")
        results.append(evaluate_case(case_id, pred, gt, schema))
    return CohortReport(results, tuple(schema.regions))
