"""Segmentation metrics (DSC percent, ASSD pixels) and report emission.

Surface extraction uses 4-connectivity with the image border counting as
background. ASSD is undefined when either mask is empty; such items are
excluded from aggregates and flagged instead of contributing infinities.
Aggregate std uses the population denominator.
"""

import csv
import json
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.spatial import cKDTree

ABLATION_LABELS = ("no-DA", "GAA-only", "GBL-only", "full")


def _as_mask_array(mask):
    arr = np.asarray(getattr(mask, "pixels", mask))
    if arr.ndim != 2:
        raise ValueError("mask must be 2-D")
    return arr.astype(bool)


def dsc(pred_mask, gt_mask):
    """Dice similarity coefficient in percent. Both empty counts as 100."""
    a = _as_mask_array(pred_mask)
    b = _as_mask_array(gt_mask)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 100.0
    inter = int(np.logical_and(a, b).sum())
    return 100.0 * 2.0 * inter / (na + nb)


def surface_points(mask):
    """(k, 2) row/col coordinates of foreground pixels with a background
    4-neighbor; pixels on the image border always qualify."""
    m = _as_mask_array(mask)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return np.argwhere(m & ~interior)


def assd(pred_mask, gt_mask):
    """Average symmetric surface distance in pixels."""
    a = _as_mask_array(pred_mask)
    b = _as_mask_array(gt_mask)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise ValueError("undefined surface distance: empty mask")
    sa = surface_points(a).astype(np.float64)
    sb = surface_points(b).astype(np.float64)
    d_ab, _ = cKDTree(sb).query(sa)
    d_ba, _ = cKDTree(sa).query(sb)
    return float((d_ab.sum() + d_ba.sum()) / (len(sa) + len(sb)))


class ItemResult(NamedTuple):
    item: str
    dsc: float
    assd: Optional[float]  # None when undefined (flagged)
    flags: tuple


@dataclass(frozen=True, eq=False)
class MetricReport:
    rows: tuple
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        meta = dict(self.metadata)
        meta.setdefault("std_convention", "population")
        object.__setattr__(self, "metadata", meta)
        for r in self.rows:
            if not 0.0 <= r.dsc <= 100.0:
                raise ValueError(f"DSC out of range for {r.item!r}: {r.dsc}")
            if r.assd is not None and r.assd < 0.0:
                raise ValueError(f"negative ASSD for {r.item!r}")

    @property
    def mean_dsc(self):
        return float(np.mean([r.dsc for r in self.rows])) if self.rows else None

    @property
    def std_dsc(self):
        return float(np.std([r.dsc for r in self.rows])) if self.rows else None

    def _defined_assd(self):
        return [r.assd for r in self.rows if r.assd is not None]

    @property
    def mean_assd(self):
        vals = self._defined_assd()
        return float(np.mean(vals)) if vals else None

    @property
    def std_assd(self):
        vals = self._defined_assd()
        return float(np.std(vals)) if vals else None

    @property
    def n_assd_undefined(self):
        return sum(1 for r in self.rows if r.assd is None)


def evaluate_masks(named_pairs, metadata=None):
    """Score (item, pred SegMask, gt SegMask) triples into a MetricReport."""
    rows = []
    for item, pred, gt in named_pairs:
        score = dsc(pred, gt)
        flags = []
        pe = not _as_mask_array(pred).any()
        ge = not _as_mask_array(gt).any()
        if pe:
            flags.append("empty_pred")
        if ge:
            flags.append("empty_gt")
        if pe or ge:
            dist = None
            flags.append("undefined_assd")
        else:
            dist = assd(pred, gt)
        rows.append(ItemResult(str(item), score, dist, tuple(flags)))
    return MetricReport(tuple(rows), dict(metadata or {}))


def write_report_csv(path, report):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["item", "dsc", "assd", "flags"])
        for r in report.rows:
            out.writerow([r.item, f"{r.dsc:.6f}",
                          "" if r.assd is None else f"{r.assd:.6f}",
                          ";".join(r.flags)])


def read_report_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["item", "dsc", "assd", "flags"]:
        raise ValueError(f"bad report header in {path}")
    items = []
    for item, d, a, flags in rows[1:]:
        items.append(ItemResult(item, float(d), float(a) if a else None,
                                tuple(f for f in flags.split(";") if f)))
    return MetricReport(tuple(items))


def write_report_json(path, report):
    payload = {
        "n_items": len(report.rows),
        "mean_dsc": report.mean_dsc,
        "std_dsc": report.std_dsc,
        "mean_assd": report.mean_assd,
        "std_assd": report.std_assd,
        "n_assd_undefined": report.n_assd_undefined,
        "metadata": report.metadata,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def tabulate_ablation(labeled_runs, csv_path, chart_path):
    """labeled_runs: iterable of (label, MetricReport), one entry per seed.

    Emits a CSV (fixed label order, deltas against no-DA) and a bar chart of
    mean DSC with population-std whiskers. Returns the table rows.
    """
    groups = {label: [] for label in ABLATION_LABELS}
    for label, report in labeled_runs:
        if label not in groups:
            raise ValueError(f"unknown ablation label {label!r}")
        groups[label].append(report.mean_dsc)
    missing = [label for label in ABLATION_LABELS if not groups[label]]
    if missing:
        raise ValueError(f"incomplete ablation set: missing {', '.join(missing)}")

    base = float(np.mean(groups["no-DA"]))
    rows = []
    for label in ABLATION_LABELS:
        means = groups[label]
        rows.append({
            "label": label,
            "n_runs": len(means),
            "mean_dsc": float(np.mean(means)),
            "std_dsc": float(np.std(means)),
            "delta_dsc": float(np.mean(means)) - base,
        })

    with open(csv_path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["label", "n_runs", "mean_dsc", "std_dsc", "delta_dsc"])
        for r in rows:
            out.writerow([r["label"], r["n_runs"], f"{r['mean_dsc']:.4f}",
                          f"{r['std_dsc']:.4f}", f"{r['delta_dsc']:+.4f}"])

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    xs = np.arange(len(rows))
    ax.bar(xs, [r["mean_dsc"] for r in rows],
           yerr=[r["std_dsc"] for r in rows], capsize=4, color="#4878a8")
    ax.set_xticks(xs)
    ax.set_xticklabels([r["label"] for r in rows])
    ax.set_ylabel("mean target DSC (%)")
    lo = min(r["mean_dsc"] - r["std_dsc"] for r in rows)
    hi = max(r["mean_dsc"] + r["std_dsc"] for r in rows)
    pad = max(1.0, 0.1 * (hi - lo))
    ax.set_ylim(max(0.0, lo - pad), min(100.0, hi + pad))
    fig.tight_layout()
    fig.savefig(chart_path, dpi=120)
    plt.close(fig)
    return rows
