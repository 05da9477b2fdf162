"""Evaluation suite for parcellations.

Spatial continuity (largest-component fraction per parcel), parcel size
coherence (std of parcel size fractions), pairwise cross-subject Dice,
group heatmaps with reference-atlas comparison, and ground-truth
validation utilities (Hungarian matching, adjusted Rand index).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .voxelgrid import Mask, connected_components

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Per-subject metrics
# ---------------------------------------------------------------------------

def spatial_continuity(parc, connectivity: int = 6) -> tuple[dict[int, float], float]:
    """Fraction of each parcel's voxels in its largest connected component.

    Returns (per-parcel SC, mean over nonempty parcels). Empty parcels are
    excluded from the mean.
    """
    per = {}
    for lab in range(parc.n):
        comps = connected_components(parc.mask, parc.labels, lab, connectivity)
        if not comps:
            continue
        total = sum(c.size for c in comps)
        per[lab] = max(c.size for c in comps) / total
    if not per:
        raise ValueError("parcellation has no labeled voxels")
    return per, float(np.mean(list(per.values())))


def parcel_size_coherence(parc) -> float:
    """Population std of parcel size fractions; unused labels count as zero."""
    counts = np.bincount(np.asarray(parc.labels), minlength=parc.n).astype(np.float64)
    fractions = counts / len(parc.mask)
    return float(np.std(fractions))


# ---------------------------------------------------------------------------
# Overlap metrics
# ---------------------------------------------------------------------------

def dice(a: np.ndarray, b: np.ndarray, grid_a=None, grid_b=None) -> float:
    """2|A∩B| / (|A|+|B|) over voxel index sets; two empty sets give 0."""
    if grid_a is not None and grid_b is not None and grid_a != grid_b:
        raise ValueError(f"grid mismatch: {grid_a.dims} vs {grid_b.dims}")
    a = np.asarray(a, dtype=np.int64).ravel()
    b = np.asarray(b, dtype=np.int64).ravel()
    if a.size == 0 and b.size == 0:
        log.warning("dice of two empty sets, defined as 0")
        return 0.0
    inter = np.intersect1d(a, b, assume_unique=False).size
    return 2.0 * inter / (a.size + b.size)


def cross_subject_dice(parcs) -> tuple[dict[int, float], float, list[int]]:
    """Mean Dice across all unordered subject pairs, per parcel label.

    All parcellations must share a grid and label space. Labels empty in
    every subject are excluded and reported. Returns
    (per-label mean, average over labels, excluded labels).
    """
    if len(parcs) < 2:
        raise ValueError("need at least two subjects")
    n = parcs[0].n
    grid = parcs[0].mask.grid
    for p in parcs[1:]:
        if p.n != n:
            raise ValueError("parcellations disagree on parcel count")
        if p.mask.grid != grid:
            raise ValueError("parcellations are not on a common grid")
    sets = [
        [p.mask.voxels[np.asarray(p.labels) == lab] for lab in range(n)] for p in parcs
    ]
    per: dict[int, float] = {}
    excluded: list[int] = []
    for lab in range(n):
        if all(sets[s][lab].size == 0 for s in range(len(parcs))):
            excluded.append(lab)
            continue
        vals = [
            dice(sets[i][lab], sets[j][lab])
            for i in range(len(parcs))
            for j in range(i + 1, len(parcs))
        ]
        per[lab] = float(np.mean(vals))
    if excluded:
        log.warning("cross_subject_dice: labels empty in all subjects: %s", excluded)
    avg = float(np.mean(list(per.values()))) if per else 0.0
    return per, avg, excluded


# ---------------------------------------------------------------------------
# Group heatmaps and atlas comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GroupHeatmap:
    """Per-voxel count of subjects assigning the voxel to one parcel label."""

    grid_dims: tuple[int, int, int]
    label: int
    counts: np.ndarray  # flat, length grid.size
    subjects: int

    @property
    def default_threshold(self) -> int:
        return self.subjects // 2


def group_heatmap(parcs, label: int) -> GroupHeatmap:
    """Count, per voxel, how many subjects labeled it ``label``."""
    grid = parcs[0].mask.grid
    counts = np.zeros(grid.size, dtype=np.int64)
    for p in parcs:
        if p.mask.grid != grid:
            raise ValueError("parcellations are not on a common grid")
        counts[p.mask.voxels[np.asarray(p.labels) == label]] += 1
    return GroupHeatmap(grid.dims, label, counts, len(parcs))


def binarize(heatmap: GroupHeatmap, threshold: int | None = None) -> np.ndarray:
    """Voxels counted in strictly more than ``threshold`` subjects."""
    t = heatmap.default_threshold if threshold is None else threshold
    return np.flatnonzero(heatmap.counts > t).astype(np.int64)


@dataclass
class AtlasComparison:
    """Many-to-one assignment of parcels to reference groups, with Dice."""

    assignment: list[int | None]      # per parcel: best group, None if empty
    per_parcel_dice: list[float]
    merged_dice: dict[int, float]     # per group, after union of its parcels
    merged_mean: float
    per_parcel_mean: float


def atlas_dice(parcel_sets, atlas_labels: np.ndarray, atlas_mask: Mask) -> AtlasComparison:
    """Compare group-level parcels against a reference label field.

    Each parcel is assigned to the reference group with maximal Dice
    (many-to-one allowed); parcels sharing a group are unioned and the
    group Dice recomputed. Groups left without parcels score 0.
    """
    atlas_labels = np.asarray(atlas_labels).ravel()
    if atlas_labels.size != len(atlas_mask):
        raise ValueError("atlas labels must cover the atlas mask")
    groups = [int(g) for g in np.unique(atlas_labels)]
    group_sets = {g: atlas_mask.voxels[atlas_labels == g] for g in groups}
    assignment: list[int | None] = []
    per_parcel: list[float] = []
    for pset in parcel_sets:
        pset = np.asarray(pset, dtype=np.int64)
        if pset.size == 0:
            assignment.append(None)
            per_parcel.append(0.0)
            continue
        scores = [dice(pset, group_sets[g]) for g in groups]
        best = int(np.argmax(scores))
        assignment.append(groups[best])
        per_parcel.append(float(scores[best]))
    merged: dict[int, float] = {}
    for g in groups:
        members = [np.asarray(parcel_sets[i], dtype=np.int64)
                   for i, a in enumerate(assignment) if a == g]
        union = np.unique(np.concatenate(members)) if members else np.array([], dtype=np.int64)
        merged[g] = dice(union, group_sets[g]) if union.size else 0.0
    scored = [d for d, a in zip(per_parcel, assignment) if a is not None]
    return AtlasComparison(
        assignment=assignment,
        per_parcel_dice=per_parcel,
        merged_dice=merged,
        merged_mean=float(np.mean(list(merged.values()))),
        per_parcel_mean=float(np.mean(scored)) if scored else 0.0,
    )


# ---------------------------------------------------------------------------
# Ground-truth validation utilities
# ---------------------------------------------------------------------------

def hungarian_match(overlap: np.ndarray) -> tuple[list[tuple[int, int]], float]:
    """One-to-one row/column assignment maximizing total overlap."""
    m = np.asarray(overlap, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("overlap matrix must be 2D")
    if m.size and m.min() < 0:
        raise ValueError("overlap matrix must be nonnegative")
    rows, cols = linear_sum_assignment(m, maximize=True)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    return pairs, float(m[rows, cols].sum())


def _comb2(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    return x * (x - 1.0) / 2.0


def adjusted_rand_index(labels_a: np.ndarray, labels_b: np.ndarray) -> float:
    """Chance-corrected pair-counting agreement of two labelings."""
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.size != b.size:
        raise ValueError(f"labelings differ in length: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("labelings are empty")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    na, nb = ai.max() + 1, bi.max() + 1
    cont = np.zeros((na, nb), dtype=np.int64)
    np.add.at(cont, (ai, bi), 1)
    sum_ij = _comb2(cont).sum()
    sum_a = _comb2(cont.sum(axis=1)).sum()
    sum_b = _comb2(cont.sum(axis=0)).sum()
    total = _comb2(np.array([a.size]))[0]
    expected = sum_a * sum_b / total if total > 0 else 0.0
    maximum = 0.5 * (sum_a + sum_b)
    if maximum == expected:  # both partitions trivial
        return 1.0
    return float((sum_ij - expected) / (maximum - expected))


def match_to_truth(parc, truth_labels: np.ndarray) -> tuple[list[tuple[int, int]], dict[int, float], float]:
    """Hungarian-match predicted parcels to ground-truth regions, then Dice.

    Returns (matched pairs, per-truth-region Dice of its matched parcel,
    mean over truth regions). Truth regions left unmatched score 0.
    """
    truth = np.asarray(truth_labels).ravel()
    if truth.size != len(parc.mask):
        raise ValueError("truth labels must cover the parcellation mask")
    pred = np.asarray(parc.labels)
    truth_ids = [int(t) for t in np.unique(truth)]
    overlap = np.zeros((parc.n, len(truth_ids)), dtype=np.int64)
    for col, t in enumerate(truth_ids):
        tsel = truth == t
        overlap[:, col] = np.bincount(pred[tsel], minlength=parc.n)
    pairs, _ = hungarian_match(overlap)
    per_region: dict[int, float] = {t: 0.0 for t in truth_ids}
    for p_lab, col in pairs:
        t = truth_ids[col]
        per_region[t] = dice(parc.mask.voxels[pred == p_lab], parc.mask.voxels[truth == t])
    return [(p, truth_ids[c]) for p, c in pairs], per_region, float(np.mean(list(per_region.values())))


# ---------------------------------------------------------------------------
# Aggregate report
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    """Everything the evaluation stage knows about a set of parcellations."""

    n: int
    subjects: list[str]
    sc_per_subject: dict[str, float]
    sc_mean: float
    psc_per_subject: dict[str, float]
    psc_mean: float
    dice_per_parcel: dict[int, float]
    dice_avg: float
    dice_excluded: list[int] = field(default_factory=list)
    ari_per_subject: dict[str, float] | None = None
    ari_mean: float | None = None
    matched_dice_per_subject: dict[str, float] | None = None
    matched_dice_mean: float | None = None
    atlas_per_parcel: list[float] | None = None
    atlas_assignment: list[int | None] | None = None
    atlas_merged: dict[int, float] | None = None
    atlas_merged_mean: float | None = None
    atlas_per_parcel_mean: float | None = None

    def to_dict(self) -> dict:
        out = {
            "n": self.n,
            "subjects": self.subjects,
            "sc_per_subject": self.sc_per_subject,
            "sc_mean": self.sc_mean,
            "psc_per_subject": self.psc_per_subject,
            "psc_mean": self.psc_mean,
            "dice_per_parcel": {str(k): v for k, v in self.dice_per_parcel.items()},
            "dice_avg": self.dice_avg,
            "dice_excluded": self.dice_excluded,
        }
        if self.ari_per_subject is not None:
            out["ari_per_subject"] = self.ari_per_subject
            out["ari_mean"] = self.ari_mean
            out["matched_dice_per_subject"] = self.matched_dice_per_subject
            out["matched_dice_mean"] = self.matched_dice_mean
        if self.atlas_merged is not None:
            out["atlas_per_parcel"] = self.atlas_per_parcel
            out["atlas_assignment"] = self.atlas_assignment
            out["atlas_merged"] = {str(k): v for k, v in self.atlas_merged.items()}
            out["atlas_merged_mean"] = self.atlas_merged_mean
            out["atlas_per_parcel_mean"] = self.atlas_per_parcel_mean
        return out

    def write_csv(self, path) -> None:
        """One aggregate row plus one row per subject, Table-style columns."""
        cols = ["row", "SC", "PSC", "Avg"] + [f"p_{i + 1}" for i in range(self.n)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            dice_cells = [self.dice_per_parcel.get(i, "") for i in range(self.n)]
            w.writerow(["mean", self.sc_mean, self.psc_mean, self.dice_avg] + dice_cells)
            for s in self.subjects:
                w.writerow([s, self.sc_per_subject[s], self.psc_per_subject[s], ""] + [""] * self.n)


def build_report(
    parcs,
    truth_labels: np.ndarray | None = None,
    atlas_labels: np.ndarray | None = None,
    atlas_mask: Mask | None = None,
    sc_connectivity: int = 6,
    heatmap_threshold: int | None = None,
) -> MetricReport:
    """Run the evaluation suite over parcellations of one cohort.

    ``truth_labels`` (per-voxel ground-truth regions, shared across the
    cohort) enables ARI and Hungarian-matched Dice. ``atlas_labels`` with
    ``atlas_mask`` enables the heatmap-binarized reference comparison.
    """
    n = parcs[0].n
    subjects = [p.subject_id for p in parcs]
    sc = {}
    psc = {}
    for p in parcs:
        _, sc[p.subject_id] = spatial_continuity(p, sc_connectivity)
        psc[p.subject_id] = parcel_size_coherence(p)
    if len(parcs) >= 2:
        per_label, avg, excluded = cross_subject_dice(parcs)
    else:
        per_label, avg, excluded = {}, 0.0, []
    report = MetricReport(
        n=n,
        subjects=subjects,
        sc_per_subject=sc,
        sc_mean=float(np.mean(list(sc.values()))),
        psc_per_subject=psc,
        psc_mean=float(np.mean(list(psc.values()))),
        dice_per_parcel=per_label,
        dice_avg=avg,
        dice_excluded=excluded,
    )
    if truth_labels is not None:
        ari = {}
        matched = {}
        for p in parcs:
            ari[p.subject_id] = adjusted_rand_index(p.labels, truth_labels)
            _, _, matched[p.subject_id] = match_to_truth(p, truth_labels)
        report.ari_per_subject = ari
        report.ari_mean = float(np.mean(list(ari.values())))
        report.matched_dice_per_subject = matched
        report.matched_dice_mean = float(np.mean(list(matched.values())))
    if atlas_labels is not None:
        if atlas_mask is None:
            raise ValueError("atlas_labels requires atlas_mask")
        parcel_sets = [binarize(group_heatmap(parcs, lab), heatmap_threshold) for lab in range(n)]
        cmp = atlas_dice(parcel_sets, atlas_labels, atlas_mask)
        report.atlas_per_parcel = cmp.per_parcel_dice
        report.atlas_assignment = cmp.assignment
        report.atlas_merged = cmp.merged_dice
        report.atlas_merged_mean = cmp.merged_mean
        report.atlas_per_parcel_mean = cmp.per_parcel_mean
    return report
