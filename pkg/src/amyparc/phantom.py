"""Synthetic cohorts with known ground truth.

A shared ellipsoidal mask is partitioned into ``regions`` connected blobs,
grouped into a few coarse groups along the longest axis. Each region is
wired to a signature subset of the K synthetic streamline clusters: a
cluster's in-mask footprint is the union of its member regions, and
rasterized jittered polylines leaving the mask supply out-of-mask texture.
Noise knobs: spurious voxel-cluster intersections, waypoint jitter, and
per-subject cluster dropout. Everything is a deterministic function of
(config, seed); subjects draw from sub-seeds via a 64-bit mix.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .features import ClusterIntersectionMap
from .kmeans import kmeans
from .util import config_hash, dump_json, load_json, mix64
from .voxelgrid import Mask, VoxelGrid

log = logging.getLogger(__name__)

_RASTER_STEP = 0.25
_TAIL_STEP = 0.8

# stream ids for sub-seed derivation
_S_REGIONS, _S_SIGNATURES, _S_SUBJECT = 1, 2, 3


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (24, 20, 16)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    semi_axes: tuple[float, float, float] = (9.0, 7.0, 5.5)
    regions: int = 9
    groups: int = 3
    clusters: int = 24
    streamlines_per_cluster: int = 6
    overlap_fraction: float = 0.25
    spurious_prob: float = 0.02
    jitter_std: float = 0.3
    dropout_prob: float = 0.0
    subjects: int = 20
    train_subjects: int = 16
    seed: int = 7

    def __post_init__(self):
        if self.regions < 2:
            raise ValueError(f"need at least 2 regions, got {self.regions}")
        if self.clusters < self.regions:
            raise ValueError(
                f"infeasible config: clusters ({self.clusters}) must be >= regions ({self.regions})"
            )
        if not 1 <= self.groups <= self.regions:
            raise ValueError(f"groups must be in [1, regions], got {self.groups}")
        for name in ("overlap_fraction", "spurious_prob", "dropout_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.jitter_std < 0:
            raise ValueError(f"jitter_std must be >= 0, got {self.jitter_std}")
        if not 1 <= self.train_subjects < self.subjects:
            raise ValueError(
                f"train_subjects must be in [1, subjects), got {self.train_subjects}/{self.subjects}"
            )

    @property
    def grid(self) -> VoxelGrid:
        return VoxelGrid(tuple(self.dims), tuple(self.spacing))


@dataclass(frozen=True, eq=False)
class PhantomSubject:
    subject_id: str
    mask: Mask
    clusters: ClusterIntersectionMap
    region_labels: np.ndarray  # per mask voxel, [0, regions)
    group_labels: np.ndarray   # per mask voxel, [0, groups)
    region_groups: np.ndarray  # region -> group
    subject_seed: int


def ellipsoid_mask(cfg: PhantomConfig) -> Mask:
    grid = cfg.grid
    nx, ny, nz = grid.dims
    center = np.array([(nx - 1) / 2, (ny - 1) / 2, (nz - 1) / 2])
    ax = np.asarray(cfg.semi_axes, dtype=np.float64)
    xs, ys, zs = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    coords = np.stack([xs, ys, zs], axis=-1).reshape(-1, 3)
    inside = (((coords - center) / ax) ** 2).sum(axis=1) <= 1.0
    return Mask(grid, grid.linear_of(coords[inside]))


def _row_volume(mask: Mask) -> np.ndarray:
    """Dense volume mapping coordinates to mask row, -1 outside."""
    vol = np.full(mask.grid.dims, -1, dtype=np.int64)
    c = mask.coords
    vol[c[:, 0], c[:, 1], c[:, 2]] = np.arange(len(mask))
    return vol


def partition_regions(mask: Mask, g: int, seed: int) -> np.ndarray:
    """Partition the mask into g connected blobs of similar size.

    Seeds come from k-means on the voxel coordinates; a synchronous
    multi-source 6-neighborhood flood from the seed voxels then claims the
    mask, which guarantees every region is 6-connected.
    """
    coords = mask.coords.astype(np.float64)
    centroids, _, _ = kmeans(coords, g, seed, n_init=4)
    row_vol = _row_volume(mask)
    labels = np.full(len(mask), -1, dtype=np.int64)
    # snap each centroid to the nearest unclaimed voxel (ties: lowest row)
    seeds = []
    for r in range(g):
        d2 = ((coords - centroids[r]) ** 2).sum(axis=1)
        d2[seeds] = np.inf
        seeds.append(int(np.argmin(d2)))
    seeds = np.asarray(seeds)
    labels[seeds] = np.arange(g)
    frontier = seeds
    offsets = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])
    dims = np.asarray(mask.grid.dims)
    while frontier.size:
        fc = mask.coords[frontier]
        cand_rows = []
        cand_regs = []
        for off in offsets:
            nb = fc + off
            ok = np.all((nb >= 0) & (nb < dims), axis=1)
            rows = row_vol[nb[ok, 0], nb[ok, 1], nb[ok, 2]]
            valid = rows >= 0
            rows = rows[valid]
            open_ = labels[rows] < 0
            cand_rows.append(rows[open_])
            cand_regs.append(labels[frontier[ok]][valid][open_])
        rows = np.concatenate(cand_rows)
        regs = np.concatenate(cand_regs)
        if rows.size == 0:
            break
        order = np.lexsort((regs, rows))  # per voxel, smallest region id wins
        rows, regs = rows[order], regs[order]
        first = np.concatenate(([True], np.diff(rows) > 0))
        labels[rows[first]] = regs[first]
        frontier = rows[first]
    if np.any(labels < 0):
        raise RuntimeError("mask is not 6-connected; cannot partition it")
    return labels


def group_regions(mask: Mask, region_labels: np.ndarray, g: int, n_groups: int,
                  semi_axes) -> np.ndarray:
    """Map regions to coarse groups: contiguous chunks along the longest axis."""
    axis = int(np.argmax(semi_axes))
    centroids = np.array([
        mask.coords[region_labels == r].mean(axis=0) for r in range(g)
    ])
    order = np.argsort(centroids[:, axis], kind="stable")
    region_groups = np.empty(g, dtype=np.int64)
    for grp, chunk in enumerate(np.array_split(order, n_groups)):
        region_groups[chunk] = grp
    return region_groups


def _region_adjacency(mask: Mask, region_labels: np.ndarray) -> list[tuple[int, int]]:
    vol = np.full(mask.grid.dims, -1, dtype=np.int64)
    c = mask.coords
    vol[c[:, 0], c[:, 1], c[:, 2]] = region_labels
    pairs = set()
    for axis in range(3):
        a = np.moveaxis(vol, axis, 0)[:-1]
        b = np.moveaxis(vol, axis, 0)[1:]
        touch = (a >= 0) & (b >= 0) & (a != b)
        for x, y in zip(a[touch].ravel(), b[touch].ravel()):
            pairs.add((int(min(x, y)), int(max(x, y))))
    return sorted(pairs)


def build_signatures(cfg: PhantomConfig, adjacency: list[tuple[int, int]]) -> list[set[int]]:
    """Assign each region its cluster signature.

    Regions own contiguous cluster blocks of deliberately uneven widths
    (uniform widths would make every signature a cyclic shift of every
    other, which no connectivity pattern in real tractography exhibits).
    The first owned cluster of each region is reserved private (never
    shared) so signatures stay pairwise distinct; adjacent regions
    additionally borrow a fraction of each other's shareable clusters.
    """
    g, k = cfg.regions, cfg.clusters
    rng = np.random.default_rng(mix64(cfg.seed, _S_SIGNATURES))
    raw = rng.uniform(0.6, 1.8, size=g)
    widths = np.maximum(1, np.round(raw / raw.sum() * k).astype(int))
    while widths.sum() > k:  # fix rounding drift, never below 1
        widths[int(np.argmax(widths))] -= 1
    while widths.sum() < k:
        widths[int(np.argmin(widths))] += 1
    bounds = np.concatenate(([0], np.cumsum(widths)))
    owned = [list(range(bounds[r], bounds[r + 1])) for r in range(g)]
    sig = [set(o) for o in owned]
    for r, s in adjacency:
        for a, b in ((r, s), (s, r)):
            pool = owned[b][1:]  # index 0 is the reserved private cluster
            n_borrow = int(round(cfg.overlap_fraction * len(pool)))
            if n_borrow > 0:
                sig[a].update(int(j) for j in rng.choice(pool, n_borrow, replace=False))
    return sig


def rasterize_streamline(points: np.ndarray, grid: VoxelGrid) -> np.ndarray:
    """Voxels a polyline passes through (sampled at <= 0.25 voxel steps).

    Continuous coordinates live in voxel units: voxel (x, y, z) spans
    [x, x+1)^3. Endpoint voxels are always included; out-of-bounds samples
    are dropped. Returns sorted unique linear indices.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 3:
        raise ValueError(f"polyline must be (>=2, 3) points, got {pts.shape}")
    samples = [pts[:1]]
    for a, b in zip(pts[:-1], pts[1:]):
        length = float(np.linalg.norm(b - a))
        n = max(1, int(np.ceil(length / _RASTER_STEP)))
        t = np.arange(1, n + 1, dtype=np.float64)[:, None] / n
        samples.append(a + t * (b - a))
    vox = np.floor(np.concatenate(samples)).astype(np.int64)
    dims = np.asarray(grid.dims)
    ok = np.all((vox >= 0) & (vox < dims), axis=1)
    vox = vox[ok]
    if vox.shape[0] == 0:
        return np.array([], dtype=np.int64)
    return np.unique(grid.linear_of(vox))


def _exit_tail(start: np.ndarray, center: np.ndarray, dims, rng: np.random.Generator,
               jitter_std: float) -> np.ndarray:
    """Waypoints of one streamline from a voxel center out of the grid."""
    d = start - center
    norm = np.linalg.norm(d)
    direction = d / norm if norm > 1e-9 else np.array([1.0, 0.0, 0.0])
    n_steps = int(np.ceil(max(dims) / _TAIL_STEP))
    t = np.arange(n_steps + 1, dtype=np.float64)[:, None] * _TAIL_STEP
    pts = start[None, :] + t * direction[None, :]
    if jitter_std > 0:
        pts[1:] += rng.normal(0.0, jitter_std, size=(n_steps, 3))
    return pts


def generate_cohort(cfg: PhantomConfig) -> list[PhantomSubject]:
    """Generate all subjects of a cohort; deterministic given cfg."""
    grid = cfg.grid
    mask = ellipsoid_mask(cfg)
    if len(mask) < cfg.regions:
        raise ValueError("mask too small for the requested region count")
    region_labels = partition_regions(mask, cfg.regions, mix64(cfg.seed, _S_REGIONS))
    region_groups = group_regions(mask, region_labels, cfg.regions, cfg.groups, cfg.semi_axes)
    group_labels = region_groups[region_labels]
    signatures = build_signatures(cfg, _region_adjacency(mask, region_labels))
    # (regions, K) membership: sig_matrix[r, j] == 1 iff j in signature(r)
    sig_matrix = np.zeros((cfg.regions, cfg.clusters), dtype=bool)
    for r, s in enumerate(signatures):
        sig_matrix[r, list(s)] = True
    members = [np.flatnonzero(sig_matrix[:, j]) for j in range(cfg.clusters)]
    base = sig_matrix[region_labels]  # (V, K) in-mask blanket membership
    center = (np.asarray(grid.dims, dtype=np.float64) - 1.0) / 2.0
    in_mask_dense = mask.dense()

    # deterministic per-region streamline seed voxels (jitter comes later)
    region_starts = []
    for r in range(cfg.regions):
        rows = np.flatnonzero(region_labels == r)
        pick = np.unique(np.round(np.linspace(0, rows.size - 1, cfg.streamlines_per_cluster)).astype(int))
        region_starts.append(mask.coords[rows[pick]].astype(np.float64) + 0.5)

    subjects = []
    for idx in range(cfg.subjects):
        sub_seed = mix64(cfg.seed, _S_SUBJECT, idx)
        rng = np.random.default_rng(sub_seed)
        dropped = rng.random(cfg.clusters) < cfg.dropout_prob if cfg.dropout_prob > 0 else np.zeros(cfg.clusters, bool)
        cluster_sets = []
        for j in range(cfg.clusters):
            if dropped[j]:
                cluster_sets.append(np.array([], dtype=np.int64))
                continue
            tails = []
            for r in members[j]:
                for start in region_starts[r]:
                    pts = _exit_tail(start, center, grid.dims, rng, cfg.jitter_std)
                    vox = rasterize_streamline(pts, grid)
                    coords = grid.coords_of(vox)
                    outside = ~in_mask_dense[coords[:, 0], coords[:, 1], coords[:, 2]]
                    tails.append(vox[outside])
            cluster_sets.append(tails)
        if cfg.spurious_prob > 0:
            spurious = rng.random((len(mask), cfg.clusters)) < cfg.spurious_prob
        else:
            spurious = np.zeros((len(mask), cfg.clusters), dtype=bool)
        final_sets = []
        for j in range(cfg.clusters):
            if dropped[j]:
                final_sets.append(cluster_sets[j])
                continue
            inside = base[:, j] | spurious[:, j]
            parts = [mask.voxels[inside]] + cluster_sets[j]
            final_sets.append(np.unique(np.concatenate(parts)))
        if dropped.any():
            log.warning("subject %d: dropped clusters %s", idx, np.flatnonzero(dropped).tolist())
        subjects.append(PhantomSubject(
            subject_id=f"s{idx:03d}",
            mask=mask,
            clusters=ClusterIntersectionMap(grid, tuple(final_sets)),
            region_labels=region_labels,
            group_labels=group_labels,
            region_groups=region_groups,
            subject_seed=sub_seed,
        ))
    return subjects


# ---------------------------------------------------------------------------
# Subject files
# ---------------------------------------------------------------------------

def save_subject(path, subject: PhantomSubject, cfg: PhantomConfig) -> None:
    grid = subject.mask.grid
    dump_json(path, {
        "subject_id": subject.subject_id,
        "dims": list(grid.dims),
        "spacing": list(grid.spacing),
        "mask": [int(i) for i in subject.mask.voxels],
        "clusters": [[int(i) for i in c] for c in subject.clusters.clusters],
        "region_labels": [int(i) for i in subject.region_labels],
        "group_labels": [int(i) for i in subject.group_labels],
        "region_groups": [int(i) for i in subject.region_groups],
        "subject_seed": int(subject.subject_seed),
        "seed": int(cfg.seed),
        "config": asdict(cfg),
        "config_hash": config_hash(cfg),
    })


def load_subject(path) -> tuple[PhantomSubject, dict]:
    """Read a subject file; returns (subject, config echo)."""
    d = load_json(path)
    for key in ("dims", "mask", "clusters", "region_labels"):
        if key not in d:
            raise ValueError(f"{path}: missing field {key!r}")
    grid = VoxelGrid(tuple(d["dims"]), tuple(d.get("spacing", (1.0, 1.0, 1.0))))
    mask = Mask(grid, np.asarray(d["mask"], dtype=np.int64))
    subject = PhantomSubject(
        subject_id=d.get("subject_id", "unknown"),
        mask=mask,
        clusters=ClusterIntersectionMap(
            grid, tuple(np.asarray(c, dtype=np.int64) for c in d["clusters"])
        ),
        region_labels=np.asarray(d["region_labels"], dtype=np.int64),
        group_labels=np.asarray(d.get("group_labels", []), dtype=np.int64),
        region_groups=np.asarray(d.get("region_groups", []), dtype=np.int64),
        subject_seed=int(d.get("subject_seed", 0)),
    )
    return subject, d.get("config", {})
