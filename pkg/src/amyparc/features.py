"""Per-voxel connectivity features from streamline-cluster intersections.

Three stages build the feature field: binary intersection, cluster dilation
(fills voxels that intersect nothing using their neighbors' memberships),
and cluster smoothing (fills the remaining zeros with a Gaussian of the
distance to the nearest cluster voxel). A cyclic-shift augmentation turns a
length-K vector into a K x K matrix so 2D convolutions can see neighboring
cluster channels.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage

from .util import dump_json, load_json
from .voxelgrid import Mask, VoxelGrid, distance_field, structure

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"AMYF"
FEATURE_VERSION = 1


@dataclass(frozen=True)
class SmoothingConfig:
    """Kernel width (voxel units) and the adjacency used for dilation."""

    sigma: float = 1.0
    dilation_connectivity: int = 26

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.dilation_connectivity not in (6, 26):
            raise ValueError(f"dilation connectivity must be 6 or 26, got {self.dilation_connectivity}")


@dataclass(frozen=True, eq=False)
class ClusterIntersectionMap:
    """For each of K streamline clusters, the voxels it passes through.

    Cluster sets may include out-of-mask voxels (streamlines exit the
    structure); those still act as distance sources. A cluster set may be
    empty for a subject, which downstream stages flag.
    """

    grid: VoxelGrid
    clusters: tuple[np.ndarray, ...]

    def __post_init__(self):
        norm = []
        for j, c in enumerate(self.clusters):
            v = np.sort(np.asarray(c, dtype=np.int64).ravel())
            if v.size:
                if v[0] < 0 or v[-1] >= self.grid.size:
                    raise IndexError(f"cluster {j} has indices out of bounds")
                if v.size > 1 and np.any(np.diff(v) == 0):
                    raise ValueError(f"cluster {j} has duplicate indices")
            v.setflags(write=False)
            norm.append(v)
        object.__setattr__(self, "clusters", tuple(norm))

    @property
    def K(self) -> int:
        return len(self.clusters)

    def empty_clusters(self) -> list[int]:
        return [j for j, c in enumerate(self.clusters) if c.size == 0]


@dataclass(frozen=True, eq=False)
class FeatureField:
    """Per-voxel length-K feature vectors, rows parallel to mask.voxels."""

    mask: Mask
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if v.ndim != 2 or v.shape[0] != len(self.mask):
            raise ValueError(f"values must be (n_voxels, K), got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def K(self) -> int:
        return int(self.values.shape[1])

    @cached_property
    def empty_rows(self) -> np.ndarray:
        """Voxel rows whose whole vector is zero ("empty voxels")."""
        return ~self.values.any(axis=1)


def _check_same_grid(a: VoxelGrid, b: VoxelGrid) -> None:
    if a != b:
        raise ValueError(f"grid mismatch: {a.dims}/{a.spacing} vs {b.dims}/{b.spacing}")


def intersection_features(clusters: ClusterIntersectionMap, mask: Mask) -> FeatureField:
    """Binary stage: entry (i, j) is 1 iff voxel i intersects cluster j."""
    _check_same_grid(clusters.grid, mask.grid)
    out = np.zeros((len(mask), clusters.K), dtype=np.float64)
    for j, cset in enumerate(clusters.clusters):
        if cset.size == 0:
            continue
        inside = cset[np.isin(cset, mask.voxels, assume_unique=True)]
        if inside.size:
            out[mask.rows_of(inside), j] = 1.0
    return FeatureField(mask, out)


def dilate_clusters(
    field: FeatureField, clusters: ClusterIntersectionMap, connectivity: int = 26
) -> FeatureField:
    """Give each empty voxel the memberships its neighbors carry.

    Only voxels whose entire vector is zero are touched; they receive a 1
    for every cluster that intersects any of their neighbors (original
    intersection sets, so repeating the operation changes nothing).
    """
    _check_same_grid(clusters.grid, field.mask.grid)
    mask = field.mask
    empty = field.empty_rows
    out = np.array(field.values)
    if empty.any():
        ec = mask.coords[empty]
        st = structure(connectivity)
        for j, cset in enumerate(clusters.clusters):
            if cset.size == 0:
                continue
            dense = np.zeros(mask.grid.dims, dtype=bool)
            cc = mask.grid.coords_of(cset)
            dense[cc[:, 0], cc[:, 1], cc[:, 2]] = True
            grown = ndimage.binary_dilation(dense, structure=st)
            hit = grown[ec[:, 0], ec[:, 1], ec[:, 2]]
            rows = np.flatnonzero(empty)[hit]
            out[rows, j] = 1.0
    return FeatureField(mask, out)


def gaussian(d: np.ndarray, sigma: float) -> np.ndarray:
    """Unnormalized Gaussian kernel, G(0) = 1."""
    d = np.asarray(d, dtype=np.float64)
    return np.exp(-(d * d) / (2.0 * sigma * sigma))


def smooth_clusters(
    field: FeatureField, clusters: ClusterIntersectionMap, cfg: SmoothingConfig
) -> FeatureField:
    """Replace every remaining zero entry (i, j) with G(d_ij).

    d_ij is the distance from voxel i to the nearest voxel of cluster j's
    original intersection set. Entries already 1 stay 1. Clusters with an
    empty intersection set keep an all-zero column and are reported in a
    warning; every other entry ends up in (0, 1].
    """
    _check_same_grid(clusters.grid, field.mask.grid)
    out = np.array(field.values)
    skipped = []
    for j, cset in enumerate(clusters.clusters):
        if cset.size == 0:
            skipped.append(j)
            continue
        zero = out[:, j] == 0.0
        if not zero.any():
            continue
        d = distance_field(field.mask, cset).values
        out[zero, j] = gaussian(d[zero], cfg.sigma)
    if skipped:
        log.warning("smooth_clusters: %d cluster(s) with no intersecting voxels: %s", len(skipped), skipped)
    return FeatureField(field.mask, out)


def extract_features(
    clusters: ClusterIntersectionMap, mask: Mask, cfg: SmoothingConfig | None = None
) -> FeatureField:
    """Full pipeline: intersection -> dilation -> smoothing."""
    cfg = cfg or SmoothingConfig()
    binary = intersection_features(clusters, mask)
    dilated = dilate_clusters(binary, clusters, cfg.dilation_connectivity)
    return smooth_clusters(dilated, clusters, cfg)


def augment(vector: np.ndarray) -> np.ndarray:
    """All K cyclic left-rotations of a length-K vector, as a K x K matrix.

    Row r is the vector rotated left by r; row 0 is the vector itself.
    """
    v = np.asarray(vector, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("augment: vector must have K >= 1 entries")
    k = v.size
    idx = (np.arange(k)[:, None] + np.arange(k)[None, :]) % k
    return v[idx]


def augment_batch(vectors: np.ndarray) -> np.ndarray:
    """Vectorized augment: (B, K) -> (B, K, K)."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] == 0:
        raise ValueError(f"augment_batch expects (B, K), got {v.shape}")
    k = v.shape[1]
    idx = (np.arange(k)[:, None] + np.arange(k)[None, :]) % k
    return v[:, idx]


# ---------------------------------------------------------------------------
# Feature files: "<stem>.amyf" binary + "<stem>.json" sidecar
# ---------------------------------------------------------------------------

def write_features(path, field: FeatureField, cfg: SmoothingConfig, sidecar_extra: dict | None = None) -> None:
    """Write the AMYF binary (f32 LE, voxel-major) and its JSON sidecar."""
    path = str(path)
    if not path.endswith(".amyf"):
        path += ".amyf"
    v, k = field.values.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, v, k))
        fh.write(field.values.astype("<f4").tobytes(order="C"))
    grid = field.mask.grid
    sidecar = {
        "dims": list(grid.dims),
        "spacing": list(grid.spacing),
        "mask": [int(i) for i in field.mask.voxels],
        "sigma": cfg.sigma,
        "dilation_connectivity": cfg.dilation_connectivity,
    }
    sidecar.update(sidecar_extra or {})
    dump_json(path[: -len(".amyf")] + ".json", sidecar)


def read_features(path) -> tuple[FeatureField, dict]:
    """Read an AMYF file and its sidecar; returns (field, sidecar)."""
    path = str(path)
    if not path.endswith(".amyf"):
        path += ".amyf"
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURE_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, v, k = struct.unpack("<III", fh.read(12))
        if version != FEATURE_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        data = np.frombuffer(fh.read(4 * v * k), dtype="<f4")
        if data.size != v * k:
            raise ValueError(f"{path}: truncated payload")
    sidecar = load_json(path[: -len(".amyf")] + ".json")
    grid = VoxelGrid(tuple(sidecar["dims"]), tuple(sidecar["spacing"]))
    mask = Mask(grid, np.asarray(sidecar["mask"], dtype=np.int64))
    if len(mask) != v:
        raise ValueError(f"{path}: sidecar mask has {len(mask)} voxels, file has {v}")
    field = FeatureField(mask, data.astype(np.float64).reshape(v, k))
    return field, sidecar
