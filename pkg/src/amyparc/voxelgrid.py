"""3D grid arithmetic shared by the whole pipeline.

Masks, neighborhoods, exact Euclidean distance fields, and connected
components. Distances are measured in voxel-index units; the physical
spacing is carried as metadata only (isotropic acquisitions make the two
equivalent up to a scale factor).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage

Coord = tuple[int, int, int]

_CONNECTIVITY_RANK = {6: 1, 26: 3}

_OFFSETS = {
    6: [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)],
    26: [
        (dx, dy, dz)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
        if (dx, dy, dz) != (0, 0, 0)
    ],
}


def structure(connectivity: int) -> np.ndarray:
    """3x3x3 structuring element for 6- or 26-connectivity."""
    if connectivity not in _CONNECTIVITY_RANK:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, _CONNECTIVITY_RANK[connectivity])


@dataclass(frozen=True)
class VoxelGrid:
    """A 3D index space of shape ``dims`` with voxel spacing in millimeters."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def size(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def linear_index(self, coord: Coord) -> int:
        """Map (x, y, z) to its linear index, x varying fastest."""
        x, y, z = (int(c) for c in coord)
        nx, ny, nz = self.dims
        if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
            raise IndexError(f"coordinate {coord!r} out of bounds for dims {self.dims}")
        return x + nx * (y + ny * z)

    def coord_of(self, index: int) -> Coord:
        """Inverse of :meth:`linear_index`."""
        index = int(index)
        if not 0 <= index < self.size:
            raise IndexError(f"linear index {index} out of bounds for dims {self.dims}")
        nx, ny, _ = self.dims
        x = index % nx
        rest = index // nx
        return (x, rest % ny, rest // ny)

    def linear_of(self, coords: np.ndarray) -> np.ndarray:
        """Vectorized linear_index: (V, 3) int coords -> (V,) indices."""
        c = np.atleast_2d(np.asarray(coords, dtype=np.int64))
        nx, ny, nz = self.dims
        if c.size and (
            c.min() < 0 or c[:, 0].max() >= nx or c[:, 1].max() >= ny or c[:, 2].max() >= nz
        ):
            raise IndexError(f"coordinates out of bounds for dims {self.dims}")
        return c[:, 0] + nx * (c[:, 1] + ny * c[:, 2])

    def coords_of(self, indices: np.ndarray) -> np.ndarray:
        """Vectorized coord_of: (V,) indices -> (V, 3) int coords."""
        idx = np.asarray(indices, dtype=np.int64).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= self.size):
            raise IndexError(f"linear indices out of bounds for dims {self.dims}")
        nx, ny, _ = self.dims
        rest = idx // nx
        return np.stack([idx % nx, rest % ny, rest // ny], axis=1)

    def neighbors(self, coord: Coord, connectivity: int = 26) -> list[Coord]:
        """In-bounds neighbors of ``coord`` (excluding itself)."""
        if connectivity not in _OFFSETS:
            raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
        self.linear_index(coord)  # bounds check
        x, y, z = (int(c) for c in coord)
        nx, ny, nz = self.dims
        out = []
        for dx, dy, dz in _OFFSETS[connectivity]:
            cx, cy, cz = x + dx, y + dy, z + dz
            if 0 <= cx < nx and 0 <= cy < ny and 0 <= cz < nz:
                out.append((cx, cy, cz))
        return out


@dataclass(frozen=True, eq=False)
class Mask:
    """The set of in-structure voxels on a grid, as sorted linear indices."""

    grid: VoxelGrid
    voxels: np.ndarray

    def __post_init__(self):
        v = np.sort(np.asarray(self.voxels, dtype=np.int64).ravel())
        if v.size == 0:
            raise ValueError("mask must contain at least one voxel")
        if v[0] < 0 or v[-1] >= self.grid.size:
            raise IndexError(f"mask indices out of bounds for dims {self.grid.dims}")
        if v.size > 1 and np.any(np.diff(v) == 0):
            raise ValueError("mask indices contain duplicates")
        v.setflags(write=False)
        object.__setattr__(self, "voxels", v)

    def __len__(self) -> int:
        return int(self.voxels.size)

    @cached_property
    def coords(self) -> np.ndarray:
        """(V, 3) coordinates of the mask voxels, ascending linear index."""
        return self.grid.coords_of(self.voxels)

    def dense(self) -> np.ndarray:
        """Boolean occupancy volume of shape ``grid.dims``."""
        out = np.zeros(self.grid.dims, dtype=bool)
        c = self.coords
        out[c[:, 0], c[:, 1], c[:, 2]] = True
        return out

    def rows_of(self, indices: np.ndarray) -> np.ndarray:
        """Positions of the given linear indices within the sorted voxel list.

        All queried indices must belong to the mask.
        """
        idx = np.asarray(indices, dtype=np.int64).ravel()
        pos = np.searchsorted(self.voxels, idx)
        bad = (pos >= self.voxels.size) | (self.voxels[np.minimum(pos, len(self) - 1)] != idx)
        if np.any(bad):
            raise KeyError(f"{int(bad.sum())} indices are not in the mask")
        return pos


@dataclass(frozen=True, eq=False)
class DistanceField:
    """Per-in-mask-voxel distance to a target set, in voxel-index units.

    Zero exactly on target voxels; values follow the Euclidean metric.
    """

    mask: Mask
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        if v.size != len(self.mask):
            raise ValueError("one value per mask voxel required")
        if v.size and v.min() < 0:
            raise ValueError("distances must be nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def distance_field(mask: Mask, target: np.ndarray) -> DistanceField:
    """Exact Euclidean distance from every mask voxel to the nearest target.

    ``target`` is a set of linear indices used as distance sources; sources
    outside the mask are permitted and still count. Computed via the exact
    Euclidean distance transform of the full grid.
    """
    tgt = np.asarray(target, dtype=np.int64).ravel()
    if tgt.size == 0:
        raise ValueError("distance_field: target set is empty")
    grid = mask.grid
    src = np.ones(grid.dims, dtype=bool)
    tc = grid.coords_of(tgt)
    src[tc[:, 0], tc[:, 1], tc[:, 2]] = False
    dist = ndimage.distance_transform_edt(src)
    mc = mask.coords
    return DistanceField(mask, dist[mc[:, 0], mc[:, 1], mc[:, 2]])


def connected_components(
    mask: Mask, labels: np.ndarray, label: int, connectivity: int = 6
) -> list[np.ndarray]:
    """Split the voxels carrying ``label`` into maximal connected components.

    ``labels`` is parallel to ``mask.voxels``. Returns one sorted index array
    per component; an absent label yields an empty list.
    """
    lab = np.asarray(labels).ravel()
    if lab.size != len(mask):
        raise ValueError("labels must cover the mask")
    sel = lab == label
    if not np.any(sel):
        return []
    dense = np.zeros(mask.grid.dims, dtype=bool)
    c = mask.coords[sel]
    dense[c[:, 0], c[:, 1], c[:, 2]] = True
    comp, n = ndimage.label(dense, structure=structure(connectivity))
    comp_at = comp[c[:, 0], c[:, 1], c[:, 2]]
    vox = mask.voxels[sel]
    return [np.sort(vox[comp_at == i]) for i in range(1, n + 1)]
