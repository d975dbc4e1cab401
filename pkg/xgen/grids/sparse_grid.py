"""
Integer-keyed sparse voxel grids.

Lattice convention at resolution R (h = 1/R):
- key i owns the cell [-0.5 + i*h, -0.5 + (i+1)*h) on each axis
- the feature stored at key i lives at the lattice vertex -0.5 + i*h
  (the cell's minimum corner), so trilinear queries need no offsets
- floor-halving a key gives the key of the enclosing cell one level up

Keys are kept sorted by their packed 63-bit value (21 bits per axis), which
fixes iteration order everywhere downstream.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from xgen.config.errors import EmptyShapeError, FormatVersionError, TruncatedFileError, XGenError
from xgen.geometry.mesh import OrientedPointCloud

logger = logging.getLogger(__name__)

KEY_BITS = 21
KEY_MASK = (1 << KEY_BITS) - 1
MAX_RESOLUTION = 1 << KEY_BITS
RAW_CHANNELS = 6

GRID_MAGIC = b"SVXG"
GRID_VERSION = 1
_GRID_HEADER = struct.Struct("<4sIIIQ")

# 27 neighbour offsets in lexicographic order (dx major)
KERNEL_OFFSETS = np.array(
    [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)], dtype=np.int64
)
# 8 child offsets, same order as CORNER_OFFSETS
CHILD_OFFSETS = np.array(
    [(dx, dy, dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)], dtype=np.int64
)
CORNER_OFFSETS = CHILD_OFFSETS


def pack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    return (keys[:, 0] << (2 * KEY_BITS)) | (keys[:, 1] << KEY_BITS) | keys[:, 2]


def unpack_keys(packed: np.ndarray) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.int64)
    return np.stack([(packed >> (2 * KEY_BITS)) & KEY_MASK, (packed >> KEY_BITS) & KEY_MASK, packed & KEY_MASK], axis=1)


def sort_keys(keys: np.ndarray) -> np.ndarray:
    """Unique keys in packed order"""
    return unpack_keys(np.unique(pack_keys(keys)))


def _check_resolution(resolution: int) -> None:
    if resolution < 1 or resolution > MAX_RESOLUTION or resolution & (resolution - 1):
        raise XGenError(f"resolution must be a power of two in [1, {MAX_RESOLUTION}], got {resolution}")


@dataclass(frozen=True)
class SparseVoxelGrid:
    """
    Occupied keys plus one feature row per key.

    `occupancy` is only set on decoder candidate grids, where a key can be a
    candidate without being occupied.
    """

    resolution: int
    keys: np.ndarray
    features: np.ndarray
    occupancy: Optional[np.ndarray] = None
    packed: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        _check_resolution(self.resolution)
        keys = np.asarray(self.keys, dtype=np.int64).reshape(-1, 3)
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim == 1:
            features = features.reshape(len(keys), -1)
        if len(features) != len(keys):
            raise XGenError(f"{len(keys)} keys but {len(features)} feature rows")
        if len(keys) and (keys.min() < 0 or keys.max() >= self.resolution):
            raise XGenError(f"key out of range for resolution {self.resolution}")
        if not np.all(np.isfinite(features)):
            raise XGenError("grid features must be finite")
        packed = pack_keys(keys)
        if len(packed) > 1 and np.any(np.diff(packed) <= 0):
            order = np.argsort(packed, kind="stable")
            if np.any(np.diff(packed[order]) == 0):
                raise XGenError("duplicate keys in sparse grid")
            keys, features, packed = keys[order], features[order], packed[order]
            if self.occupancy is not None:
                object.__setattr__(self, "occupancy", np.asarray(self.occupancy, dtype=bool)[order])
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "packed", packed)
        if self.occupancy is not None:
            occupancy = np.asarray(self.occupancy, dtype=bool).reshape(-1)
            if len(occupancy) != len(keys):
                raise XGenError("occupancy length does not match keys")
            object.__setattr__(self, "occupancy", occupancy)

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def cell_size(self) -> float:
        return 1.0 / self.resolution

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        """Row index of each key, -1 where the key is absent or out of range"""
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        inside = np.all((keys >= 0) & (keys < self.resolution), axis=1)
        result = np.full(len(keys), -1, dtype=np.int64)
        if not len(self.packed) or not inside.any():
            return result
        wanted = pack_keys(keys[inside])
        position = np.searchsorted(self.packed, wanted)
        position = np.minimum(position, len(self.packed) - 1)
        hit = self.packed[position] == wanted
        result[np.flatnonzero(inside)[hit]] = position[hit]
        return result

    def vertex_positions(self) -> np.ndarray:
        """Lattice vertex each feature lives at"""
        return -0.5 + self.keys * self.cell_size

    def cell_centers(self) -> np.ndarray:
        return -0.5 + (self.keys + 0.5) * self.cell_size

    def with_features(self, features: np.ndarray) -> "SparseVoxelGrid":
        return SparseVoxelGrid(self.resolution, self.keys, features, self.occupancy)

    def occupied(self) -> "SparseVoxelGrid":
        """Only the occupied rows of a candidate grid"""
        if self.occupancy is None:
            return self
        return SparseVoxelGrid(self.resolution, self.keys[self.occupancy], self.features[self.occupancy])


@dataclass(frozen=True)
class GridPyramid:
    """Grids from finest to coarsest, resolution halving per level"""

    levels: List[SparseVoxelGrid]

    def __post_init__(self):
        for finer, coarser in zip(self.levels, self.levels[1:]):
            if coarser.resolution * 2 != finer.resolution:
                raise XGenError("pyramid resolutions must halve per level")
            if len(finer) and np.any(coarser.lookup(finer.keys // 2) < 0):
                raise XGenError("coarser level misses the parent of an occupied key")

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> SparseVoxelGrid:
        return self.levels[i]


# ============================================================================
# Quantisation and pyramids
# ============================================================================

def point_keys(points: np.ndarray, resolution: int) -> np.ndarray:
    """Key of the cell containing each point (points on +0.5 go to the last cell)"""
    keys = np.floor((np.asarray(points, dtype=np.float64) + 0.5) * resolution).astype(np.int64)
    return np.clip(keys, 0, resolution - 1)


def quantize_with_flags(cloud: OrientedPointCloud, resolution: int) -> Tuple[SparseVoxelGrid, np.ndarray]:
    """
    Snap points to voxels and average per voxel.

    Features are 6 raw channels: offset of the mean position from the cell
    centre in cell units (range [-0.5, 0.5]) and the renormalised mean normal.
    Voxels whose normals cancel out take the normal of their first point and
    are flagged in the returned boolean array.
    """
    _check_resolution(resolution)
    if not len(cloud):
        raise EmptyShapeError("cannot quantise an empty point cloud")

    keys = point_keys(cloud.points, resolution)
    unique, first, inverse = np.unique(pack_keys(keys), return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse, minlength=len(unique)).astype(np.float64)[:, None]

    positions = np.zeros((len(unique), 3))
    normals = np.zeros((len(unique), 3))
    np.add.at(positions, inverse, cloud.points)
    np.add.at(normals, inverse, cloud.normals)
    positions /= counts
    lengths = np.linalg.norm(normals, axis=1)
    degenerate = lengths < 1e-6
    normals[~degenerate] /= lengths[~degenerate, None]
    normals[degenerate] = cloud.normals[first[degenerate]]
    if degenerate.any():
        logger.warning("quantize: %d voxels with cancelling normals", int(degenerate.sum()))

    cell_keys = unpack_keys(unique)
    offsets = np.clip((positions + 0.5) * resolution - cell_keys - 0.5, -0.5, 0.5)
    grid = SparseVoxelGrid(resolution, cell_keys, np.hstack([offsets, normals]))
    return grid, degenerate


def quantize(cloud: OrientedPointCloud, resolution: int) -> SparseVoxelGrid:
    grid, _ = quantize_with_flags(cloud, resolution)
    return grid


def dequantize_positions(grid: SparseVoxelGrid) -> np.ndarray:
    """Mean point position per voxel, recovered from the offset channels"""
    return -0.5 + (grid.keys + 0.5 + grid.features[:, :3]) * grid.cell_size


def downsample_keys(grid: SparseVoxelGrid) -> SparseVoxelGrid:
    """Parent keys one level up; a parent is occupied iff any child is"""
    if grid.resolution % 2:
        raise XGenError("downsample_keys needs an even resolution")
    parents = sort_keys(grid.keys // 2) if len(grid) else np.zeros((0, 3), dtype=np.int64)
    return SparseVoxelGrid(grid.resolution // 2, parents, np.zeros((len(parents), 0)))


def build_pyramid(grid: SparseVoxelGrid, levels: int) -> GridPyramid:
    pyramid = [grid]
    for _ in range(levels - 1):
        pyramid.append(downsample_keys(pyramid[-1]))
    return GridPyramid(pyramid)


def child_keys(keys: np.ndarray) -> np.ndarray:
    """All 8 children of every key, sorted"""
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    children = (2 * keys[:, None, :] + CHILD_OFFSETS[None, :, :]).reshape(-1, 3)
    return sort_keys(children) if len(children) else children


# ============================================================================
# Interpolation
# ============================================================================

def trilinear_weights(grid: SparseVoxelGrid, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Row indices (-1 for missing vertices) and weights of the 8 lattice
    vertices around each point. Weights always sum to 1; missing vertices
    keep their weight and contribute zero.

    Points are clamped to the lattice box and corners past the last vertex
    (x beyond 0.5 - 1/R) fold onto it, so the edge value extends to +0.5
    the same way `sdf_at` pads dense grids.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    r = grid.resolution
    scaled = np.clip((points + 0.5) * r, 0.0, float(r))
    base = np.minimum(np.floor(scaled).astype(np.int64), r - 1)
    t = scaled - base
    corners = np.minimum(base[:, None, :] + CORNER_OFFSETS[None, :, :], r - 1)
    weights = np.prod(np.where(CORNER_OFFSETS[None, :, :] == 1, t[:, None, :], 1.0 - t[:, None, :]), axis=2)
    index = grid.lookup(corners.reshape(-1, 3)).reshape(-1, 8)
    return index, weights


def trilinear_query(grid: SparseVoxelGrid, points: np.ndarray) -> np.ndarray:
    """Blend vertex features at the query points. A single 3-vector gives a single row."""
    single = np.ndim(points) == 1
    index, weights = trilinear_weights(grid, points)
    padded = np.vstack([grid.features, np.zeros((1, grid.feature_dim))])
    values = np.einsum("mk,mkc->mc", weights, padded[index])
    return values[0] if single else values


# ============================================================================
# Ground-truth shell occupancy
# ============================================================================

def shell_occupancy(values: np.ndarray, epsilon: float, resolution: int) -> np.ndarray:
    """
    Keys at `resolution` whose cell meets the thin shell |sdf| < epsilon.

    `values` is a dense R0^3 array sampled at lattice vertices -0.5 + i/R0.
    A cell meets the shell when the range of the vertex values it covers
    intersects (-epsilon, epsilon). Coarser cells cover whole blocks of finer
    cells, so the result at R/2 always contains the parents of the result at R.
    """
    dense = np.asarray(values, dtype=np.float64)
    fine = dense.shape[0]
    _check_resolution(resolution)
    if resolution > fine or fine % resolution:
        raise XGenError(f"shell resolution {resolution} must divide the dense resolution {fine}")
    padded = np.pad(dense, ((0, 1), (0, 1), (0, 1)), mode="edge")
    low = np.full((fine, fine, fine), np.inf)
    high = np.full((fine, fine, fine), -np.inf)
    for dx, dy, dz in CORNER_OFFSETS:
        corner = padded[dx:dx + fine, dy:dy + fine, dz:dz + fine]
        low = np.minimum(low, corner)
        high = np.maximum(high, corner)
    block = fine // resolution
    shape = (resolution, block, resolution, block, resolution, block)
    low = low.reshape(shape).min(axis=(1, 3, 5))
    high = high.reshape(shape).max(axis=(1, 3, 5))
    hits = np.argwhere((low < epsilon) & (high > -epsilon))
    return sort_keys(hits) if len(hits) else np.zeros((0, 3), dtype=np.int64)


# ============================================================================
# SVXG file format
# ============================================================================

def save_grid(grid: SparseVoxelGrid, path: Union[str, Path]) -> None:
    from xgen.storage.artifacts import atomic_write_bytes

    atomic_write_bytes(path, grid_bytes(grid))


def grid_bytes(grid: SparseVoxelGrid) -> bytes:
    record = np.dtype([("key", "<u8"), ("features", "<f4", (grid.feature_dim,))])
    table = np.zeros(len(grid), dtype=record)
    table["key"] = grid.packed.astype(np.uint64)
    table["features"] = grid.features.astype(np.float32)
    header = _GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, grid.resolution, grid.feature_dim, len(grid))
    return header + table.tobytes()


def load_grid(path: Union[str, Path]) -> SparseVoxelGrid:
    data = Path(path).read_bytes()
    if len(data) < _GRID_HEADER.size:
        raise TruncatedFileError(f"{path}: shorter than the SVXG header")
    magic, version, resolution, dim, count = _GRID_HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise FormatVersionError(f"{path}: not an SVXG file")
    if version != GRID_VERSION:
        raise FormatVersionError(f"{path}: SVXG version {version}, expected {GRID_VERSION}")
    record = np.dtype([("key", "<u8"), ("features", "<f4", (dim,))])
    body = data[_GRID_HEADER.size:]
    if len(body) < record.itemsize * count:
        raise TruncatedFileError(f"{path}: {count} records announced, body holds {len(body) // record.itemsize}")
    table = np.frombuffer(body, dtype=record, count=count)
    keys = unpack_keys(table["key"].astype(np.int64))
    return SparseVoxelGrid(resolution, keys, table["features"].astype(np.float64).reshape(count, dim))


# ============================================================================
# Convolution rulebooks
# ============================================================================

def conv_rulebook(source: SparseVoxelGrid, out_keys: np.ndarray, stride: int = 1) -> List[Tuple[int, np.ndarray, np.ndarray]]:
    """
    (kernel offset, output rows, input rows) triples of a 3x3x3 convolution.
    Output key o reads input keys stride*o + d for the 27 offsets d; absent
    inputs are skipped (zero padding).
    """
    anchor = np.asarray(out_keys, dtype=np.int64).reshape(-1, 3) * stride
    rules = []
    for k, offset in enumerate(KERNEL_OFFSETS):
        found = source.lookup(anchor + offset)
        hit = np.flatnonzero(found >= 0)
        if len(hit):
            rules.append((k, hit, found[hit]))
    return rules


def upsample_rulebook(parent: SparseVoxelGrid, children: np.ndarray) -> List[Tuple[int, np.ndarray, np.ndarray]]:
    """Each child reads its parent through the kernel slot of its octant"""
    children = np.asarray(children, dtype=np.int64).reshape(-1, 3)
    parent_rows = parent.lookup(children // 2)
    slot = (children % 2) @ np.array([4, 2, 1])
    rules = []
    for k in range(len(CHILD_OFFSETS)):
        hit = np.flatnonzero((slot == k) & (parent_rows >= 0))
        if len(hit):
            rules.append((k, hit, parent_rows[hit]))
    return rules
