"""
Ground-truth signed distances, thin-shell sampling and surface extraction.

Dense grids use the same lattice as the sparse grids: value [i, j, k] sits
at (-0.5 + i/R, -0.5 + j/R, -0.5 + k/R). Negative inside, clamped to
[-truncation, truncation].
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from skimage import measure

from xgen.config.errors import (
    DegenerateGeometryError,
    EmptyShapeError,
    FormatVersionError,
    TruncatedFileError,
    XGenError,
)
from xgen.geometry.mesh import MIN_FACE_AREA, OrientedPointCloud, TriangleMesh, triangle_areas

logger = logging.getLogger(__name__)

TSDF_MAGIC = b"TSDF"
TSDF_VERSION = 1
_TSDF_HEADER = struct.Struct("<4sIIf")

# point x triangle pairs per vectorised batch
PAIR_BATCH = 2_000_000
SIGN_VOTES = 3


@dataclass(frozen=True)
class DenseSdfGrid:
    resolution: int
    values: np.ndarray
    truncation: float
    degraded: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        r = self.resolution
        if values.shape != (r, r, r):
            raise XGenError(f"dense grid needs shape ({r}, {r}, {r}), got {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def cell_size(self) -> float:
        return 1.0 / self.resolution

    def vertex_positions(self) -> np.ndarray:
        """(R, R, R, 3) lattice vertex coordinates"""
        coords = -0.5 + np.arange(self.resolution) / self.resolution
        return np.stack(np.meshgrid(coords, coords, coords, indexing="ij"), axis=-1)


@dataclass(frozen=True)
class SdfSamples:
    """Shell query set Q; the last `surface_count` rows are surface points with value 0"""

    points: np.ndarray
    values: np.ndarray
    shell_epsilon: float
    surface_count: int = 0

    def __len__(self) -> int:
        return len(self.points)


# ============================================================================
# Exact distance and winding numbers
# ============================================================================

def closest_points_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest point on triangle (a, b, c) to p, row-wise. Voronoi-region test."""
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    d1, d2 = np.einsum("ij,ij->i", ab, ap), np.einsum("ij,ij->i", ac, ap)
    d3, d4 = np.einsum("ij,ij->i", ab, bp), np.einsum("ij,ij->i", ac, bp)
    d5, d6 = np.einsum("ij,ij->i", ab, cp), np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    def ratio(num, den):
        return num / np.where(np.abs(den) > 1e-300, den, 1.0)

    denom = va + vb + vc
    result = a + ab * ratio(vb, denom)[:, None] + ac * ratio(vc, denom)[:, None]

    # later assignments take priority, matching the sequential region tests
    edge_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    result[edge_bc] = (b + (c - b) * ratio(d4 - d3, (d4 - d3) + (d5 - d6))[:, None])[edge_bc]
    edge_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    result[edge_ac] = (a + ac * ratio(d2, d2 - d6)[:, None])[edge_ac]
    vertex_c = (d6 >= 0) & (d5 <= d6)
    result[vertex_c] = c[vertex_c]
    edge_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    result[edge_ab] = (a + ab * ratio(d1, d1 - d3)[:, None])[edge_ab]
    vertex_b = (d3 >= 0) & (d4 <= d3)
    result[vertex_b] = b[vertex_b]
    vertex_a = (d1 <= 0) & (d2 <= 0)
    result[vertex_a] = a[vertex_a]
    return result


def euclidean_to_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.linalg.norm(p - closest_points_on_triangles(p, a, b, c), axis=1)


def l1_to_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """
    Exact L1 distance from p to triangle (a, b, c), row-wise.

    The minimum of |p - x|_1 over the triangle sits at a vertex of the
    triangle cut by the planes x_k = p_k: a corner, an edge point with one
    coordinate equal to p's, or an interior point with two coordinates equal
    to p's. All of them are tried.
    """
    best = np.minimum(np.minimum(np.abs(p - a).sum(axis=1), np.abs(p - b).sum(axis=1)), np.abs(p - c).sum(axis=1))

    for u, v in ((a, b), (b, c), (c, a)):
        edge = v - u
        for k in range(3):
            span = edge[:, k]
            usable = np.abs(span) > 1e-300
            s = (p[:, k] - u[:, k]) / np.where(usable, span, 1.0)
            ok = usable & (s >= 0.0) & (s <= 1.0)
            x = u + s[:, None] * edge
            best = np.where(ok, np.minimum(best, np.abs(p - x).sum(axis=1)), best)

    ab, ac = b - a, c - a
    normal = np.cross(ab, ac)
    d00 = np.einsum("ij,ij->i", ab, ab)
    d01 = np.einsum("ij,ij->i", ab, ac)
    d11 = np.einsum("ij,ij->i", ac, ac)
    den = d00 * d11 - d01 * d01
    offset = np.einsum("ij,ij->i", normal, p - a)
    for k in range(3):
        usable = (np.abs(normal[:, k]) > 1e-300) & (den > 0)
        t = offset / np.where(usable, normal[:, k], 1.0)
        x = p.copy()
        x[:, k] -= t
        ax = x - a
        d20 = np.einsum("ij,ij->i", ax, ab)
        d21 = np.einsum("ij,ij->i", ax, ac)
        safe = np.where(den > 0, den, 1.0)
        bv = (d11 * d20 - d01 * d21) / safe
        bw = (d00 * d21 - d01 * d20) / safe
        inside = usable & (bv >= 0.0) & (bw >= 0.0) & (bv + bw <= 1.0)
        best = np.where(inside, np.minimum(best, np.abs(t)), best)
    return best


def _nearest_over_faces(mesh: TriangleMesh, points: np.ndarray, pair_distance, cap: Optional[float]) -> np.ndarray:
    """
    Minimum of `pair_distance` over the mesh's triangles for every point.

    `pair_distance` must never be below the Euclidean distance. Candidates
    come from a KD-tree over triangle centroids: the best triangle is always
    within (upper bound + largest centroid radius).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not len(mesh.faces):
        raise DegenerateGeometryError("distance to a mesh without faces")
    tri = mesh.vertices[mesh.faces]
    centroids = tri.mean(axis=1)
    reach = float(np.linalg.norm(tri - centroids[:, None, :], axis=2).max())
    tree = cKDTree(centroids)

    _, nearest = tree.query(points)
    upper = pair_distance(points, tri[nearest, 0], tri[nearest, 1], tri[nearest, 2])
    radius = (upper if cap is None else np.minimum(upper, cap)) + reach
    result = upper.copy()

    chunk = max(1, PAIR_BATCH // max(1, min(len(centroids), 512)))
    for start in range(0, len(points), chunk):
        stop = min(start + chunk, len(points))
        neighbours = tree.query_ball_point(points[start:stop], radius[start:stop])
        lengths = np.fromiter((len(n) for n in neighbours), dtype=np.int64, count=stop - start)
        if not lengths.sum():
            continue
        owner = np.repeat(np.arange(start, stop), lengths)
        faces = np.fromiter((f for n in neighbours for f in n), dtype=np.int64, count=int(lengths.sum()))
        for lo in range(0, len(owner), PAIR_BATCH):
            hi = lo + PAIR_BATCH
            o, f = owner[lo:hi], faces[lo:hi]
            np.minimum.at(result, o, pair_distance(points[o], tri[f, 0], tri[f, 1], tri[f, 2]))
    return result


def unsigned_distance(mesh: TriangleMesh, points: np.ndarray, cap: Optional[float] = None) -> np.ndarray:
    """
    Exact distance from each point to the mesh.

    With `cap` set, distances above it are only guaranteed to be >= cap.
    """
    return _nearest_over_faces(mesh, points, euclidean_to_triangles, cap)


def l1_distance(mesh: TriangleMesh, points: np.ndarray) -> np.ndarray:
    """Exact L1 distance from each point to the mesh surface"""
    return _nearest_over_faces(mesh, points, l1_to_triangles, None)


def winding_number(mesh: TriangleMesh, points: np.ndarray) -> np.ndarray:
    """Generalised winding number: solid angle sum / 4 pi (1 inside, 0 outside for closed meshes)"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.vertices[mesh.faces]
    result = np.zeros(len(points))
    chunk = max(1, PAIR_BATCH // max(1, len(tri)))
    for start in range(0, len(points), chunk):
        block = points[start:start + chunk]
        a = tri[None, :, 0, :] - block[:, None, :]
        b = tri[None, :, 1, :] - block[:, None, :]
        c = tri[None, :, 2, :] - block[:, None, :]
        la, lb, lc = np.linalg.norm(a, axis=2), np.linalg.norm(b, axis=2), np.linalg.norm(c, axis=2)
        numerator = np.einsum("mfi,mfi->mf", a, np.cross(b, c))
        denominator = (la * lb * lc + np.einsum("mfi,mfi->mf", a, b) * lc
                       + np.einsum("mfi,mfi->mf", b, c) * la + np.einsum("mfi,mfi->mf", c, a) * lb)
        result[start:start + chunk] = 2.0 * np.arctan2(numerator, denominator).sum(axis=1) / (4.0 * np.pi)
    return result


# ============================================================================
# TSDF
# ============================================================================

def compute_tsdf(mesh: TriangleMesh, resolution: int, truncation: float) -> DenseSdfGrid:
    """
    Truncated signed distance at every lattice vertex.

    Vertices within two cells of the surface are signed by their own winding
    number. The rest form 6-connected regions that cannot cross the surface
    (every crossing lies within half a cell of a lattice vertex); each region
    takes the majority sign of a few winding evaluations.
    """
    if truncation <= 0:
        raise XGenError("truncation must be positive")
    degraded = not mesh.is_watertight()
    if degraded:
        logger.warning("compute_tsdf: mesh is not watertight; signs come from the winding threshold only")

    grid = DenseSdfGrid(resolution, np.zeros((resolution,) * 3), truncation, degraded)
    positions = grid.vertex_positions().reshape(-1, 3)
    distance = np.minimum(unsigned_distance(mesh, positions, cap=truncation), truncation)

    h = 1.0 / resolution
    near_threshold = min(2.0 * h, truncation)
    near = distance <= near_threshold
    if near_threshold < 0.5 * h:
        near[:] = True
    inside = np.zeros(len(positions), dtype=bool)
    if near.any():
        inside[near] = winding_number(mesh, positions[near]) > 0.5

    far = (~near).reshape((resolution,) * 3)
    labels, count = ndimage.label(far)
    flat_labels = labels.reshape(-1)
    if count:
        order = np.argsort(flat_labels, kind="stable")
        bounds = np.searchsorted(flat_labels[order], np.arange(1, count + 2))
        voters = []
        for component in range(count):
            members = order[bounds[component]:bounds[component + 1]]
            picks = np.unique(members[np.linspace(0, len(members) - 1, SIGN_VOTES).astype(np.int64)])
            voters.append(picks)
        votes = winding_number(mesh, positions[np.concatenate(voters)]) > 0.5
        cursor = 0
        component_inside = np.zeros(count + 1, dtype=bool)
        for component, picks in enumerate(voters, start=1):
            component_inside[component] = votes[cursor:cursor + len(picks)].sum() * 2 > len(picks)
            cursor += len(picks)
        inside[~near] = component_inside[flat_labels[~near]]

    values = np.where(inside, -distance, distance).reshape((resolution,) * 3)
    logger.debug("compute_tsdf: R=%d, %d near vertices, %d far regions", resolution, int(near.sum()), count)
    return DenseSdfGrid(resolution, values, truncation, degraded)


def sdf_at(grid: DenseSdfGrid, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of the dense grid; points beyond the last vertex use edge values"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    r = grid.resolution
    padded = np.pad(grid.values, ((0, 1), (0, 1), (0, 1)), mode="edge")
    scaled = np.clip((points + 0.5) * r, 0.0, float(r))
    base = np.minimum(np.floor(scaled).astype(np.int64), r - 1)
    t = scaled - base
    result = np.zeros(len(points))
    for dx in (0, 1):
        wx = t[:, 0] if dx else 1.0 - t[:, 0]
        for dy in (0, 1):
            wy = t[:, 1] if dy else 1.0 - t[:, 1]
            for dz in (0, 1):
                wz = t[:, 2] if dz else 1.0 - t[:, 2]
                result += wx * wy * wz * padded[base[:, 0] + dx, base[:, 1] + dy, base[:, 2] + dz]
    return result


def sdf_gradient(grid: DenseSdfGrid, points: np.ndarray) -> np.ndarray:
    step = 0.5 / grid.resolution
    gradient = np.zeros((len(points), 3))
    for axis in range(3):
        offset = np.zeros(3)
        offset[axis] = step
        gradient[:, axis] = (sdf_at(grid, points + offset) - sdf_at(grid, points - offset)) / (2.0 * step)
    return gradient


def _shell_cells(grid: DenseSdfGrid, epsilon: float) -> np.ndarray:
    r = grid.resolution
    padded = np.pad(grid.values, ((0, 1), (0, 1), (0, 1)), mode="edge")
    low = np.full((r, r, r), np.inf)
    high = np.full((r, r, r), -np.inf)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                corner = padded[dx:dx + r, dy:dy + r, dz:dz + r]
                low = np.minimum(low, corner)
                high = np.maximum(high, corner)
    return np.argwhere((low < epsilon) & (high > -epsilon))


def sample_thin_shell(
    grid: DenseSdfGrid,
    epsilon: float,
    count: int,
    seed: int,
    surface: Optional[OrientedPointCloud] = None,
    max_rounds: int = 200,
) -> SdfSamples:
    """
    Uniform samples of the region |sdf| < epsilon, by rejection inside the
    cells whose corner range meets the shell. Surface points, when given,
    are appended with value 0 so the surface set is a subset of the queries.
    """
    if epsilon > grid.truncation:
        raise XGenError(f"shell epsilon {epsilon} exceeds truncation {grid.truncation}")
    if count < 1:
        raise XGenError("shell sample count must be at least 1")
    cells = _shell_cells(grid, epsilon)
    if not len(cells):
        raise EmptyShapeError("no cell meets the thin-shell predicate")

    rng = np.random.default_rng(seed)
    h = grid.cell_size
    kept_points, kept_values, total = [], [], 0
    for _ in range(max_rounds):
        batch = max(1024, 2 * (count - total))
        chosen = cells[rng.integers(len(cells), size=batch)]
        points = -0.5 + (chosen + rng.random((batch, 3))) * h
        values = sdf_at(grid, points)
        accept = np.abs(values) < epsilon
        kept_points.append(points[accept])
        kept_values.append(values[accept])
        total += int(accept.sum())
        if total >= count:
            break
    else:
        raise EmptyShapeError(f"thin shell too sparse: {total} of {count} samples after {max_rounds} rounds")

    points = np.vstack(kept_points)[:count]
    values = np.concatenate(kept_values)[:count]
    surface_count = 0
    if surface is not None:
        points = np.vstack([points, surface.points])
        values = np.concatenate([values, np.zeros(len(surface))])
        surface_count = len(surface)
    return SdfSamples(points, values, epsilon, surface_count)


# ============================================================================
# Marching cubes
# ============================================================================

def weld_vertices(vertices: np.ndarray, faces: np.ndarray, tolerance: float) -> Tuple[np.ndarray, np.ndarray]:
    """Merge vertices closer than `tolerance` and drop faces that collapse"""
    pairs = cKDTree(vertices).query_pairs(tolerance, output_type="ndarray")
    if len(pairs):
        n = len(vertices)
        graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
        _, labels = connected_components(graph, directed=False)
        _, first, remap = np.unique(labels, return_index=True, return_inverse=True)
        vertices = vertices[first]
        faces = remap.reshape(-1)[faces]
    distinct = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 2] != faces[:, 0])
    faces = faces[distinct]
    faces = faces[triangle_areas(vertices, faces) >= MIN_FACE_AREA]
    used = np.unique(faces)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return vertices[used], remap[faces]


def marching_cubes(grid: DenseSdfGrid) -> TriangleMesh:
    """
    Zero level set of the grid, faces oriented so normals point toward
    positive SDF.
    """
    values = grid.values.copy()
    if not (values.min() < 0.0 < values.max()):
        raise EmptyShapeError("grid has no zero crossing")
    # exact zeros create coincident vertices on lattice points
    values[values == 0.0] = 1e-12
    h = grid.cell_size
    vertices, faces, _, _ = measure.marching_cubes(
        values, level=0.0, spacing=(h, h, h), method="lorensen", allow_degenerate=False
    )
    vertices = vertices.astype(np.float64) - 0.5
    vertices, faces = weld_vertices(vertices, faces.astype(np.int64), 1e-7 * h)
    if not len(faces):
        raise EmptyShapeError("marching cubes produced no faces")

    mesh = TriangleMesh(vertices, faces)
    agreement = np.einsum("ij,ij->i", mesh.face_normals, sdf_gradient(grid, mesh.face_centers))
    if np.sum(agreement < 0) > np.sum(agreement > 0):
        mesh = TriangleMesh(vertices, faces[:, ::-1])
    return mesh


# ============================================================================
# TSDF file format
# ============================================================================

def tsdf_bytes(grid: DenseSdfGrid) -> bytes:
    header = _TSDF_HEADER.pack(TSDF_MAGIC, TSDF_VERSION, grid.resolution, grid.truncation)
    return header + grid.values.astype("<f4").ravel(order="F").tobytes()


def save_tsdf(grid: DenseSdfGrid, path: Union[str, Path]) -> None:
    from xgen.storage.artifacts import atomic_write_bytes

    atomic_write_bytes(path, tsdf_bytes(grid))


def load_tsdf(path: Union[str, Path]) -> DenseSdfGrid:
    data = Path(path).read_bytes()
    if len(data) < _TSDF_HEADER.size:
        raise TruncatedFileError(f"{path}: shorter than the TSDF header")
    magic, version, resolution, truncation = _TSDF_HEADER.unpack_from(data)
    if magic != TSDF_MAGIC:
        raise FormatVersionError(f"{path}: not a TSDF file")
    if version != TSDF_VERSION:
        raise FormatVersionError(f"{path}: TSDF version {version}, expected {TSDF_VERSION}")
    expected = resolution ** 3
    available = (len(data) - _TSDF_HEADER.size) // 4
    if available < expected:
        raise TruncatedFileError(f"{path}: {available} of {expected} values present")
    values = np.frombuffer(data, dtype="<f4", count=expected, offset=_TSDF_HEADER.size).astype(np.float64).reshape((resolution,) * 3, order="F")
    return DenseSdfGrid(resolution, values, float(truncation))
