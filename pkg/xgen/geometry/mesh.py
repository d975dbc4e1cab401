"""
Core geometric containers.

All arrays are numpy, float64 for coordinates and int64 for indices.
Containers validate themselves on construction and are treated as immutable
afterwards.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from xgen.config.errors import DegenerateGeometryError

MIN_FACE_AREA = 1e-12
UNIT_TOLERANCE = 1e-6


def _as_points(values, name: str) -> np.ndarray:
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 2 or array.shape[1] != 3:
        raise DegenerateGeometryError(f"{name} must have shape (N, 3), got {array.shape}")
    if not np.all(np.isfinite(array)):
        raise DegenerateGeometryError(f"{name} contains non-finite values")
    return array


def _check_unit(vectors: np.ndarray, name: str) -> None:
    if len(vectors) and np.max(np.abs(np.linalg.norm(vectors, axis=1) - 1.0)) > UNIT_TOLERANCE:
        raise DegenerateGeometryError(f"{name} must be unit length within {UNIT_TOLERANCE}")


def triangle_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = vertices[faces]
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


def face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = vertices[faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.maximum(lengths, 1e-300)


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_normals: Optional[np.ndarray] = None

    def __post_init__(self):
        vertices = _as_points(self.vertices, "vertices")
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(faces) and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise DegenerateGeometryError("face index out of range")
        if len(faces):
            areas = triangle_areas(vertices, faces)
            bad = np.flatnonzero(areas < MIN_FACE_AREA)
            if len(bad):
                raise DegenerateGeometryError(
                    f"{len(bad)} degenerate faces (area < {MIN_FACE_AREA}), first is face {bad[0]}"
                )
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)
        if self.vertex_normals is not None:
            normals = _as_points(self.vertex_normals, "vertex_normals")
            if len(normals) != len(vertices):
                raise DegenerateGeometryError("vertex_normals length does not match vertices")
            _check_unit(normals, "vertex_normals")
            object.__setattr__(self, "vertex_normals", normals)

    @property
    def face_areas(self) -> np.ndarray:
        return triangle_areas(self.vertices, self.faces)

    @property
    def face_normals(self) -> np.ndarray:
        return face_normals(self.vertices, self.faces)

    @property
    def face_centers(self) -> np.ndarray:
        return self.vertices[self.faces].mean(axis=1)

    def area_weighted_vertex_normals(self) -> np.ndarray:
        """Vertex normals as the area-weighted mean of incident face normals"""
        tri = self.vertices[self.faces]
        weighted = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        normals = np.zeros_like(self.vertices)
        for corner in range(3):
            np.add.at(normals, self.faces[:, corner], weighted)
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        return normals / np.maximum(lengths, 1e-300)

    def edges(self) -> np.ndarray:
        """Undirected edges, one row per (face, side), sorted within the row"""
        sides = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.sort(sides, axis=1)

    def edge_face_counts(self):
        """Unique undirected edges and how many faces use each"""
        unique, counts = np.unique(self.edges(), axis=0, return_counts=True)
        return unique, counts

    def is_watertight(self) -> bool:
        if not len(self.faces):
            return False
        _, counts = self.edge_face_counts()
        return bool(np.all(counts == 2))

    def with_vertices(self, vertices: np.ndarray, vertex_normals: Optional[np.ndarray] = None) -> "TriangleMesh":
        return TriangleMesh(vertices, self.faces, vertex_normals)


@dataclass(frozen=True)
class QuadMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        vertices = _as_points(self.vertices, "vertices")
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 4)
        if len(faces) and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise DegenerateGeometryError("quad index out of range")
        repeated = np.array([len(set(f)) != 4 for f in faces.tolist()], dtype=bool)
        if repeated.any():
            raise DegenerateGeometryError(f"quad {int(np.flatnonzero(repeated)[0])} repeats a vertex")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)

    def triangulated(self) -> TriangleMesh:
        """Split every quad along its 0-2 diagonal"""
        tris = np.concatenate([self.faces[:, [0, 1, 2]], self.faces[:, [0, 2, 3]]])
        areas = triangle_areas(self.vertices, tris)
        return TriangleMesh(self.vertices, tris[areas >= MIN_FACE_AREA])


@dataclass(frozen=True)
class OrientedPointCloud:
    points: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        points = _as_points(self.points, "points")
        normals = _as_points(self.normals, "normals")
        if len(points) != len(normals):
            raise DegenerateGeometryError("points and normals differ in length")
        _check_unit(normals, "normals")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "normals", normals)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, index: np.ndarray) -> "OrientedPointCloud":
        return OrientedPointCloud(self.points[index], self.normals[index])

    def in_unit_cube(self) -> bool:
        return bool(np.all(np.abs(self.points) <= 0.5))


@dataclass(frozen=True)
class CurvatureFrame:
    point: np.ndarray
    normal: np.ndarray
    dir_min: np.ndarray
    dir_max: np.ndarray
    k_min: float
    k_max: float
    anisotropy: float


@dataclass(frozen=True)
class CurvatureFrames:
    """
    Per-vertex principal frames stored column-wise.
    Indexing returns a single CurvatureFrame.
    """

    points: np.ndarray
    normals: np.ndarray
    dir_min: np.ndarray
    dir_max: np.ndarray
    k_min: np.ndarray
    k_max: np.ndarray
    anisotropy: np.ndarray

    def __len__(self) -> int:
        return len(self.points)

    def __getitem__(self, i: int) -> CurvatureFrame:
        return CurvatureFrame(
            point=self.points[i],
            normal=self.normals[i],
            dir_min=self.dir_min[i],
            dir_max=self.dir_max[i],
            k_min=float(self.k_min[i]),
            k_max=float(self.k_max[i]),
            anisotropy=float(self.anisotropy[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def umbilic_mask(self, threshold: float) -> np.ndarray:
        return self.anisotropy < threshold
