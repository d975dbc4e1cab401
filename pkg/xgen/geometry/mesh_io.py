"""
Mesh and point-cloud I/O plus the surface-level preprocessing the dataset
builder needs.

Workflow for one shape:
1. load_mesh -> TriangleMesh
2. normalize_to_unit_cube -> mesh inside [-0.5, 0.5]^3 (+ invertible transform)
3. sample_surface -> OrientedPointCloud (network input P)
4. principal_curvatures -> CurvatureFrames (GT field initialisation, AE metric)

Raw point clouds without normals go through estimate_normals instead of 3.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree

from xgen.config.errors import (
    DegenerateGeometryError,
    MeshParseError,
    TruncatedFileError,
    UnsupportedFormatError,
    XGenError,
)
from xgen.geometry.mesh import (
    MIN_FACE_AREA,
    CurvatureFrames,
    OrientedPointCloud,
    QuadMesh,
    TriangleMesh,
    triangle_areas,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DEFAULT_MARGIN = 0.02
DEFAULT_NORMAL_K = 16
ANISOTROPY_DELTA = 1e-6

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


# ============================================================================
# OBJ
# ============================================================================

def _parse_obj(path: PathLike) -> Tuple[np.ndarray, List[List[int]]]:
    """
    Read v/f records of an OBJ file.

    Returns vertices and 0-based polygons. Indices are 1-based in the file,
    negative indices count back from the last vertex seen so far.
    """
    vertices = []
    polygons = []
    with open(path, "r", encoding="utf-8", errors="replace") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            tag = tokens[0]
            if tag == "v":
                if len(tokens) < 4:
                    raise MeshParseError("vertex record needs 3 coordinates", str(path), line_no)
                try:
                    vertices.append([float(t) for t in tokens[1:4]])
                except ValueError:
                    raise MeshParseError("vertex coordinate is not a number", str(path), line_no)
            elif tag == "f":
                if len(tokens) < 4:
                    raise MeshParseError("face record needs at least 3 vertices", str(path), line_no)
                polygon = []
                for token in tokens[1:]:
                    try:
                        index = int(token.split("/")[0])
                    except ValueError:
                        raise MeshParseError(f"bad face index {token!r}", str(path), line_no)
                    if index == 0:
                        raise MeshParseError("face index 0 is invalid (OBJ is 1-based)", str(path), line_no)
                    resolved = index - 1 if index > 0 else len(vertices) + index
                    if resolved < 0 or resolved >= len(vertices):
                        raise MeshParseError(f"face index {index} out of range", str(path), line_no)
                    polygon.append(resolved)
                polygons.append(polygon)
            # vt/vn/usemtl/o/g/s records are ignored
    return np.asarray(vertices, dtype=np.float64).reshape(-1, 3), polygons


def _triangulate(vertices: np.ndarray, polygons: List[List[int]]) -> np.ndarray:
    triangles = []
    for polygon in polygons:
        if len(polygon) == 3:
            triangles.append(polygon)
        elif len(polygon) == 4:
            a, b, c, d = polygon
            # shortest diagonal
            if np.linalg.norm(vertices[a] - vertices[c]) <= np.linalg.norm(vertices[b] - vertices[d]):
                triangles.extend([[a, b, c], [a, c, d]])
            else:
                triangles.extend([[a, b, d], [b, c, d]])
        else:
            triangles.extend([[polygon[0], polygon[i], polygon[i + 1]] for i in range(1, len(polygon) - 1)])
    return np.asarray(triangles, dtype=np.int64).reshape(-1, 3)


def _drop_degenerate(vertices: np.ndarray, faces: np.ndarray, source: str) -> np.ndarray:
    if not len(faces):
        return faces
    keep = triangle_areas(vertices, faces) >= MIN_FACE_AREA
    if not keep.all():
        logger.warning("%s: dropped %d degenerate faces", source, int((~keep).sum()))
    return faces[keep]


def write_mesh(mesh: TriangleMesh, path: PathLike) -> None:
    """Write v/f records; nothing else"""
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(_obj_text(mesh.vertices, mesh.faces))


def write_quad_mesh(mesh: QuadMesh, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(_obj_text(mesh.vertices, mesh.faces))


def _obj_text(vertices: np.ndarray, faces: np.ndarray) -> str:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in vertices.tolist()]
    lines += ["f " + " ".join(str(i + 1) for i in face) for face in faces.tolist()]
    return "\n".join(lines) + "\n"


def obj_bytes(mesh: Union[TriangleMesh, QuadMesh]) -> bytes:
    return _obj_text(mesh.vertices, mesh.faces).encode("utf-8")


# ============================================================================
# PLY
# ============================================================================

@dataclass
class _PlyElement:
    name: str
    count: int
    properties: List[Tuple[str, str, Optional[str]]]  # (name, type, list count type)


def _read_ply(path: PathLike):
    with open(path, "rb") as handle:
        magic = handle.readline().strip()
        if magic != b"ply":
            raise MeshParseError("missing 'ply' magic", str(path), 1)
        fmt = None
        elements: List[_PlyElement] = []
        line_no = 1
        while True:
            raw = handle.readline()
            line_no += 1
            if not raw:
                raise TruncatedFileError(f"{path}: PLY header has no end_header")
            tokens = raw.decode("ascii", errors="replace").split()
            if not tokens or tokens[0] in ("comment", "obj_info"):
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
                if fmt not in ("ascii", "binary_little_endian"):
                    raise UnsupportedFormatError(f"{path}: PLY format {fmt} is not supported")
            elif tokens[0] == "element":
                elements.append(_PlyElement(tokens[1], int(tokens[2]), []))
            elif tokens[0] == "property":
                if not elements:
                    raise MeshParseError("property before any element", str(path), line_no)
                if tokens[1] == "list":
                    elements[-1].properties.append((tokens[4], _ply_type(tokens[3], path, line_no),
                                                    _ply_type(tokens[2], path, line_no)))
                else:
                    elements[-1].properties.append((tokens[2], _ply_type(tokens[1], path, line_no), None))
            elif tokens[0] == "end_header":
                break
        if fmt is None:
            raise MeshParseError("PLY header has no format line", str(path), line_no)

        data = {}
        if fmt == "ascii":
            body = handle.read().decode("ascii", errors="replace").split()
            cursor = 0
            for element in elements:
                rows = []
                for _ in range(element.count):
                    row = []
                    for _, _, list_type in element.properties:
                        if cursor >= len(body):
                            raise TruncatedFileError(f"{path}: PLY body ends inside element {element.name}")
                        if list_type is None:
                            row.append(float(body[cursor]))
                            cursor += 1
                        else:
                            n = int(body[cursor])
                            row.append([float(v) for v in body[cursor + 1:cursor + 1 + n]])
                            cursor += 1 + n
                    rows.append(row)
                data[element.name] = rows
        else:
            for element in elements:
                if all(list_type is None for _, _, list_type in element.properties):
                    dtype = np.dtype([(name, "<" + t) for name, t, _ in element.properties])
                    buffer = handle.read(dtype.itemsize * element.count)
                    if len(buffer) < dtype.itemsize * element.count:
                        raise TruncatedFileError(f"{path}: PLY body ends inside element {element.name}")
                    table = np.frombuffer(buffer, dtype=dtype)
                    data[element.name] = [[table[name][i] for name, _, _ in element.properties]
                                          for i in range(element.count)]
                else:
                    rows = []
                    for _ in range(element.count):
                        row = []
                        for _, item_type, list_type in element.properties:
                            if list_type is None:
                                row.append(_read_scalar(handle, item_type, path))
                            else:
                                n = int(_read_scalar(handle, list_type, path))
                                width = np.dtype("<" + item_type).itemsize
                                chunk = handle.read(width * n)
                                if len(chunk) < width * n:
                                    raise TruncatedFileError(f"{path}: PLY list truncated")
                                row.append(np.frombuffer(chunk, dtype="<" + item_type).tolist())
                        rows.append(row)
                    data[element.name] = rows
    return elements, data


def _ply_type(name: str, path: PathLike, line_no: int) -> str:
    if name not in _PLY_TYPES:
        raise MeshParseError(f"unknown PLY type {name!r}", str(path), line_no)
    return _PLY_TYPES[name]


def _read_scalar(handle, item_type: str, path: PathLike):
    width = np.dtype("<" + item_type).itemsize
    chunk = handle.read(width)
    if len(chunk) < width:
        raise TruncatedFileError(f"{path}: PLY body truncated")
    return np.frombuffer(chunk, dtype="<" + item_type)[0]


def _ply_columns(elements, data, element_name: str, names: List[str], path: PathLike) -> Optional[np.ndarray]:
    element = next((e for e in elements if e.name == element_name), None)
    if element is None:
        return None
    available = [p[0] for p in element.properties]
    if not all(n in available for n in names):
        return None
    columns = [available.index(n) for n in names]
    rows = data[element_name]
    return np.asarray([[row[c] for c in columns] for row in rows], dtype=np.float64).reshape(-1, len(names))


def load_point_cloud(path: PathLike) -> OrientedPointCloud:
    """Read a PLY point cloud with x y z nx ny nz vertex properties"""
    path = Path(path)
    if path.suffix.lower() != ".ply":
        raise UnsupportedFormatError(f"{path}: point clouds are read from PLY only")
    elements, data = _read_ply(path)
    points = _ply_columns(elements, data, "vertex", ["x", "y", "z"], path)
    normals = _ply_columns(elements, data, "vertex", ["nx", "ny", "nz"], path)
    if points is None or normals is None:
        raise MeshParseError("PLY vertices need x y z nx ny nz", str(path), None)
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    if np.any(lengths < 1e-12):
        raise DegenerateGeometryError(f"{path}: zero-length normal in point cloud")
    return OrientedPointCloud(points, normals / lengths)


def write_point_cloud(cloud: OrientedPointCloud, path: PathLike, binary: bool = True) -> None:
    header = [
        "ply",
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
        f"element vertex {len(cloud)}",
        "property float x", "property float y", "property float z",
        "property float nx", "property float ny", "property float nz",
        "end_header",
    ]
    table = np.hstack([cloud.points, cloud.normals]).astype("<f4")
    with open(path, "wb") as handle:
        handle.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            handle.write(table.tobytes())
        else:
            handle.write("".join(" ".join(f"{v:.9g}" for v in row) + "\n" for row in table.tolist()).encode("ascii"))


# ============================================================================
# Loading entry points
# ============================================================================

def load_mesh(path: PathLike) -> TriangleMesh:
    """
    Load a triangle mesh from OBJ or PLY.

    Quads are split along their shorter diagonal, larger polygons are fanned.
    Degenerate faces are dropped with a warning.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        vertices, polygons = _parse_obj(path)
    elif suffix == ".ply":
        elements, data = _read_ply(path)
        vertices = _ply_columns(elements, data, "vertex", ["x", "y", "z"], path)
        if vertices is None:
            raise MeshParseError("PLY has no x y z vertex properties", str(path), None)
        face_element = next((e for e in elements if e.name == "face"), None)
        polygons = []
        if face_element is not None:
            slot = next((i for i, p in enumerate(face_element.properties) if p[2] is not None), None)
            if slot is None:
                raise MeshParseError("PLY face element has no index list", str(path), None)
            polygons = [[int(i) for i in row[slot]] for row in data["face"]]
            if polygons and (min(min(p) for p in polygons) < 0 or max(max(p) for p in polygons) >= len(vertices)):
                raise MeshParseError("PLY face index out of range", str(path), None)
    else:
        raise UnsupportedFormatError(f"{path}: unsupported mesh format {suffix or '(none)'}")

    faces = _drop_degenerate(vertices, _triangulate(vertices, polygons), str(path))
    return TriangleMesh(vertices, faces)


def load_quad_mesh(path: PathLike) -> QuadMesh:
    """Load an all-quad OBJ, keeping the quads"""
    path = Path(path)
    if path.suffix.lower() != ".obj":
        raise UnsupportedFormatError(f"{path}: quad meshes are read from OBJ only")
    vertices, polygons = _parse_obj(path)
    bad = [i for i, p in enumerate(polygons) if len(p) != 4]
    if bad:
        raise MeshParseError(f"face {bad[0]} has {len(polygons[bad[0]])} vertices, expected 4", str(path), None)
    return QuadMesh(vertices, np.asarray(polygons, dtype=np.int64).reshape(-1, 4))


# ============================================================================
# Normalisation and rigid transforms
# ============================================================================

@dataclass(frozen=True)
class NormalizationTransform:
    """x_normalized = x * scale + translation"""

    scale: float
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + self.translation

    def inverse(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) / self.scale

    def to_dict(self) -> dict:
        return {"scale": float(self.scale), "translation": [float(t) for t in self.translation]}


def bounding_box_transform(points: np.ndarray, margin: float = DEFAULT_MARGIN) -> NormalizationTransform:
    """
    Centre the bounding box at the origin and scale so the longest axis spans
    [-0.5 + margin, 0.5 - margin].
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not len(points):
        raise DegenerateGeometryError("cannot normalise an empty point set")
    lower = points.min(axis=0)
    upper = points.max(axis=0)
    extent = float((upper - lower).max())
    if extent <= 0.0:
        raise DegenerateGeometryError("bounding box has zero extent on every axis")
    scale = (1.0 - 2.0 * margin) / extent
    return NormalizationTransform(scale, -0.5 * (lower + upper) * scale)


def normalize_to_unit_cube(mesh: TriangleMesh, margin: float = DEFAULT_MARGIN) -> Tuple[TriangleMesh, NormalizationTransform]:
    transform = bounding_box_transform(mesh.vertices, margin)
    return TriangleMesh(transform.apply(mesh.vertices), mesh.faces, mesh.vertex_normals), transform


def normalize_cloud(cloud: OrientedPointCloud, margin: float = DEFAULT_MARGIN) -> Tuple[OrientedPointCloud, NormalizationTransform]:
    transform = bounding_box_transform(cloud.points, margin)
    return OrientedPointCloud(transform.apply(cloud.points), cloud.normals), transform


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation over SO(3) from a normalised Gaussian quaternion"""
    w, x, y, z = rng.normal(size=4)
    norm = np.sqrt(w * w + x * x + y * y + z * z)
    w, x, y, z = w / norm, x / norm, y / norm, z / norm
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotate_mesh(mesh: TriangleMesh, rotation: np.ndarray) -> TriangleMesh:
    normals = None if mesh.vertex_normals is None else mesh.vertex_normals @ rotation.T
    return TriangleMesh(mesh.vertices @ rotation.T, mesh.faces, normals)


# ============================================================================
# Sampling
# ============================================================================

def sample_surface_with_faces(mesh: TriangleMesh, count: int, seed: int):
    """
    Area-uniform surface samples.

    Returns (cloud, face_index, barycentric) so per-vertex attributes can be
    carried to the samples.
    """
    if count < 1:
        raise XGenError("sample count must be at least 1")
    if not len(mesh.faces):
        raise DegenerateGeometryError("cannot sample a mesh without faces")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas
    face_index = rng.choice(len(areas), size=count, p=areas / areas.sum())
    r1, r2 = rng.random((2, count))
    root = np.sqrt(r1)
    barycentric = np.stack([1.0 - root, root * (1.0 - r2), root * r2], axis=1)

    tri = mesh.vertices[mesh.faces[face_index]]
    points = np.einsum("nk,nkd->nd", barycentric, tri)
    if mesh.vertex_normals is not None:
        normals = np.einsum("nk,nkd->nd", barycentric, mesh.vertex_normals[mesh.faces[face_index]])
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        flat = mesh.face_normals[face_index]
        normals = np.where(lengths > 1e-8, normals / np.maximum(lengths, 1e-300), flat)
    else:
        normals = mesh.face_normals[face_index]
    return OrientedPointCloud(points, normals), face_index, barycentric


def sample_surface(mesh: TriangleMesh, count: int, seed: int) -> OrientedPointCloud:
    cloud, _, _ = sample_surface_with_faces(mesh, count, seed)
    return cloud


def add_noise(cloud: OrientedPointCloud, sigma: float, seed: int) -> OrientedPointCloud:
    """Gaussian position noise; sigma is a fraction of the bounding-box diagonal"""
    rng = np.random.default_rng(seed)
    diagonal = float(np.linalg.norm(cloud.points.max(axis=0) - cloud.points.min(axis=0)))
    noisy = cloud.points + rng.normal(scale=sigma * diagonal, size=cloud.points.shape)
    return OrientedPointCloud(np.clip(noisy, -0.5, 0.5), cloud.normals)


def drop_points(cloud: OrientedPointCloud, rate: float, seed: int) -> np.ndarray:
    """Indices of the points kept after dropping a fraction `rate` at random"""
    rng = np.random.default_rng(seed)
    keep = np.flatnonzero(rng.random(len(cloud)) >= rate)
    if not len(keep):
        keep = np.array([int(rng.integers(len(cloud)))])
    return keep


# ============================================================================
# Normal estimation
# ============================================================================

def estimate_normals(points: np.ndarray, k: int = DEFAULT_NORMAL_K, seed: int = 0) -> OrientedPointCloud:
    """
    PCA normals over k nearest neighbours, oriented consistently.

    Orientation is propagated along a minimum spanning tree of the k-NN graph
    with edge cost 1 - |n_i . n_j|. The root of every connected component is
    its point farthest from the cloud centroid, flipped to face outward. The
    seed only drives a 1e-12 tie-breaking jitter on edge costs.
    """
    if k < 3:
        raise XGenError("estimate_normals needs k >= 3")
    points = np.asarray(points, dtype=np.float64)
    if len(points) < k + 1:
        raise DegenerateGeometryError(f"need at least k+1={k + 1} points, got {len(points)}")

    tree = cKDTree(points)
    _, neighbors = tree.query(points, k=k + 1)
    patches = points[neighbors] - points[neighbors].mean(axis=1, keepdims=True)
    covariance = np.einsum("nki,nkj->nij", patches, patches) / (k + 1)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    normals = eigenvectors[:, :, 0]

    scale = np.maximum(eigenvalues[:, 2], 1e-300)
    degenerate = eigenvalues[:, 1] <= 1e-12 * scale
    if degenerate.all():
        raise DegenerateGeometryError("every neighbourhood is rank-deficient (collinear points)")
    if degenerate.any():
        logger.warning("estimate_normals: %d rank-deficient neighbourhoods", int(degenerate.sum()))

    rows = np.repeat(np.arange(len(points)), k)
    cols = neighbors[:, 1:].reshape(-1)
    pairs = np.unique(np.sort(np.stack([rows, cols], axis=1), axis=1), axis=0)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    jitter = np.random.default_rng(seed).random(len(pairs)) * 1e-12
    cost = 1.0 - np.abs(np.einsum("ij,ij->i", normals[pairs[:, 0]], normals[pairs[:, 1]])) + 1e-9 + jitter
    graph = coo_matrix((cost, (pairs[:, 0], pairs[:, 1])), shape=(len(points), len(points))).tocsr()
    tree_graph = minimum_spanning_tree(graph)
    tree_graph = (tree_graph + tree_graph.T).tocsr()

    centroid = points.mean(axis=0)
    n_components, labels = connected_components(tree_graph, directed=False)
    distance = np.linalg.norm(points - centroid, axis=1)
    for component in range(n_components):
        members = np.flatnonzero(labels == component)
        root = members[np.argmax(distance[members])]
        if np.dot(normals[root], points[root] - centroid) < 0:
            normals[root] = -normals[root]
        order, parent = breadth_first_order(tree_graph, root, directed=False, return_predecessors=True)
        for node in order[1:]:
            if np.dot(normals[node], normals[parent[node]]) < 0:
                normals[node] = -normals[node]

    return OrientedPointCloud(points, normals)


# ============================================================================
# Curvature
# ============================================================================

def _tangent_basis(normal: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    axis = np.eye(3)[np.argmin(np.abs(normal))]
    u = np.cross(normal, axis)
    u /= np.linalg.norm(u)
    return u, np.cross(normal, u)


def vertex_adjacency(mesh: TriangleMesh) -> csr_matrix:
    edges = mesh.edges()
    n = len(mesh.vertices)
    data = np.ones(2 * len(edges))
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adjacency = coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
    adjacency.data[:] = 1.0
    return adjacency


def principal_curvatures(mesh: TriangleMesh) -> CurvatureFrames:
    """
    Per-vertex principal directions from a quadric fit over the 2-ring.

    Heights above the tangent plane are fitted as
    z = a x^2 + b xy + c y^2 + d x + e y; the linear terms absorb normal
    error and the quadratic part gives the shape operator. Curvature is
    positive where the surface bends away from the normal (convex, outward
    normals).
    """
    normals = mesh.vertex_normals if mesh.vertex_normals is not None else mesh.area_weighted_vertex_normals()
    adjacency = vertex_adjacency(mesh)
    degree = np.diff(adjacency.indptr)
    isolated = np.flatnonzero(degree == 0)
    if len(isolated):
        raise DegenerateGeometryError(f"{len(isolated)} isolated vertices, first is {isolated[0]}")
    ring = (adjacency + adjacency @ adjacency).tocsr()

    n = len(mesh.vertices)
    dir_min = np.zeros((n, 3))
    dir_max = np.zeros((n, 3))
    k_min = np.zeros(n)
    k_max = np.zeros(n)
    for i in range(n):
        neighbors = ring.indices[ring.indptr[i]:ring.indptr[i + 1]]
        neighbors = neighbors[neighbors != i]
        normal = normals[i]
        u, v = _tangent_basis(normal)
        offsets = mesh.vertices[neighbors] - mesh.vertices[i]
        x, y, z = offsets @ u, offsets @ v, offsets @ normal
        if len(neighbors) >= 5:
            design = np.stack([x * x, x * y, y * y, x, y], axis=1)
        elif len(neighbors) >= 3:
            design = np.stack([x * x, x * y, y * y], axis=1)
        else:
            raise DegenerateGeometryError(f"vertex {i} has only {len(neighbors)} neighbours in its 2-ring")
        coefficients = np.linalg.lstsq(design, z, rcond=None)[0]
        a, b, c = coefficients[:3]
        shape_operator = -np.array([[2.0 * a, b], [b, 2.0 * c]])
        values, vectors = np.linalg.eigh(shape_operator)
        k_min[i], k_max[i] = values
        dir_min[i] = vectors[0, 0] * u + vectors[1, 0] * v
        dir_max[i] = vectors[0, 1] * u + vectors[1, 1] * v

    anisotropy = np.abs(k_max - k_min) / (np.abs(k_max) + np.abs(k_min) + ANISOTROPY_DELTA)
    return CurvatureFrames(
        points=mesh.vertices.copy(),
        normals=normals.copy(),
        dir_min=dir_min,
        dir_max=dir_max,
        k_min=k_min,
        k_max=k_max,
        anisotropy=np.clip(anisotropy, 0.0, 1.0),
    )
