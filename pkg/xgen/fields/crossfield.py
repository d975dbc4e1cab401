"""
4-RoSy cross fields on triangle meshes.

A cross is stored as one unit tangent vector alpha; the second direction is
always beta = alpha x n. Any of the four rotations of alpha by k*pi/2 about
n describes the same cross.

Internally angles are kept as unit complex numbers z = exp(4i*theta) in a
per-site tangent basis, which makes the 4-fold symmetry implicit.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.sparse import coo_matrix

from xgen.config.errors import (
    DegenerateDirectionError,
    DegenerateGeometryError,
    FormatVersionError,
    NonManifoldError,
    TruncatedFileError,
    XGenError,
)
from xgen.geometry.mesh import CurvatureFrames, TriangleMesh

logger = logging.getLogger(__name__)

DEGENERATE_PROJECTION = 1e-8
ORTHOGONALITY_TOLERANCE = 1e-4
ENERGY_SLACK = 1e-9

SITE_TAGS = {"vertex": 0, "face": 1}
FIELD_MAGIC = b"XFLD"
FIELD_VERSION = 1
FLAG_HAS_GT = 1
_FIELD_HEADER = struct.Struct("<4sIBBQ")


# ============================================================================
# Types
# ============================================================================

@dataclass(frozen=True)
class CrossFieldSample:
    point: np.ndarray
    normal: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    gt_mu: Optional[np.ndarray] = None
    gt_nu: Optional[np.ndarray] = None


@dataclass(frozen=True)
class FieldOnMesh:
    """
    One cross per site. Sites are mesh vertices or face centres (`site_tag`).
    `mesh` is None for fields read back from disk.
    """

    site_tag: str
    points: np.ndarray
    normals: np.ndarray
    alpha: np.ndarray
    gt_mu: Optional[np.ndarray] = None
    gt_nu: Optional[np.ndarray] = None
    mesh: Optional[TriangleMesh] = None
    metadata: Dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.site_tag not in SITE_TAGS:
            raise XGenError(f"site_tag must be one of {sorted(SITE_TAGS)}, got {self.site_tag!r}")
        arrays = {}
        for name in ("points", "normals", "alpha"):
            arrays[name] = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1, 3)
        count = len(arrays["points"])
        if any(len(a) != count for a in arrays.values()):
            raise XGenError("points, normals and alpha differ in length")
        if np.any(np.abs(np.einsum("ij,ij->i", arrays["alpha"], arrays["normals"])) > ORTHOGONALITY_TOLERANCE):
            raise XGenError("alpha must be tangent to the normal")
        for name, value in arrays.items():
            object.__setattr__(self, name, value)
        if (self.gt_mu is None) != (self.gt_nu is None):
            raise XGenError("gt_mu and gt_nu come together")
        if self.gt_mu is not None:
            mu = np.asarray(self.gt_mu, dtype=np.float64).reshape(-1, 3)
            nu = np.asarray(self.gt_nu, dtype=np.float64).reshape(-1, 3)
            if len(mu) != count or len(nu) != count:
                raise XGenError("ground-truth directions differ in length from the sites")
            object.__setattr__(self, "gt_mu", mu)
            object.__setattr__(self, "gt_nu", nu)
        if self.mesh is not None:
            expected = len(self.mesh.vertices) if self.site_tag == "vertex" else len(self.mesh.faces)
            if expected != count:
                raise XGenError(f"{count} sites but the mesh has {expected} {self.site_tag} sites")

    def __len__(self) -> int:
        return len(self.points)

    def __getitem__(self, i: int) -> CrossFieldSample:
        return CrossFieldSample(
            point=self.points[i],
            normal=self.normals[i],
            alpha=self.alpha[i],
            beta=self.beta[i],
            gt_mu=None if self.gt_mu is None else self.gt_mu[i],
            gt_nu=None if self.gt_nu is None else self.gt_nu[i],
        )

    @property
    def beta(self) -> np.ndarray:
        return np.cross(self.alpha, self.normals)

    def with_ground_truth(self, mu: np.ndarray, nu: np.ndarray) -> "FieldOnMesh":
        return FieldOnMesh(self.site_tag, self.points, self.normals, self.alpha, mu, nu, self.mesh, dict(self.metadata))


# ============================================================================
# Pointwise operations
# ============================================================================

def project_to_tangent(raw: np.ndarray, n: np.ndarray) -> np.ndarray:
    """
    Unit tangent direction: (I - n n^T) raw, normalised.
    Works on single vectors or row-wise on (N, 3) arrays.
    """
    raw = np.asarray(raw, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    projected = raw - np.sum(raw * n, axis=-1, keepdims=True) * n
    length = np.linalg.norm(projected, axis=-1, keepdims=True)
    if np.any(length < DEGENERATE_PROJECTION):
        raise DegenerateDirectionError("direction is parallel to the normal")
    alpha = projected / length
    # one more pass removes the residual normal component left by rounding
    alpha = alpha - np.sum(alpha * n, axis=-1, keepdims=True) * n
    return alpha / np.linalg.norm(alpha, axis=-1, keepdims=True)


def tangent_cross(raw: np.ndarray, n: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(alpha, beta) with beta = alpha x n"""
    alpha = project_to_tangent(raw, n)
    return alpha, np.cross(alpha, n)


def alignment_deviation(alpha: np.ndarray, mu: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """|alpha.mu| + |alpha.nu| - 1, clamped at 0; 0 when aligned, sqrt(2)-1 at 45 degrees"""
    alpha, mu, nu = (np.asarray(v, dtype=np.float64) for v in (alpha, mu, nu))
    value = np.abs(np.sum(alpha * mu, axis=-1)) + np.abs(np.sum(alpha * nu, axis=-1)) - 1.0
    return np.maximum(value, 0.0)


def rotate_about(vectors: np.ndarray, axis: np.ndarray, angle) -> np.ndarray:
    """Rodrigues rotation of `vectors` about unit `axis` by `angle` (row-wise)"""
    vectors = np.asarray(vectors, dtype=np.float64)
    axis = np.asarray(axis, dtype=np.float64)
    cos, sin = np.cos(angle), np.sin(angle)
    if np.ndim(angle):
        cos, sin = np.asarray(cos)[..., None], np.asarray(sin)[..., None]
    along = np.sum(axis * vectors, axis=-1, keepdims=True)
    return vectors * cos + np.cross(axis, vectors) * sin + axis * along * (1.0 - cos)


def minimal_rotation(source: np.ndarray, target: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """
    Apply the smallest rotation taking unit `source` to unit `target` to
    `vectors`, row-wise. Antipodal pairs are rejected.
    """
    axis = np.cross(source, target)
    cos = np.sum(source * target, axis=-1, keepdims=True)
    if np.any(cos <= -1.0 + 1e-8):
        raise DegenerateGeometryError("antipodal normals have no unique transport")
    along = np.sum(axis * vectors, axis=-1, keepdims=True)
    return vectors * cos + np.cross(axis, vectors) + axis * along / (1.0 + cos)


def tangent_basis(normals: np.ndarray, reference: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Orthonormal tangent basis (e1, e2 = n x e1). e1 follows `reference` when
    it is given, otherwise the coordinate axis least aligned with n.
    """
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    if reference is None:
        reference = np.eye(3)[np.argmin(np.abs(normals), axis=1)]
    e1 = project_to_tangent(reference, normals)
    return e1, np.cross(normals, e1)


def _symmetric_average(directions: np.ndarray, weights: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """
    4-RoSy weighted average of per-row direction sets.
    directions: (N, K, 3) roughly tangent to normals (N, 3); weights: (N, K).
    """
    e1, e2 = tangent_basis(normals)
    x = np.einsum("nki,ni->nk", directions, e1)
    y = np.einsum("nki,ni->nk", directions, e2)
    z = np.exp(4j * np.arctan2(y, x))
    total = np.sum(weights * z, axis=1)
    fallback = np.abs(total) < 1e-12
    strongest = z[np.arange(len(z)), np.argmax(weights, axis=1)]
    total = np.where(fallback, strongest, total)
    angle = np.angle(total) / 4.0
    return np.cos(angle)[:, None] * e1 + np.sin(angle)[:, None] * e2


# ============================================================================
# Mesh topology helpers
# ============================================================================

def check_manifold(mesh: TriangleMesh) -> Tuple[np.ndarray, np.ndarray]:
    """Unique edges and their face counts; raises on edges with more than two faces"""
    edges, counts = mesh.edge_face_counts()
    bad = edges[counts > 2]
    if len(bad):
        raise NonManifoldError([tuple(int(i) for i in e) for e in bad])
    return edges, counts


def greedy_colouring(n: int, edges: np.ndarray) -> np.ndarray:
    """Vertex colours such that no edge joins two vertices of the same colour"""
    adjacency = coo_matrix((np.ones(2 * len(edges)), (np.r_[edges[:, 0], edges[:, 1]], np.r_[edges[:, 1], edges[:, 0]])),
                           shape=(n, n)).tocsr()
    colours = np.full(n, -1, dtype=np.int64)
    for v in range(n):
        taken = set(colours[adjacency.indices[adjacency.indptr[v]:adjacency.indptr[v + 1]]].tolist())
        colour = 0
        while colour in taken:
            colour += 1
        colours[v] = colour
    return colours


# ============================================================================
# Ground-truth field generation
# ============================================================================

def _edge_transport_angles(e1: np.ndarray, e2: np.ndarray, normals: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """
    For edge (v, w): angle of w's e1, carried into v's tangent plane by the
    minimal normal-aligning rotation, measured in v's basis.
    """
    v, w = edges[:, 0], edges[:, 1]
    carried = minimal_rotation(normals[w], normals[v], e1[w])
    return np.arctan2(np.einsum("ij,ij->i", carried, e2[v]), np.einsum("ij,ij->i", carried, e1[v]))


def field_energy(z: np.ndarray, edges: np.ndarray, transport: np.ndarray, forcing: np.ndarray, smooth_weight: float) -> float:
    """
    smooth_weight * sum_edges (1 - cos 4(theta_v - theta_w - phi_vw))
    + sum_v forcing_v (1 - cos 4 theta_v)
    """
    carried = z[edges[:, 1]] * np.exp(4j * transport)
    smooth = np.sum(1.0 - np.real(z[edges[:, 0]] * np.conj(carried)))
    curvature = np.sum(forcing * (1.0 - np.real(z)))
    return float(smooth_weight * smooth + curvature)


def generate_gt_field(
    mesh: TriangleMesh,
    frames: CurvatureFrames,
    iterations: int = 50,
    smooth_weight: float = 1.0,
    umbilic_threshold: float = 0.05,
    initial_directions: Optional[np.ndarray] = None,
) -> FieldOnMesh:
    """
    Smooth, curvature-aligned per-vertex cross field.

    Each vertex minimises its local share of the energy exactly: the optimum
    of -Re(z_v * conj(S)) is z_v = S/|S| with S the transported neighbour
    crosses plus the anisotropy-weighted curvature target. Vertices of one
    colour are never adjacent, so they update together from the same state
    and every sweep can only lower the energy.
    """
    if len(frames) != len(mesh.vertices):
        raise XGenError("need one curvature frame per vertex")
    edges, _ = check_manifold(mesh)
    normals = frames.normals
    e1 = frames.dir_max
    e2 = np.cross(normals, e1)
    forcing = np.where(frames.anisotropy >= umbilic_threshold, frames.anisotropy, 0.0)

    if initial_directions is None:
        theta = np.zeros(len(normals))
    else:
        start = project_to_tangent(initial_directions, normals)
        theta = np.arctan2(np.einsum("ij,ij->i", start, e2), np.einsum("ij,ij->i", start, e1))
    z = np.exp(4j * theta)

    transport = _edge_transport_angles(e1, e2, normals, edges)
    # directed copies: (v <- w) carries phi, (w <- v) carries -phi
    target = np.r_[edges[:, 0], edges[:, 1]]
    source = np.r_[edges[:, 1], edges[:, 0]]
    rotation = np.exp(4j * np.r_[transport, -transport])
    colours = greedy_colouring(len(normals), edges)
    classes = [np.flatnonzero(colours == c) for c in range(int(colours.max()) + 1)] if len(colours) else []
    in_class = [np.isin(target, members) for members in classes]

    history = [field_energy(z, edges, transport, forcing, smooth_weight)]
    for iteration in range(iterations):
        for members, selected in zip(classes, in_class):
            pull = np.zeros(len(z), dtype=np.complex128)
            np.add.at(pull, target[selected], smooth_weight * z[source[selected]] * rotation[selected])
            pull[members] += forcing[members]
            strength = np.abs(pull[members])
            movable = members[strength > 1e-12]
            z[movable] = pull[movable] / np.abs(pull[movable])
        energy = field_energy(z, edges, transport, forcing, smooth_weight)
        if energy > history[-1] + ENERGY_SLACK * max(1.0, abs(history[-1])):
            raise XGenError(f"field energy increased at iteration {iteration}: {history[-1]} -> {energy}")
        history.append(energy)
    logger.debug("generate_gt_field: energy %.6g -> %.6g over %d iterations", history[0], history[-1], iterations)

    theta = np.angle(z) / 4.0
    alpha = np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2
    alpha = project_to_tangent(alpha, normals)
    return FieldOnMesh("vertex", mesh.vertices, normals, alpha, mesh=mesh, metadata={"energy": history})


# ============================================================================
# Resampling
# ============================================================================

def interpolate_field(
    field: FieldOnMesh,
    mesh: TriangleMesh,
    face_index: np.ndarray,
    barycentric: np.ndarray,
    normals: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Carry a per-vertex field to surface samples: 4-RoSy average of the three
    corner crosses in the face plane, then projected onto each sample's
    normal. Returns (mu, nu) with nu = mu x n.
    """
    if field.site_tag != "vertex":
        raise XGenError("interpolate_field needs a vertex field")
    corners = mesh.faces[face_index]
    face_normals = mesh.face_normals[face_index]
    directions = field.alpha[corners]
    averaged = _symmetric_average(directions, np.asarray(barycentric, dtype=np.float64), face_normals)
    try:
        mu = project_to_tangent(averaged, normals)
    except DegenerateDirectionError:
        fallback, _ = tangent_basis(normals)
        projected = averaged - np.sum(averaged * normals, axis=1, keepdims=True) * normals
        weak = np.linalg.norm(projected, axis=1) < DEGENERATE_PROJECTION
        projected[weak] = fallback[weak]
        mu = project_to_tangent(projected, normals)
    return mu, np.cross(mu, normals)


def vertex_to_face_field(field: FieldOnMesh) -> FieldOnMesh:
    """Per-face crosses by equal-weight 4-RoSy averaging of the corners"""
    if field.site_tag == "face":
        return field
    if field.mesh is None:
        raise XGenError("vertex_to_face_field needs the field's mesh")
    mesh = field.mesh
    weights = np.full((len(mesh.faces), 3), 1.0 / 3.0)
    alpha = _symmetric_average(field.alpha[mesh.faces], weights, mesh.face_normals)
    return FieldOnMesh("face", mesh.face_centers, mesh.face_normals, alpha, mesh=mesh)


# ============================================================================
# Singularities
# ============================================================================

@dataclass(frozen=True)
class SingularityIndices:
    """Index (multiple of 1/4) of every interior vertex; boundary vertices listed apart"""

    vertices: np.ndarray
    indices: np.ndarray
    boundary_vertices: np.ndarray

    def singular(self) -> List[Tuple[int, float]]:
        return [(int(v), float(i)) for v, i in zip(self.vertices, self.indices) if i != 0.0]

    @property
    def total(self) -> float:
        return float(self.indices.sum())

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.indices))


def _round_toward_zero_at_ties(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.ceil(np.abs(x) - 0.5)


def matching_deviation(source_alpha: np.ndarray, source_normal: np.ndarray, target_alpha: np.ndarray, target_normal: np.ndarray) -> np.ndarray:
    """
    Signed angle from the transported source cross to the target cross about
    the target normal, reduced to [-pi/4, pi/4] by the nearest quarter turn
    (exact ties reduce toward zero rotation).
    """
    carried = minimal_rotation(source_normal, target_normal, source_alpha)
    raw = np.arctan2(np.einsum("ij,ij->i", np.cross(carried, target_alpha), target_normal),
                     np.einsum("ij,ij->i", carried, target_alpha))
    quarter = 0.5 * np.pi
    return raw - _round_toward_zero_at_ties(raw / quarter) * quarter


def corner_angles(mesh: TriangleMesh) -> np.ndarray:
    """(F, 3) interior angle at each face corner"""
    tri = mesh.vertices[mesh.faces]
    angles = np.zeros((len(tri), 3))
    for corner in range(3):
        u = tri[:, (corner + 1) % 3] - tri[:, corner]
        v = tri[:, (corner + 2) % 3] - tri[:, corner]
        angles[:, corner] = np.arctan2(np.linalg.norm(np.cross(u, v), axis=1), np.einsum("ij,ij->i", u, v))
    return angles


def singularity_indices(field: FieldOnMesh) -> SingularityIndices:
    """
    Walk the counter-clockwise face ring of every interior vertex, summing
    the matching deviation between consecutive face crosses. The index is
    (sum + angle defect) / 2 pi, rounded to a quarter.
    """
    if field.mesh is None:
        raise XGenError("singularity_indices needs the field's mesh")
    mesh = field.mesh
    check_manifold(mesh)
    faces_field = vertex_to_face_field(field)
    faces = mesh.faces

    # directed edge (a, b) -> face holding it
    owner: Dict[Tuple[int, int], int] = {}
    for f, (a, b, c) in enumerate(faces.tolist()):
        owner[(a, b)] = f
        owner[(b, c)] = f
        owner[(c, a)] = f

    angles = corner_angles(mesh)
    angle_sum = np.zeros(len(mesh.vertices))
    for corner in range(3):
        np.add.at(angle_sum, faces[:, corner], angles[:, corner])

    first_face = np.full(len(mesh.vertices), -1, dtype=np.int64)
    first_face[faces[::-1].reshape(-1)] = np.repeat(np.arange(len(faces))[::-1], 3)

    interior, loops, boundary = [], [], []
    for v in range(len(mesh.vertices)):
        start = int(first_face[v])
        if start < 0:
            continue
        ring = [start]
        closed = False
        current = start
        while True:
            a, b, c = faces[current].tolist()
            previous = {a: c, b: a, c: b}[v]
            following = owner.get((v, previous))
            if following is None:
                break
            if following == start:
                closed = True
                break
            ring.append(following)
            current = following
            if len(ring) > len(faces):
                break
        if closed:
            interior.append(v)
            loops.append(ring)
        else:
            boundary.append(v)

    indices = np.zeros(len(interior))
    if interior:
        source = np.concatenate([np.asarray(r) for r in loops])
        target = np.concatenate([np.roll(np.asarray(r), -1) for r in loops])
        owner_vertex = np.repeat(np.arange(len(interior)), [len(r) for r in loops])
        deviation = matching_deviation(
            faces_field.alpha[source], faces_field.normals[source],
            faces_field.alpha[target], faces_field.normals[target],
        )
        turning = np.bincount(owner_vertex, weights=deviation, minlength=len(interior))
        defect = 2.0 * np.pi - angle_sum[np.asarray(interior)]
        indices = np.round(4.0 * (turning + defect) / (2.0 * np.pi)) / 4.0
    if boundary:
        logger.debug("singularity_indices: skipped %d boundary vertices", len(boundary))
    return SingularityIndices(np.asarray(interior, dtype=np.int64), indices, np.asarray(boundary, dtype=np.int64))


# ============================================================================
# XFLD file format
# ============================================================================

def field_bytes(field: FieldOnMesh) -> bytes:
    has_gt = field.gt_mu is not None
    columns = [field.points, field.normals, field.alpha]
    if has_gt:
        columns += [field.gt_mu, field.gt_nu]
    table = np.hstack(columns).astype("<f4") if len(field) else np.zeros((0, 3 * len(columns)), dtype="<f4")
    header = _FIELD_HEADER.pack(FIELD_MAGIC, FIELD_VERSION, SITE_TAGS[field.site_tag],
                                FLAG_HAS_GT if has_gt else 0, len(field))
    return header + table.tobytes()


def save_field(field: FieldOnMesh, path: Union[str, Path]) -> None:
    from xgen.storage.artifacts import atomic_write_bytes

    atomic_write_bytes(path, field_bytes(field))


def load_field(path: Union[str, Path], mesh: Optional[TriangleMesh] = None) -> FieldOnMesh:
    data = Path(path).read_bytes()
    if len(data) < _FIELD_HEADER.size:
        raise TruncatedFileError(f"{path}: shorter than the XFLD header")
    magic, version, site_tag, flags, count = _FIELD_HEADER.unpack_from(data)
    if magic != FIELD_MAGIC:
        raise FormatVersionError(f"{path}: not an XFLD file")
    if version != FIELD_VERSION:
        raise FormatVersionError(f"{path}: XFLD version {version}, expected {FIELD_VERSION}")
    tags = {value: name for name, value in SITE_TAGS.items()}
    if site_tag not in tags:
        raise FormatVersionError(f"{path}: unknown site tag {site_tag}")
    width = 15 if flags & FLAG_HAS_GT else 9
    available = (len(data) - _FIELD_HEADER.size) // (4 * width)
    if available < count:
        raise TruncatedFileError(f"{path}: {count} sites announced, {available} present")
    table = np.frombuffer(data, dtype="<f4", count=count * width, offset=_FIELD_HEADER.size)
    table = table.astype(np.float64).reshape(count, width)
    mu = table[:, 9:12] if width == 15 else None
    nu = table[:, 12:15] if width == 15 else None
    return FieldOnMesh(tags[site_tag], table[:, 0:3], table[:, 3:6], table[:, 6:9], mu, nu, mesh)
