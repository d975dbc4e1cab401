"""
Quad mesh quality.

Metrics, in report order:
- area distortion: 1e4 * population std of face areas
- angle distortion: RMS deviation of corner angles from pi/2 (radians)
- singularities: irregular vertices (interior valence != 4, boundary != 3)
- Chamfer L1: 1e4 * symmetric mean L1 point-to-surface distance
- Jacobian ratio: per-face min/max signed corner Jacobian, averaged
"""

import json
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple, Union

import numpy as np

from xgen.config.errors import DegenerateGeometryError, NonManifoldError, XGenError
from xgen.config.settings import MetricsConfig
from xgen.geometry.mesh import QuadMesh, TriangleMesh, triangle_areas
from xgen.geometry.mesh_io import sample_surface
from xgen.sdf.tsdf import l1_distance

METRIC_SCALE = 1e4
ZERO_AREA = 1e-14


def _require_faces(quad: QuadMesh) -> None:
    if not len(quad.faces):
        raise XGenError("quad mesh has no faces")


def quad_areas(quad: QuadMesh) -> np.ndarray:
    """Area per quad, averaged over both diagonal splits"""
    v, f = quad.vertices, quad.faces
    first = triangle_areas(v, f[:, [0, 1, 2]]) + triangle_areas(v, f[:, [0, 2, 3]])
    second = triangle_areas(v, f[:, [0, 1, 3]]) + triangle_areas(v, f[:, [1, 2, 3]])
    return 0.5 * (first + second)


def area_distortion(quad: QuadMesh) -> float:
    _require_faces(quad)
    return float(METRIC_SCALE * np.std(quad_areas(quad)))


def quad_corner_angles(quad: QuadMesh) -> np.ndarray:
    """(F, 4) interior angle at each corner"""
    corners = quad.vertices[quad.faces]
    following = np.roll(corners, -1, axis=1) - corners
    preceding = np.roll(corners, 1, axis=1) - corners
    lengths = np.minimum(np.linalg.norm(following, axis=2), np.linalg.norm(preceding, axis=2))
    if np.any(lengths <= 0.0):
        face = int(np.argwhere(lengths <= 0.0)[0, 0])
        raise DegenerateGeometryError(f"quad {face} has a zero-length edge")
    sine = np.linalg.norm(np.cross(following, preceding), axis=2)
    cosine = np.einsum("fci,fci->fc", following, preceding)
    return np.arctan2(sine, cosine)


def angle_distortion(quad: QuadMesh) -> float:
    _require_faces(quad)
    deviation = quad_corner_angles(quad) - 0.5 * np.pi
    return float(np.sqrt(np.mean(deviation ** 2)))


def quad_valences(quad: QuadMesh) -> Tuple[np.ndarray, np.ndarray]:
    """Vertex valence (distinct incident edges) and boundary flags"""
    sides = np.sort(np.stack([quad.faces, np.roll(quad.faces, -1, axis=1)], axis=2).reshape(-1, 2), axis=1)
    edges, counts = np.unique(sides, axis=0, return_counts=True)
    bad = edges[counts > 2]
    if len(bad):
        raise NonManifoldError([tuple(int(i) for i in e) for e in bad])
    n = len(quad.vertices)
    valence = np.bincount(edges.reshape(-1), minlength=n)
    boundary = np.zeros(n, dtype=bool)
    boundary[edges[counts == 1].reshape(-1)] = True
    return valence, boundary


def quad_singularities(quad: QuadMesh, boundary_valence: int = 3, count_boundary: bool = True) -> int:
    valence, boundary = quad_valences(quad)
    used = valence > 0
    irregular = used & ~boundary & (valence != 4)
    if count_boundary:
        irregular |= used & boundary & (valence != boundary_valence)
    return int(irregular.sum())


def _as_triangles(mesh: Union[TriangleMesh, QuadMesh]) -> TriangleMesh:
    return mesh.triangulated() if isinstance(mesh, QuadMesh) else mesh


def chamfer_l1(a: Union[TriangleMesh, QuadMesh], b: Union[TriangleMesh, QuadMesh], samples: int = 100_000, seed: int = 0) -> float:
    """
    1e4 * (mean_a d1(x, B) + mean_b d1(y, A)) / 2, where d1 is the exact L1
    distance from a sample to the other surface. Each side draws its own
    area-uniform samples from an independent stream of `seed`.
    """
    tri_a, tri_b = _as_triangles(a), _as_triangles(b)
    seed_a, seed_b = np.random.SeedSequence(seed).generate_state(2)
    points_a = sample_surface(tri_a, samples, int(seed_a)).points
    points_b = sample_surface(tri_b, samples, int(seed_b)).points
    a_to_b = l1_distance(tri_b, points_a)
    b_to_a = l1_distance(tri_a, points_b)
    return float(METRIC_SCALE * 0.5 * (a_to_b.mean() + b_to_a.mean()))


def corner_jacobians(quad: QuadMesh) -> Tuple[np.ndarray, np.ndarray]:
    """
    Signed corner Jacobians in each face's best-fit plane, plus the per-face
    polygon area used to flag degenerate faces.
    """
    corners = quad.vertices[quad.faces]
    centred = corners - corners.mean(axis=1, keepdims=True)
    _, _, vt = np.linalg.svd(centred)
    normal = vt[:, 2, :]
    # orient the plane normal with the winding (Newell)
    newell = 0.5 * np.sum(np.cross(corners, np.roll(corners, -1, axis=1)), axis=1)
    flip = np.einsum("ij,ij->i", normal, newell) < 0
    normal[flip] = -normal[flip]
    following = np.roll(corners, -1, axis=1) - corners
    preceding = np.roll(corners, 1, axis=1) - corners
    jacobians = np.einsum("fci,fi->fc", np.cross(following, preceding), normal)
    return jacobians, np.linalg.norm(newell, axis=1)


def jacobian_ratio(quad: QuadMesh) -> Tuple[float, np.ndarray, np.ndarray]:
    """(mean ratio, per-face ratio, degenerate-face flags)"""
    _require_faces(quad)
    jacobians, area = corner_jacobians(quad)
    magnitude = np.abs(jacobians)
    largest = magnitude.max(axis=1)
    same_sign = np.all(jacobians > 0, axis=1) | np.all(jacobians < 0, axis=1)
    degenerate = (area <= ZERO_AREA) | (largest <= 0.0)
    ratio = np.where(same_sign & ~degenerate, magnitude.min(axis=1) / np.where(largest > 0, largest, 1.0), 0.0)
    return float(ratio.mean()), ratio, degenerate


@dataclass
class QuadQualityReport:
    area_distortion: float
    angle_distortion: float
    singularity_count: int
    chamfer_l1: Optional[float]
    jacobian_ratio_mean: float
    per_face: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def summary(self) -> Dict[str, Optional[float]]:
        return {
            "area_distortion": self.area_distortion,
            "angle_distortion": self.angle_distortion,
            "singularity_count": self.singularity_count,
            "chamfer_l1": self.chamfer_l1,
            "jacobian_ratio_mean": self.jacobian_ratio_mean,
        }

    def to_json(self, include_faces: bool = False) -> str:
        document = dict(self.summary())
        if include_faces:
            document["per_face"] = {k: v.tolist() for k, v in self.per_face.items()}
        return json.dumps(document, sort_keys=True, separators=(",", ":"))

    def to_table(self) -> str:
        rows = [
            ("Area (x1e4)", f"{self.area_distortion:.4f}"),
            ("Angle (rad)", f"{self.angle_distortion:.4f}"),
            ("#Sings", str(self.singularity_count)),
            ("Chamfer L1 (x1e4)", "-" if self.chamfer_l1 is None else f"{self.chamfer_l1:.4f}"),
            ("JR", f"{self.jacobian_ratio_mean:.4f}"),
        ]
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name:<{width}}  {value:>12}" for name, value in rows)


def evaluate_quad_mesh(
    quad: QuadMesh,
    reference: Optional[Union[TriangleMesh, QuadMesh]] = None,
    config: Optional[MetricsConfig] = None,
    seed: int = 0,
) -> QuadQualityReport:
    config = config or MetricsConfig()
    _require_faces(quad)
    areas = quad_areas(quad)
    angles = quad_corner_angles(quad)
    mean_ratio, ratios, degenerate = jacobian_ratio(quad)
    return QuadQualityReport(
        area_distortion=float(METRIC_SCALE * np.std(areas)),
        angle_distortion=float(np.sqrt(np.mean((angles - 0.5 * np.pi) ** 2))),
        singularity_count=quad_singularities(quad, config.boundary_valence, config.count_boundary),
        chamfer_l1=None if reference is None else chamfer_l1(quad, reference, config.chamfer_samples, seed),
        jacobian_ratio_mean=mean_ratio,
        per_face={"area": areas, "jacobian_ratio": ratios, "degenerate": degenerate,
                  "max_angle_deviation": np.abs(angles - 0.5 * np.pi).max(axis=1)},
    )
