"""Cross-field accuracy against principal curvature frames or a reference field."""

import logging

import numpy as np

from xgen.config.errors import XGenError
from xgen.fields.crossfield import FieldOnMesh, _symmetric_average, alignment_deviation, project_to_tangent
from xgen.geometry.mesh import CurvatureFrames, TriangleMesh

logger = logging.getLogger(__name__)

DEFAULT_ANISOTROPY_MASK = 0.05


def angular_error(field: FieldOnMesh, frames: CurvatureFrames, anisotropy_mask: float = DEFAULT_ANISOTROPY_MASK) -> float:
    """
    Mean alignment deviation of the field against (dir_max, dir_min), over
    sites whose anisotropy reaches the mask threshold. Umbilic sites carry no
    meaningful principal direction and are left out.
    """
    if len(field) != len(frames):
        raise XGenError(f"field has {len(field)} sites, frames have {len(frames)}")
    keep = frames.anisotropy >= anisotropy_mask
    if not keep.any():
        raise XGenError(f"no site reaches the anisotropy threshold {anisotropy_mask}")
    # directions are compared in the frame's tangent plane
    mu = project_to_tangent(frames.dir_max[keep], field.normals[keep])
    nu = np.cross(mu, field.normals[keep])
    deviation = alignment_deviation(field.alpha[keep], mu, nu)
    logger.debug("angular_error: %d of %d sites evaluated", int(keep.sum()), len(field))
    return float(deviation.mean())


def field_deviation(field: FieldOnMesh, reference: FieldOnMesh) -> float:
    """Mean alignment deviation between two fields on the same sites"""
    if len(field) != len(reference):
        raise XGenError("fields must share their sites")
    if not len(field):
        raise XGenError("cannot compare empty fields")
    return float(alignment_deviation(field.alpha, reference.alpha, reference.beta).mean())


def ground_truth_deviation(field: FieldOnMesh) -> float:
    """Mean alignment deviation of a field against its own (mu, nu) block"""
    if field.gt_mu is None:
        raise XGenError("field carries no ground-truth directions")
    if not len(field):
        raise XGenError("cannot evaluate an empty field")
    return float(alignment_deviation(field.alpha, field.gt_mu, field.gt_nu).mean())


def frames_at_faces(mesh: TriangleMesh, frames: CurvatureFrames) -> CurvatureFrames:
    """Principal frames at face centres, averaging the three corner crosses"""
    if len(frames) != len(mesh.vertices):
        raise XGenError("need one frame per vertex")
    normals = mesh.face_normals
    weights = np.full((len(mesh.faces), 3), 1.0 / 3.0)
    dir_max = _symmetric_average(frames.dir_max[mesh.faces], weights, normals)
    return CurvatureFrames(
        points=mesh.face_centers,
        normals=normals,
        dir_min=np.cross(normals, dir_max),
        dir_max=dir_max,
        k_min=frames.k_min[mesh.faces].mean(axis=1),
        k_max=frames.k_max[mesh.faces].mean(axis=1),
        anisotropy=frames.anisotropy[mesh.faces].mean(axis=1),
    )
