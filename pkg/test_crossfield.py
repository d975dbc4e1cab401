# test_crossfield.py
# Tests for 4-symmetric direction fields: tangent projection, alignment,
# ground-truth field generation, singularity indices and the XFLD format

import tempfile
from pathlib import Path

import numpy as np

from xgen.config.errors import DegenerateDirectionError
from xgen.fields.crossfield import (
    alignment_deviation,
    generate_gt_field,
    interpolate_field,
    load_field,
    matching_deviation,
    project_to_tangent,
    rotate_about,
    save_field,
    singularity_indices,
    vertex_to_face_field,
)
from xgen.geometry.mesh_io import principal_curvatures, sample_surface_with_faces
from xgen.geometry.primitives import cylinder, grid_mesh, icosphere, torus


# ============================================================================
# TEST DATA
# ============================================================================

Z = np.array([[0.0, 0.0, 1.0]])
X = np.array([[1.0, 0.0, 0.0]])
Y = np.array([[0.0, 1.0, 0.0]])


def field_for(mesh, iterations: int = 50, **kwargs):
    return generate_gt_field(mesh, principal_curvatures(mesh), iterations=iterations, **kwargs)


# ============================================================================
# POINTWISE TESTS
# ============================================================================

def test_tangent_projection():
    """
    TEST 1: Projection onto the tangent plane

    What this tests:
    - Output is unit and orthogonal to the normal
    - A direction parallel to the normal raises DegenerateDirectionError
    """
    print("\n" + "=" * 70)
    print("TEST 1: Tangent projection")
    print("=" * 70)

    rng = np.random.default_rng(0)
    normals = rng.standard_normal((100, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    alpha = project_to_tangent(rng.standard_normal((100, 3)), normals)
    assert np.allclose(np.linalg.norm(alpha, axis=1), 1.0, atol=1e-12)
    assert np.max(np.abs(np.einsum("ij,ij->i", alpha, normals))) < 1e-12
    print("✓ Unit and tangent on 100 random frames")

    try:
        project_to_tangent(2.0 * Z, Z)
        raise AssertionError("parallel direction should fail")
    except DegenerateDirectionError:
        print("✓ Parallel direction rejected")

    print("\n✅ Tangent Projection Test: PASSED")


def test_alignment_and_matching():
    """
    TEST 2: Cross comparison

    What this tests:
    - Alignment deviation is 0 for quarter turns and sqrt(2)-1 at 45 degrees
    - Matching deviation reduces by the nearest quarter turn
    - Exact 45 degree ties reduce toward zero rotation
    """
    print("\n" + "=" * 70)
    print("TEST 2: Alignment and matching")
    print("=" * 70)

    for quarter in range(4):
        rotated = rotate_about(X, Z[0], quarter * np.pi / 2)
        assert alignment_deviation(rotated, X, Y)[0] < 1e-12
    diagonal = rotate_about(X, Z[0], np.pi / 4)
    assert abs(alignment_deviation(diagonal, X, Y)[0] - (np.sqrt(2.0) - 1.0)) < 1e-12
    print("✓ Alignment deviation 0 at quarter turns, sqrt(2)-1 at 45 degrees")

    ten = rotate_about(X, Z[0], np.radians(100.0))
    assert abs(matching_deviation(X, Z, ten, Z)[0] - np.radians(10.0)) < 1e-12
    plus = matching_deviation(X, Z, rotate_about(X, Z[0], np.pi / 4), Z)[0]
    minus = matching_deviation(X, Z, rotate_about(X, Z[0], -np.pi / 4), Z)[0]
    assert abs(plus - np.pi / 4) < 1e-12
    assert abs(minus + np.pi / 4) < 1e-12
    print("✓ 100 degrees matches as 10; ties stay at +/-45")

    print("\n✅ Alignment and Matching Test: PASSED")


# ============================================================================
# GROUND-TRUTH FIELD TESTS
# ============================================================================

def test_gt_field_on_cylinder():
    """
    TEST 3: Curvature-aligned field on a cylinder

    What this tests:
    - Energy never increases over the sweeps
    - Away from the rims the cross follows the circumference and the axis
    """
    print("\n" + "=" * 70)
    print("TEST 3: Ground-truth field on a cylinder")
    print("=" * 70)

    tube = cylinder(0.3, 0.8, 96, 48)
    field = field_for(tube)
    energy = np.asarray(field.metadata["energy"])
    assert np.all(np.diff(energy) <= 1e-9 * np.maximum(1.0, np.abs(energy[:-1])))
    print(f"✓ Energy {energy[0]:.4f} -> {energy[-1]:.4f}, never increasing")

    interior = np.abs(tube.vertices[:, 2]) < 0.3
    angle = np.arctan2(tube.vertices[:, 1], tube.vertices[:, 0])
    around = np.stack([-np.sin(angle), np.cos(angle), np.zeros_like(angle)], axis=1)
    axis = np.tile([0.0, 0.0, 1.0], (len(angle), 1))
    error = alignment_deviation(field.alpha[interior], around[interior], axis[interior]).mean()
    print(f"✓ Mean deviation from the analytic cross: {error:.5f}")
    assert error < 0.02

    print("\n✅ Cylinder Field Test: PASSED")


def test_constant_field_is_fixed_point():
    """
    TEST 4: Flat grid with a constant start

    What this tests:
    - With zero curvature there is no forcing and a constant cross is
      already optimal, so it comes back unchanged
    - Every interior vertex has index 0
    """
    print("\n" + "=" * 70)
    print("TEST 4: Constant field on a flat grid")
    print("=" * 70)

    flat = grid_mesh(8)
    start = np.tile(X, (len(flat.vertices), 1))
    field = field_for(flat, iterations=10, initial_directions=start)
    assert alignment_deviation(field.alpha, X, Y).max() < 1e-9
    print("✓ Field unchanged after 10 sweeps")

    indices = singularity_indices(field)
    assert len(indices.vertices) == 49
    assert len(indices.boundary_vertices) == 32
    assert indices.count == 0
    print("✓ 49 interior vertices, no singularity")

    print("\n✅ Constant Field Test: PASSED")


def test_singularity_totals():
    """
    TEST 5: Index sums follow the Euler characteristic

    What this tests:
    - Sphere fields sum to 2, torus fields to 0
    - Indices are multiples of 1/4
    """
    print("\n" + "=" * 70)
    print("TEST 5: Singularity totals")
    print("=" * 70)

    for name, mesh, expected in (("sphere", icosphere(0.4, 2), 2.0), ("torus", torus(), 0.0)):
        indices = singularity_indices(field_for(mesh))
        assert abs(indices.total - expected) < 1e-9
        assert np.allclose(indices.indices * 4, np.round(indices.indices * 4))
        print(f"✓ {name}: {indices.count} singular vertices, total index {indices.total}")

    print("\n✅ Singularity Totals Test: PASSED")


# ============================================================================
# RESAMPLING AND FILE TESTS
# ============================================================================

def test_interpolation_and_faces():
    """
    TEST 6: Carrying a vertex field to samples and faces

    What this tests:
    - Interpolated (mu, nu) are unit, tangent and orthogonal
    - The face field has one cross per face, tangent to the face normal
    """
    print("\n" + "=" * 70)
    print("TEST 6: Interpolation and face fields")
    print("=" * 70)

    mesh = icosphere(0.4, 2)
    field = field_for(mesh)
    cloud, faces, barycentric = sample_surface_with_faces(mesh, 500, seed=2)
    mu, nu = interpolate_field(field, mesh, faces, barycentric, cloud.normals)
    assert np.allclose(np.linalg.norm(mu, axis=1), 1.0, atol=1e-9)
    assert np.max(np.abs(np.einsum("ij,ij->i", mu, cloud.normals))) < 1e-9
    assert np.max(np.abs(np.einsum("ij,ij->i", mu, nu))) < 1e-9
    print("✓ 500 interpolated crosses are orthonormal and tangent")

    per_face = vertex_to_face_field(field)
    assert per_face.site_tag == "face"
    assert len(per_face) == len(mesh.faces)
    assert np.max(np.abs(np.einsum("ij,ij->i", per_face.alpha, mesh.face_normals))) < 1e-9
    print("✓", len(per_face), "face crosses")

    print("\n✅ Interpolation and Faces Test: PASSED")


def test_field_file_format():
    """
    TEST 7: XFLD files

    What this tests:
    - Sites and the optional ground-truth block read back within float32
    """
    print("\n" + "=" * 70)
    print("TEST 7: XFLD format")
    print("=" * 70)

    mesh = icosphere(0.4, 1)
    field = field_for(mesh, iterations=5)
    with_gt = field.with_ground_truth(field.alpha, field.beta)
    with tempfile.TemporaryDirectory() as tmp:
        for name, original in (("plain", field), ("gt", with_gt)):
            path = Path(tmp) / f"{name}.xfld"
            save_field(original, path)
            loaded = load_field(path, mesh)
            assert loaded.site_tag == "vertex"
            assert np.allclose(loaded.alpha, original.alpha, atol=1e-6)
            assert np.allclose(loaded.points, original.points, atol=1e-6)
            assert (loaded.gt_mu is not None) == (original.gt_mu is not None)
            print(f"✓ {name} field reads back ({len(loaded)} sites)")

    print("\n✅ Field File Format Test: PASSED")


# ============================================================================
# MAIN TEST RUNNER
# ============================================================================

def run_all_tests():
    """
    Main test orchestration function
    Runs all tests and provides a summary report
    """
    print("\n" + "█" * 70)
    print("CROSS FIELD TEST SUITE")
    print("█" * 70)

    tests = [
        test_tangent_projection,
        test_alignment_and_matching,
        test_gt_field_on_cylinder,
        test_constant_field_is_fixed_point,
        test_singularity_totals,
        test_interpolation_and_faces,
        test_field_file_format,
    ]
    passed = 0
    for test in tests:
        try:
            test()
            passed += 1
        except Exception as e:
            print(f"\n❌ {test.__name__} FAILED: {type(e).__name__}: {e}")

    print("\n" + "█" * 70)
    print(f"RESULTS: {passed}/{len(tests)} tests passed")
    print("█" * 70)
    if passed == len(tests):
        print("\n🎉 ALL TESTS PASSED!")
    return passed == len(tests)


if __name__ == "__main__":
    success = run_all_tests()
    exit(0 if success else 1)
