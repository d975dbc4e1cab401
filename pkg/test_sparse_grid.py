# test_sparse_grid.py
# Tests for the sparse voxel lattice: quantisation, key lookup, trilinear
# queries, pyramids, thin-shell occupancy, rulebooks and the SVXG format

import tempfile
from pathlib import Path

import numpy as np

from xgen.config.errors import FormatVersionError, TruncatedFileError
from xgen.geometry.mesh import OrientedPointCloud
from xgen.geometry.mesh_io import sample_surface
from xgen.geometry.primitives import icosphere
from xgen.grids.sparse_grid import (
    CHILD_OFFSETS,
    SparseVoxelGrid,
    build_pyramid,
    child_keys,
    grid_bytes,
    load_grid,
    quantize,
    quantize_with_flags,
    save_grid,
    shell_occupancy,
    trilinear_query,
    upsample_rulebook,
)


# ============================================================================
# TEST DATA
# ============================================================================

SPHERE_RADIUS = 0.35


def sphere_values(resolution: int) -> np.ndarray:
    coords = -0.5 + np.arange(resolution) / resolution
    xx, yy, zz = np.meshgrid(coords, coords, coords, indexing="ij")
    return np.sqrt(xx ** 2 + yy ** 2 + zz ** 2) - SPHERE_RADIUS


def full_grid(resolution: int, features) -> SparseVoxelGrid:
    keys = np.stack(np.meshgrid(*[np.arange(resolution)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    return SparseVoxelGrid(resolution, keys, features(-0.5 + keys / resolution))


# ============================================================================
# QUANTISATION TESTS
# ============================================================================

def test_quantize():
    """
    TEST 1: Point cloud to sparse voxels

    What this tests:
    - Keys come out sorted and unique
    - The offset channels hold the mean position relative to the cell centre
    - Normals are averaged and renormalised
    - Cancelling normals fall back to the first point's normal and are flagged
    """
    print("\n" + "=" * 70)
    print("TEST 1: Quantisation")
    print("=" * 70)

    points = np.array([[0.1, 0.1, 0.1], [0.15, 0.15, 0.15], [-0.4, -0.4, -0.4]])
    normals = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    grid = quantize(OrientedPointCloud(points, normals), 4)
    assert grid.keys.tolist() == [[0, 0, 0], [2, 2, 2]]
    assert grid.feature_dim == 6
    assert np.allclose(grid.features[1, :3], 0.0, atol=1e-12)
    assert np.allclose(grid.features[1, 3:], [2 ** -0.5, 2 ** -0.5, 0.0])
    assert np.allclose(grid.features[0, :3], (-0.4 + 0.5) * 4 - 0.5)
    print("✓ Sorted keys, mean offsets and renormalised normals")

    cancelling = OrientedPointCloud(points[:2], np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]))
    grid, flags = quantize_with_flags(cancelling, 4)
    assert flags.tolist() == [True]
    assert np.allclose(grid.features[0, 3:], [0.0, 0.0, 1.0])
    print("✓ Cancelling normals flagged, first normal kept")

    print("\n✅ Quantisation Test: PASSED")


def test_lookup_and_trilinear():
    """
    TEST 2: Key lookup and trilinear queries

    What this tests:
    - Absent and out-of-range keys map to -1
    - Trilinear blending reproduces a linear field exactly inside the lattice
    - Past the last vertex the edge value carries on to +0.5 instead of
      fading toward zero
    """
    print("\n" + "=" * 70)
    print("TEST 2: Lookup and trilinear queries")
    print("=" * 70)

    grid = SparseVoxelGrid(8, np.array([[1, 2, 3], [0, 0, 0], [7, 7, 7]]), np.zeros((3, 0)))
    found = grid.lookup(np.array([[1, 2, 3], [7, 7, 7], [2, 2, 2], [8, 0, 0], [-1, 0, 0]]))
    assert found[0] >= 0 and found[1] >= 0
    assert found[2:].tolist() == [-1, -1, -1]
    print("✓ Present keys found, absent and out-of-range keys give -1")

    slope = np.array([[0.7, -1.2], [2.0, 0.1], [-0.4, 0.9]])
    offset = np.array([0.3, -0.5])
    dense = full_grid(8, lambda p: p @ slope + offset)
    queries = np.random.default_rng(2).uniform(-0.5, 0.375, size=(200, 3))
    assert np.allclose(trilinear_query(dense, queries), queries @ slope + offset, atol=1e-12)
    assert trilinear_query(dense, queries[0]).shape == (2,)
    print("✓ Linear field reproduced exactly at 200 random points")

    edge = queries[:20].copy()
    edge[:, 0] = 0.5
    held = edge.copy()
    held[:, 0] = 0.375
    assert np.allclose(trilinear_query(dense, edge), held @ slope + offset, atol=1e-12)
    below = queries[:20].copy()
    below[:, 1] = -0.7
    clamped = below.copy()
    clamped[:, 1] = -0.5
    assert np.allclose(trilinear_query(dense, below), clamped @ slope + offset, atol=1e-12)
    print("✓ Queries outside the last vertex take the edge value")

    print("\n✅ Lookup and Trilinear Test: PASSED")


# ============================================================================
# HIERARCHY TESTS
# ============================================================================

def test_pyramid_and_children():
    """
    TEST 3: Multi-resolution structure

    What this tests:
    - Each pyramid level halves the resolution and holds every parent key
    - child_keys returns 8 distinct children whose parents are the inputs
    - The upsample rulebook routes every child to its parent through the
      slot of its octant
    """
    print("\n" + "=" * 70)
    print("TEST 3: Pyramid and children")
    print("=" * 70)

    cloud = sample_surface(icosphere(SPHERE_RADIUS, 3), 3000, seed=0)
    pyramid = build_pyramid(quantize(cloud, 32), 4)
    assert [level.resolution for level in pyramid.levels] == [32, 16, 8, 4]
    for finer, coarser in zip(pyramid.levels, pyramid.levels[1:]):
        assert np.all(coarser.lookup(finer.keys // 2) >= 0)
    print("✓ Pyramid", [len(level) for level in pyramid.levels])

    parents = pyramid[3]
    children = child_keys(parents.keys)
    assert len(children) == 8 * len(parents)
    assert len(np.unique(children, axis=0)) == len(children)
    assert np.array_equal(np.unique(children // 2, axis=0), parents.keys)
    print("✓", len(children), "distinct children")

    seen = np.zeros(len(children), dtype=int)
    for slot, out_rows, in_rows in upsample_rulebook(parents, children):
        assert np.array_equal(children[out_rows] % 2, np.tile(CHILD_OFFSETS[slot], (len(out_rows), 1)))
        assert np.array_equal(parents.keys[in_rows], children[out_rows] // 2)
        seen[out_rows] += 1
    assert np.all(seen == 1)
    print("✓ Upsample rulebook covers every child once")

    print("\n✅ Pyramid and Children Test: PASSED")


def test_shell_occupancy_nesting():
    """
    TEST 4: Thin-shell occupancy

    What this tests:
    - Parents of the shell cells at R are shell cells at R/2
    - No cell far from the sphere is marked
    """
    print("\n" + "=" * 70)
    print("TEST 4: Shell occupancy")
    print("=" * 70)

    values = sphere_values(32)
    epsilon = 0.03
    levels = {r: shell_occupancy(values, epsilon, r) for r in (4, 8, 16, 32)}
    for r in (8, 16, 32):
        coarse = SparseVoxelGrid(r // 2, levels[r // 2], np.zeros((len(levels[r // 2]), 0)))
        assert len(levels[r]) > 0
        assert np.all(coarse.lookup(levels[r] // 2) >= 0)
        print(f"✓ {r}^3: {len(levels[r])} shell cells, parents all occupied")

    fine = levels[32]
    centres = -0.5 + (fine + 0.5) / 32
    reach = np.sqrt(3.0) / 64 + epsilon
    assert np.all(np.abs(np.linalg.norm(centres, axis=1) - SPHERE_RADIUS) <= reach + 1e-12)
    print("✓ Every marked cell lies within the shell band")

    print("\n✅ Shell Occupancy Test: PASSED")


# ============================================================================
# FILE FORMAT TESTS
# ============================================================================

def test_grid_file_format():
    """
    TEST 5: SVXG files

    What this tests:
    - Keys survive exactly, features within float32 precision
    - Truncated bodies raise TruncatedFileError
    - A wrong magic raises FormatVersionError
    """
    print("\n" + "=" * 70)
    print("TEST 5: SVXG format")
    print("=" * 70)

    grid = quantize(sample_surface(icosphere(SPHERE_RADIUS, 2), 800, seed=1), 16)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "grid.svxg"
        save_grid(grid, path)
        loaded = load_grid(path)
        assert loaded.resolution == 16
        assert np.array_equal(loaded.keys, grid.keys)
        assert np.allclose(loaded.features, grid.features, atol=1e-6)
        print("✓", len(loaded), "voxels read back")

        short = Path(tmp) / "short.svxg"
        short.write_bytes(grid_bytes(grid)[:-5])
        try:
            load_grid(short)
            raise AssertionError("truncated file should not load")
        except TruncatedFileError:
            print("✓ Truncated body rejected")

        wrong = Path(tmp) / "wrong.svxg"
        wrong.write_bytes(b"XXXX" + grid_bytes(grid)[4:])
        try:
            load_grid(wrong)
            raise AssertionError("wrong magic should not load")
        except FormatVersionError:
            print("✓ Wrong magic rejected")

    print("\n✅ Grid File Format Test: PASSED")


# ============================================================================
# MAIN TEST RUNNER
# ============================================================================

def run_all_tests():
    """
    Main test orchestration function
    Runs all tests and provides a summary report
    """
    print("\n" + "█" * 70)
    print("SPARSE GRID TEST SUITE")
    print("█" * 70)

    tests = [
        test_quantize,
        test_lookup_and_trilinear,
        test_pyramid_and_children,
        test_shell_occupancy_nesting,
        test_grid_file_format,
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
