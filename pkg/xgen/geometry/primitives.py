"""
Analytic fixture shapes.

All generators return outward-oriented meshes (counter-clockwise faces seen
from outside) and, where the surface has a closed form, exact vertex normals.
"""

from typing import Dict, Tuple

import numpy as np

from xgen.geometry.mesh import QuadMesh, TriangleMesh


def _quads_to_triangles(quads: np.ndarray) -> np.ndarray:
    return np.concatenate([quads[:, [0, 1, 2]], quads[:, [0, 2, 3]]])


def icosphere(radius: float = 0.4, subdivisions: int = 3, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Subdivided icosahedron projected to a sphere. 10*4^s + 2 vertices."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    vertices = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    vertices = [np.asarray(v, dtype=np.float64) / np.linalg.norm(v) for v in vertices]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]

    for _ in range(subdivisions):
        midpoints: Dict[Tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in midpoints:
                m = vertices[a] + vertices[b]
                vertices.append(m / np.linalg.norm(m))
                midpoints[key] = len(vertices) - 1
            return midpoints[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = refined

    unit = np.asarray(vertices)
    faces = np.asarray(faces, dtype=np.int64)
    tri = unit[faces]
    outward = np.einsum("ij,ij->i", np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), tri.mean(axis=1)) > 0
    faces[~outward] = faces[~outward][:, ::-1]
    return TriangleMesh(unit * radius + np.asarray(center), faces, unit)


def cylinder(radius: float = 0.3, height: float = 0.8, segments: int = 96, rings: int = 48) -> TriangleMesh:
    """Open tube around the z axis with exact radial normals"""
    u = np.arange(segments) * 2.0 * np.pi / segments
    z = np.linspace(-height / 2.0, height / 2.0, rings + 1)
    uu, zz = np.meshgrid(u, z, indexing="ij")
    radial = np.stack([np.cos(uu), np.sin(uu), np.zeros_like(uu)], axis=-1).reshape(-1, 3)
    vertices = radial * radius + np.stack([np.zeros_like(zz), np.zeros_like(zz), zz], axis=-1).reshape(-1, 3)

    def index(i, j):
        return (i % segments) * (rings + 1) + j

    i, j = np.meshgrid(np.arange(segments), np.arange(rings), indexing="ij")
    quads = np.stack([index(i, j), index(i + 1, j), index(i + 1, j + 1), index(i, j + 1)], axis=-1).reshape(-1, 4)
    return TriangleMesh(vertices, _quads_to_triangles(quads), radial)


def capped_cylinder(radius: float = 0.3, height: float = 0.8, segments: int = 64, rings: int = 16) -> TriangleMesh:
    """Watertight cylinder: the tube plus two fan caps"""
    tube = cylinder(radius, height, segments, rings)
    n = len(tube.vertices)
    bottom, top = n, n + 1
    vertices = np.vstack([tube.vertices, [[0.0, 0.0, -height / 2.0], [0.0, 0.0, height / 2.0]]])
    ring_bottom = np.arange(segments) * (rings + 1)
    ring_top = ring_bottom + rings
    following = np.roll(np.arange(segments), -1)
    caps_bottom = np.stack([np.full(segments, bottom), ring_bottom[following], ring_bottom], axis=1)
    caps_top = np.stack([np.full(segments, top), ring_top, ring_top[following]], axis=1)
    return TriangleMesh(vertices, np.vstack([tube.faces, caps_bottom, caps_top]))


def torus_quads(major: float = 0.3, minor: float = 0.1, segments: int = 48, tube_segments: int = 24) -> QuadMesh:
    u = np.arange(segments) * 2.0 * np.pi / segments
    v = np.arange(tube_segments) * 2.0 * np.pi / tube_segments
    uu, vv = np.meshgrid(u, v, indexing="ij")
    ring = major + minor * np.cos(vv)
    vertices = np.stack([ring * np.cos(uu), ring * np.sin(uu), minor * np.sin(vv)], axis=-1).reshape(-1, 3)

    def index(i, j):
        return (i % segments) * tube_segments + (j % tube_segments)

    i, j = np.meshgrid(np.arange(segments), np.arange(tube_segments), indexing="ij")
    quads = np.stack([index(i, j), index(i + 1, j), index(i + 1, j + 1), index(i, j + 1)], axis=-1).reshape(-1, 4)
    return QuadMesh(vertices, quads)


def torus(major: float = 0.3, minor: float = 0.1, segments: int = 48, tube_segments: int = 24) -> TriangleMesh:
    quads = torus_quads(major, minor, segments, tube_segments)
    u = np.arange(segments) * 2.0 * np.pi / segments
    v = np.arange(tube_segments) * 2.0 * np.pi / tube_segments
    uu, vv = np.meshgrid(u, v, indexing="ij")
    normals = np.stack([np.cos(vv) * np.cos(uu), np.cos(vv) * np.sin(uu), np.sin(vv)], axis=-1).reshape(-1, 3)
    return TriangleMesh(quads.vertices, _quads_to_triangles(quads.faces), normals)


def grid_quads(cells: int = 8, size: float = 0.8, z: float = 0.0) -> QuadMesh:
    """Planar square grid on z = const with normal +z"""
    coords = np.linspace(-size / 2.0, size / 2.0, cells + 1)
    xx, yy = np.meshgrid(coords, coords, indexing="ij")
    vertices = np.stack([xx, yy, np.full_like(xx, z)], axis=-1).reshape(-1, 3)

    def index(i, j):
        return i * (cells + 1) + j

    i, j = np.meshgrid(np.arange(cells), np.arange(cells), indexing="ij")
    quads = np.stack([index(i, j), index(i + 1, j), index(i + 1, j + 1), index(i, j + 1)], axis=-1).reshape(-1, 4)
    return QuadMesh(vertices, quads)


def grid_mesh(cells: int = 8, size: float = 0.8, z: float = 0.0) -> TriangleMesh:
    quads = grid_quads(cells, size, z)
    normals = np.tile([0.0, 0.0, 1.0], (len(quads.vertices), 1))
    return TriangleMesh(quads.vertices, _quads_to_triangles(quads.faces), normals)


def cube_quads(cells: int = 4, size: float = 0.8) -> QuadMesh:
    """
    Closed quad cube with `cells` quads per edge on each side.
    The 8 corners have valence 3, everything else valence 4.
    """
    half = size / 2.0
    coords = np.linspace(-half, half, cells + 1)
    aa, bb = np.meshgrid(coords, coords, indexing="ij")
    points = []
    quads = []
    i, j = np.meshgrid(np.arange(cells), np.arange(cells), indexing="ij")
    local = np.stack([i * (cells + 1) + j, (i + 1) * (cells + 1) + j,
                      (i + 1) * (cells + 1) + j + 1, i * (cells + 1) + j + 1], axis=-1).reshape(-1, 4)
    for axis in range(3):
        for sign in (-1.0, 1.0):
            # (u, v, axis) right-handed, swapped on the negative side so u x v points outward
            u_axis, v_axis = (axis + 1) % 3, (axis + 2) % 3
            if sign < 0:
                u_axis, v_axis = v_axis, u_axis
            side = np.zeros((aa.size, 3))
            side[:, u_axis] = aa.reshape(-1)
            side[:, v_axis] = bb.reshape(-1)
            side[:, axis] = sign * half
            quads.append(local + len(points) * (cells + 1) ** 2)
            points.append(side)
    stacked = np.vstack(points)
    _, first, inverse = np.unique(np.round(stacked, 9), axis=0, return_index=True, return_inverse=True)
    return QuadMesh(stacked[first], inverse.reshape(-1)[np.vstack(quads)])


def cube(cells: int = 4, size: float = 0.8) -> TriangleMesh:
    quads = cube_quads(cells, size)
    return TriangleMesh(quads.vertices, _quads_to_triangles(quads.faces))
