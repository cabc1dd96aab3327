"""Triangle meshes and the primitive shapes used across the pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (N, 3) float64
    faces: np.ndarray     # (M, 3) int32, CCW seen from outside

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int32).reshape(-1, 3)
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise ValueError("face index out of range")

    def copy(self):
        return TriangleMesh(self.vertices.copy(), self.faces.copy())

    def transformed(self, rotation=None, translation=None, scale=None):
        v = self.vertices
        if scale is not None:
            v = v * np.asarray(scale, dtype=np.float64)
        if rotation is not None:
            v = v @ np.asarray(rotation, dtype=np.float64).T
        if translation is not None:
            v = v + np.asarray(translation, dtype=np.float64)
        return TriangleMesh(v, self.faces)


def icosphere(subdivisions=2):
    """Unit icosphere; subdivision levels 0/1/2 give 12/42/162 vertices."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)

    for _ in range(subdivisions):
        verts_list = list(verts)
        midpoint_cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoint_cache:
                m = verts_list[i] + verts_list[j]
                m /= np.linalg.norm(m)
                midpoint_cache[key] = len(verts_list)
                verts_list.append(m)
            return midpoint_cache[key]

        new_faces = []
        for a, b, c in faces:
            ab = midpoint(a, b)
            bc = midpoint(b, c)
            ca = midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=np.int64)

    return TriangleMesh(verts, faces)


def cube_mesh(half_extents=(0.5, 0.5, 0.5), tetra_diagonals=True):
    """Axis-aligned box centered at the origin, 8 vertices, 12 triangles.

    With ``tetra_diagonals`` the face diagonals follow a tetrahedral pattern,
    which keeps the triangulation symmetric enough that mean value
    coordinates at the centroid are identical for all eight corners.
    """
    h = np.asarray(half_extents, dtype=np.float64)
    corners = np.array([
        [-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
        [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1],
    ], dtype=np.float64) * h
    if tetra_diagonals:
        # every face diagonal joins corners of the tetrahedron {0, 2, 5, 7}
        faces = np.array([
            [0, 2, 1], [0, 3, 2],   # z = -1, diagonal 0-2
            [5, 6, 7], [5, 7, 4],   # z = +1, diagonal 5-7
            [0, 1, 5], [0, 5, 4],   # y = -1, diagonal 0-5
            [2, 3, 7], [2, 7, 6],   # y = +1, diagonal 2-7
            [1, 2, 5], [2, 6, 5],   # x = +1, diagonal 2-5
            [0, 7, 3], [0, 4, 7],   # x = -1, diagonal 0-7
        ], dtype=np.int64)
    else:
        faces = np.array([
            [0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7],
            [0, 1, 5], [0, 5, 4], [3, 7, 6], [3, 6, 2],
            [1, 2, 6], [1, 6, 5], [0, 4, 7], [0, 7, 3],
        ], dtype=np.int64)
    return TriangleMesh(corners, faces)


def cylinder_mesh(radius=0.5, height=1.0, segments=32):
    """Closed cylinder along y, centered at the origin."""
    angles = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    x = radius * np.cos(angles)
    z = radius * np.sin(angles)
    top = np.stack([x, np.full(segments, height / 2.0), z], axis=-1)
    bottom = np.stack([x, np.full(segments, -height / 2.0), z], axis=-1)
    verts = [np.array([0.0, height / 2.0, 0.0]), np.array([0.0, -height / 2.0, 0.0])]
    verts += list(top) + list(bottom)
    verts = np.array(verts)
    top_idx = 2 + np.arange(segments)
    bot_idx = 2 + segments + np.arange(segments)

    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        # y-up is -y in camera coordinates; orientation fixed below by volume.
        faces.append([0, top_idx[j], top_idx[i]])                # top cap
        faces.append([1, bot_idx[i], bot_idx[j]])                # bottom cap
        faces.append([top_idx[i], top_idx[j], bot_idx[j]])       # side
        faces.append([top_idx[i], bot_idx[j], bot_idx[i]])
    mesh = TriangleMesh(verts, np.array(faces, dtype=np.int64))
    if signed_volume(mesh) < 0:
        mesh.faces = mesh.faces[:, ::-1].copy()
    return mesh


def signed_volume(mesh: TriangleMesh):
    """Divergence-theorem volume: sum of det(v0, v1, v2)/6 over faces."""
    v = mesh.vertices
    f = mesh.faces
    v0, v1, v2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    return float(np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum() / 6.0)


def boundary_edge_count(mesh: TriangleMesh):
    """Number of edges not shared by exactly two faces (0 for closed meshes)."""
    edges = np.concatenate([
        mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]],
    ])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return int(np.sum(counts != 2))


def vertex_adjacency(mesh: TriangleMesh):
    """List of sorted neighbor-index arrays per vertex."""
    neighbors = [set() for _ in range(len(mesh.vertices))]
    for a, b, c in mesh.faces:
        neighbors[a].update((b, c))
        neighbors[b].update((a, c))
        neighbors[c].update((a, b))
    return [np.array(sorted(n), dtype=np.int64) for n in neighbors]


def neighbor_average_matrix(mesh: TriangleMesh):
    """Row-stochastic matrix averaging each vertex's graph neighbors."""
    from .errors import IsolatedVertex

    n = len(mesh.vertices)
    A = np.zeros((n, n))
    for i, nbrs in enumerate(vertex_adjacency(mesh)):
        if len(nbrs) == 0:
            raise IsolatedVertex(f"vertex {i} has no neighbors")
        A[i, nbrs] = 1.0 / len(nbrs)
    return A


def sample_surface(mesh: TriangleMesh, n, seed=0):
    """Deterministic area-weighted surface samples, shape (n, 3)."""
    rng = np.random.default_rng(seed)
    v = mesh.vertices
    f = mesh.faces
    v0, v1, v2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    probs = areas / areas.sum()
    tri = rng.choice(len(f), size=n, p=probs)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a = 1.0 - r1
    b = r1 * (1.0 - r2)
    c = r1 * r2
    return (a[:, None] * v0[tri] + b[:, None] * v1[tri] + c[:, None] * v2[tri])


def bounding_sphere(points):
    """(center, radius) of a fast covering sphere (centroid-based)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    center = pts.mean(axis=0)
    radius = float(np.sqrt(((pts - center) ** 2).sum(axis=1).max()))
    return center, radius
