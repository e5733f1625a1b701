"""Triangle meshes, the reference icosphere, sphere charts and mesh operators."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .. import autodiff as ad


class MeshError(ValueError):
    """Invalid mesh input (open surface, degenerate face, wrong genus, ...)."""


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    keypoints: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise MeshError(f"face index out of range for {len(v)} vertices")
            bad = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if bad.any():
                raise MeshError(f"degenerate face (repeated index) at {int(np.flatnonzero(bad)[0])}")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(vertices, self.faces, self.keypoints)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges (E, 2), sorted lexicographically."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def edge_face_counts(self) -> tuple[np.ndarray, np.ndarray]:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def unpaired_edges(self) -> np.ndarray:
        edges, counts = self.edge_face_counts()
        return edges[counts != 2]

    def is_closed(self) -> bool:
        return self.n_faces > 0 and len(self.unpaired_edges()) == 0

    def require_closed(self) -> None:
        if self.n_faces == 0:
            raise MeshError("empty mesh")
        bad = self.unpaired_edges()
        if len(bad):
            a, b = bad[0]
            raise MeshError(f"mesh is not closed: edge ({a}, {b}) is not shared by exactly two faces ({len(bad)} such edges)")

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        return int(len(used) - len(self.edges) + self.n_faces)

    def n_components(self) -> int:
        if self.n_faces == 0:
            return 0
        used = np.unique(self.faces)
        adj = self.adjacency()
        _, labels = connected_components(adj, directed=False)
        return len(np.unique(labels[used]))

    def is_genus0(self) -> bool:
        return self.is_closed() and self.n_components() == 1 and self.euler_characteristic() == 2

    def adjacency(self) -> sp.csr_matrix:
        n = self.n_vertices
        e = self.edges
        data = np.ones(2 * len(e))
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    def signed_volume(self) -> float:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def oriented_outward(self) -> "Mesh":
        if self.signed_volume() < 0:
            return Mesh(self.vertices, self.faces[:, ::-1].copy(), self.keypoints)
        return self

    def compact(self) -> "Mesh":
        """Drop vertices not referenced by any face."""
        used = np.unique(self.faces)
        remap = -np.ones(self.n_vertices, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return Mesh(self.vertices[used], remap[self.faces])


@dataclass(frozen=True)
class SphereChart:
    directions: np.ndarray
    uvs: np.ndarray = field(default=None)

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "uvs", sphere_to_uv(d))

    def __len__(self) -> int:
        return len(self.directions)


# ------------------------------------------------------------------ chart map
def sphere_to_uv(p: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Map unit vectors to (u, v) in [0, 1]^2.

    u = atan2(z, x) / 2pi + 0.5 wrapped to [0, 1), v = 0.5 + asin(y) / pi;
    u is 0.5 at the poles.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    p = p.reshape(-1, 3)
    norms = np.linalg.norm(p, axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        worst = int(np.argmax(np.abs(norms - 1.0)))
        raise MeshError(f"sphere_to_uv needs unit vectors; row {worst} has norm {norms[worst]!r}")
    y = np.clip(p[:, 1], -1.0, 1.0)
    u = np.arctan2(p[:, 2], p[:, 0]) / (2 * np.pi) + 0.5
    u = np.where(u >= 1.0, u - 1.0, u)
    pole = np.abs(y) >= 1.0
    u = np.where(pole, 0.5, u)
    v = 0.5 + np.arcsin(y) / np.pi
    uv = np.stack([u, v], axis=1)
    return uv[0] if single else uv


def face_uvs(chart: SphereChart, faces: np.ndarray) -> np.ndarray:
    """Per-face corner UVs (F, 3, 2) with u unwrapped across the seam.

    Corners whose u trails the face maximum by more than 0.5 are shifted by +1;
    pole corners (whose u is arbitrary) take the mean u of the other corners.
    """
    uv = chart.uvs[faces].copy()
    u = uv[..., 0]
    umax = u.max(axis=1, keepdims=True)
    u = np.where(umax - u > 0.5, u + 1.0, u)
    pole = np.abs(chart.directions[faces][..., 1]) >= 1.0 - 1e-12
    if pole.any():
        rows = np.flatnonzero(pole.any(axis=1))
        for r in rows:
            keep = ~pole[r]
            if keep.any():
                u[r, pole[r]] = u[r, keep].mean()
    uv[..., 0] = u
    return uv


# ------------------------------------------------------------------ icosphere
def icosphere(level: int = 3) -> Mesh:
    """Unit icosphere, symmetric under each coordinate reflection, CCW outward."""
    t = (1.0 + 5**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = np.array(verts, dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(faces, dtype=np.int64)
    for _ in range(level):
        v, f = _subdivide(v, f)
    mesh = Mesh(v, f)
    return mesh.oriented_outward()


def _subdivide(v: np.ndarray, f: np.ndarray):
    cache: dict[tuple[int, int], int] = {}
    verts = list(v)

    def midpoint(a, b):
        key = (a, b) if a < b else (b, a)
        idx = cache.get(key)
        if idx is None:
            m = verts[a] + verts[b]
            verts.append(m / np.linalg.norm(m))
            idx = len(verts) - 1
            cache[key] = idx
        return idx

    out = []
    for a, b, c in f:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
    return np.array(verts), np.array(out, dtype=np.int64)


def mirror_permutation(vertices: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Index of each vertex's image under (x, y, z) -> (x, y, -z)."""
    from scipy.spatial import cKDTree

    mirrored = vertices * np.array([1.0, 1.0, -1.0])
    dist, idx = cKDTree(vertices).query(mirrored)
    if np.max(dist) > tol:
        raise MeshError("vertex set is not mirror-symmetric about z = 0")
    return idx


def unit_cube(center: bool = False) -> Mesh:
    """Closed axis-aligned cube [0, 1]^3 (or centred on the origin), 12 triangles."""
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=np.float64)
    if center:
        v -= 0.5
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    f = []
    for a, b, c, d in quads:
        f += [(a, b, c), (a, c, d)]
    return Mesh(v, f).oriented_outward()


def torus(major: float = 1.0, minor: float = 0.35, nu: int = 16, nv: int = 8) -> Mesh:
    verts, faces = [], []
    for i in range(nu):
        a = 2 * np.pi * i / nu
        for j in range(nv):
            b = 2 * np.pi * j / nv
            r = major + minor * np.cos(b)
            verts.append((r * np.cos(a), minor * np.sin(b), r * np.sin(a)))
    for i in range(nu):
        for j in range(nv):
            p = i * nv + j
            q = ((i + 1) % nu) * nv + j
            pn = i * nv + (j + 1) % nv
            qn = ((i + 1) % nu) * nv + (j + 1) % nv
            faces += [(p, q, qn), (p, qn, pn)]
    return Mesh(np.array(verts), np.array(faces))


# ------------------------------------------------------------ mesh operators
def laplacian_matrix(faces: np.ndarray, n_vertices: int) -> sp.csr_matrix:
    """Uniform Laplacian L with (L x)_v = mean of neighbours - x_v."""
    mesh = Mesh(np.zeros((n_vertices, 3)), faces)
    adj = mesh.adjacency()
    deg = np.asarray(adj.sum(axis=1)).ravel()
    if np.any(deg == 0):
        raise MeshError(f"isolated vertex {int(np.flatnonzero(deg == 0)[0])} has no neighbours")
    return (sp.diags(1.0 / deg) @ adj - sp.identity(n_vertices)).tocsr()


def uniform_laplacian(mesh: Mesh) -> np.ndarray:
    return laplacian_matrix(mesh.faces, mesh.n_vertices) @ mesh.vertices


def face_normals(mesh: Mesh) -> np.ndarray:
    a, b, c = (mesh.vertices[mesh.faces[:, i]] for i in range(3))
    n = np.cross(b - a, c - a)
    length = np.linalg.norm(n, axis=1)
    if np.any(length <= 1e-300):
        raise MeshError(f"zero-area face {int(np.flatnonzero(length <= 1e-300)[0])}")
    return n / length[:, None]


def interior_edge_faces(faces: np.ndarray) -> np.ndarray:
    """(E, 2) pairs of face indices sharing each edge; errors on boundary edges."""
    f = np.asarray(faces)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    owner = np.tile(np.arange(len(f)), 3)
    e = np.sort(e, axis=1)
    order = np.lexsort((e[:, 1], e[:, 0]))
    e, owner = e[order], owner[order]
    _, start, counts = np.unique(e, axis=0, return_index=True, return_counts=True)
    if np.any(counts != 2):
        raise MeshError("boundary or non-manifold edge: smoothness needs a closed mesh")
    return np.stack([owner[start], owner[start + 1]], axis=1)


def tensor_face_normals(vertices: ad.Tensor, faces: np.ndarray) -> ad.Tensor:
    """Differentiable unit face normals; vertices (V, 3) or (N, V, 3)."""
    axis = vertices.ndim - 2
    take = (lambda idx: ad.take(vertices, idx)) if axis == 0 else (lambda idx: vertices[:, idx])
    a, b, c = take(faces[:, 0]), take(faces[:, 1]), take(faces[:, 2])
    e1, e2 = b - a, c - a
    n = cross(e1, e2)
    length = ad.norm(n, axis=-1)
    return n / ad.reshape(length, length.shape + (1,))


def cross(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return ad.stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)
