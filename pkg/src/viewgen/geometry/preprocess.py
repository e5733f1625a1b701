"""Template preprocessing: voxelize, re-mesh, parameterize on the sphere, resample."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

from .mesh import Mesh, MeshError, SphereChart, laplacian_matrix


class PreprocessError(RuntimeError):
    """A preprocessing stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class OccupancyGrid:
    cells: np.ndarray  # bool (r, r, r) indexed [ix, iy, iz]
    lo: np.ndarray
    hi: np.ndarray

    @property
    def resolution(self) -> int:
        return self.cells.shape[0]

    @property
    def cell_size(self) -> np.ndarray:
        return (self.hi - self.lo) / self.resolution

    def centers(self, axis: int) -> np.ndarray:
        r = self.resolution
        return self.lo[axis] + (np.arange(r) + 0.5) * self.cell_size[axis]


# ------------------------------------------------------------------ voxelize
@numba.njit(cache=True)
def _parity_fill(tri, ys, zs, xs, cells):
    r = len(xs)
    for t in range(tri.shape[0]):
        ax, ay, az = tri[t, 0, 0], tri[t, 0, 1], tri[t, 0, 2]
        bx, by, bz = tri[t, 1, 0], tri[t, 1, 1], tri[t, 1, 2]
        cx, cy, cz = tri[t, 2, 0], tri[t, 2, 1], tri[t, 2, 2]
        det = (by - ay) * (cz - az) - (cy - ay) * (bz - az)
        if det == 0.0:
            continue
        ymin, ymax = min(ay, by, cy), max(ay, by, cy)
        zmin, zmax = min(az, bz, cz), max(az, bz, cz)
        for j in range(r):
            py = ys[j]
            if py < ymin or py > ymax:
                continue
            for k in range(r):
                pz = zs[k]
                if pz < zmin or pz > zmax:
                    continue
                # barycentric coordinates of (py, pz) in the yz-projection
                w1 = ((py - ay) * (cz - az) - (cy - ay) * (pz - az)) / det
                w2 = ((by - ay) * (pz - az) - (py - ay) * (bz - az)) / det
                w0 = 1.0 - w1 - w2
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                xhit = w0 * ax + w1 * bx + w2 * cx
                for i in range(r):
                    if xs[i] < xhit:
                        cells[i, j, k] = not cells[i, j, k]


def voxelize(mesh: Mesh, r: int, lo: np.ndarray | None = None, hi: np.ndarray | None = None) -> OccupancyGrid:
    """Cells whose centres lie inside the closed surface (even-odd ray parity along +x)."""
    if mesh.n_faces == 0:
        raise MeshError("cannot voxelize an empty mesh")
    if r < 4:
        raise ValueError(f"voxel resolution must be >= 4, got {r}")
    mesh.require_closed()
    lo = mesh.vertices.min(axis=0) if lo is None else np.asarray(lo, dtype=np.float64)
    hi = mesh.vertices.max(axis=0) if hi is None else np.asarray(hi, dtype=np.float64)
    grid = OccupancyGrid(np.zeros((r, r, r), dtype=np.bool_), lo, hi)
    extent = hi - lo
    # irrational sub-cell jitter keeps rays off triangle edges and vertices
    ys = grid.centers(1) + extent[1] * 1e-7 * np.pi
    zs = grid.centers(2) + extent[2] * 1e-7 * np.e
    tri = mesh.vertices[mesh.faces]
    cells = grid.cells.copy()
    _parity_fill(tri, ys, zs, grid.centers(0), cells)
    return OccupancyGrid(cells, lo, hi)


def point_in_mesh(mesh: Mesh, points: np.ndarray, direction=(0.5773, 0.5774, 0.5772)) -> np.ndarray:
    """Ray-parity inside test for arbitrary points (slow reference; Moller-Trumbore)."""
    d = np.asarray(direction, dtype=np.float64)
    d /= np.linalg.norm(d)
    a, b, c = (mesh.vertices[mesh.faces[:, i]] for i in range(3))
    e1, e2 = b - a, c - a
    pvec = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    inside = np.zeros(len(points), dtype=bool)
    for n, p in enumerate(np.asarray(points, dtype=np.float64)):
        tvec = p - a
        u = np.einsum("ij,ij->i", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        v = (qvec @ d) * inv
        t = np.einsum("ij,ij->i", e2, qvec) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        inside[n] = bool(hit.sum() % 2)
    return inside


# ------------------------------------------------------------ marching cubes
def marching_cubes(grid: OccupancyGrid, iso: float = 0.5) -> Mesh:
    """Closed, outward-oriented iso-surface of the occupancy field.

    The grid is zero-padded by one cell so the surface always closes.
    """
    from skimage import measure

    if not 0.0 < iso < 1.0:
        raise ValueError(f"iso must be in (0, 1), got {iso}")
    occ = grid.cells
    if not occ.any() or occ.all():
        raise MeshError("occupancy grid has no inside/outside crossing")
    vol = np.pad(occ.astype(np.float64), 1)
    verts, faces, _, _ = measure.marching_cubes(vol, level=iso, allow_degenerate=False)
    cell = grid.cell_size
    verts = grid.lo + (verts - 0.5) * cell
    mesh = Mesh(verts, faces).compact()
    return mesh.oriented_outward()


# -------------------------------------------------- spherical parameterization
def signed_spherical_areas(directions: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """det(a, b, c) per face; positive for counter-clockwise-outward triangles."""
    a, b, c = (directions[faces[:, i]] for i in range(3))
    return np.einsum("ij,ij->i", a, np.cross(b, c))


def spherical_parameterize(mesh: Mesh, max_iters: int = 500, step: float = 0.5) -> SphereChart:
    """Embed a genus-0 mesh on the unit sphere by relaxed Gauss-map projection.

    Vertices are centred and projected to the sphere; while any spherical
    triangle is inverted, positions are pulled toward their neighbour mean,
    re-centred and renormalized.
    """
    if not mesh.is_closed():
        raise MeshError("spherical parameterization needs a closed mesh")
    if mesh.n_components() != 1 or mesh.euler_characteristic() != 2:
        raise MeshError(f"mesh is not genus 0 (Euler characteristic {mesh.euler_characteristic()}, {mesh.n_components()} components)")
    mesh = mesh.oriented_outward()
    p = mesh.vertices - mesh.vertices.mean(axis=0)
    p = _normalize_rows(p)
    lap = laplacian_matrix(mesh.faces, mesh.n_vertices)
    for _ in range(max_iters):
        inverted = int(np.sum(signed_spherical_areas(p, mesh.faces) <= 0))
        if inverted == 0:
            return SphereChart(p)
        p = p + step * (lap @ p)
        p = _normalize_rows(p - p.mean(axis=0))
    inverted = int(np.sum(signed_spherical_areas(p, mesh.faces) <= 0))
    if inverted:
        raise MeshError(f"spherical parameterization left {inverted} inverted triangles after {max_iters} iterations")
    return SphereChart(p)


def _normalize_rows(p: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(p, axis=1, keepdims=True)
    if np.any(n == 0):
        raise MeshError("vertex collapsed onto the centre during parameterization")
    return p / n


# ----------------------------------------------------------------- resampling
def locate_on_chart(chart: SphereChart, faces: np.ndarray, queries: np.ndarray, tol: float = 1e-9, chunk: int = 256):
    """Containing spherical triangle and normalized barycentrics for each query direction."""
    corners = chart.directions[faces].transpose(0, 2, 1)  # (F, 3 xyz, 3 corners)
    det = np.linalg.det(corners)
    good = np.abs(det) > 1e-15
    inv = np.zeros_like(corners)
    inv[good] = np.linalg.inv(corners[good])
    face_idx = np.empty(len(queries), dtype=np.int64)
    bary = np.empty((len(queries), 3))
    for start in range(0, len(queries), chunk):
        q = queries[start : start + chunk]
        coef = np.einsum("fij,qj->qfi", inv, q)  # (Q, F, 3)
        worst = coef.min(axis=2)
        worst[:, ~good] = -np.inf
        best = np.argmax(worst, axis=1)
        rows = np.arange(len(q))
        if np.any(worst[rows, best] < -tol):
            miss = int(np.flatnonzero(worst[rows, best] < -tol)[0]) + start
            raise MeshError(f"direction {miss} is not covered by the chart (inverted or missing triangles)")
        c = coef[rows, best]
        face_idx[start : start + len(q)] = best
        bary[start : start + len(q)] = c / c.sum(axis=1, keepdims=True)
    return face_idx, bary


def resample_on_common_topology(template: Mesh, chart: SphereChart, reference: Mesh) -> np.ndarray:
    """Template surface evaluated at each reference vertex direction (V_ref, 3)."""
    dirs = reference.vertices / np.linalg.norm(reference.vertices, axis=1, keepdims=True)
    face_idx, bary = locate_on_chart(chart, template.faces, dirs)
    corners = template.vertices[template.faces[face_idx]]  # (V, 3, 3)
    return np.einsum("vc,vcj->vj", bary, corners)


# --------------------------------------------------------------- full pipeline
def clean_occupancy(grid: OccupancyGrid) -> OccupancyGrid:
    """Fill enclosed cavities and keep the largest connected solid."""
    cells = ndimage.binary_fill_holes(grid.cells)
    labels, count = ndimage.label(cells)
    if count > 1:
        sizes = ndimage.sum(cells, labels, index=np.arange(1, count + 1))
        cells = labels == (1 + int(np.argmax(sizes)))
    return OccupancyGrid(cells, grid.lo, grid.hi)


def preprocess_template(raw: Mesh, r: int, reference: Mesh, max_iters: int = 500) -> np.ndarray:
    """Raw mesh -> vertices on the reference topology; errors name the failing stage."""
    if raw.n_faces == 0:
        raise PreprocessError("input", "empty mesh")
    # pad the box by one cell so surface cells are not clipped
    lo, hi = raw.vertices.min(axis=0), raw.vertices.max(axis=0)
    margin = (hi - lo) / r
    try:
        grid = voxelize(raw, r, lo - margin, hi + margin)
    except (MeshError, ValueError) as exc:
        raise PreprocessError("voxelize", str(exc)) from exc
    grid = clean_occupancy(grid)
    try:
        surface = marching_cubes(grid, 0.5)
    except (MeshError, ValueError, RuntimeError) as exc:
        raise PreprocessError("marching_cubes", str(exc)) from exc
    try:
        chart = spherical_parameterize(surface, max_iters)
    except MeshError as exc:
        raise PreprocessError("spherical_parameterize", str(exc)) from exc
    try:
        return resample_on_common_topology(surface, chart, reference)
    except MeshError as exc:
        raise PreprocessError("resample", str(exc)) from exc
