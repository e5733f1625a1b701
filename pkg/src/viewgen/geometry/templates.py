"""Template banks, UV deformation maps and reflection symmetry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from .mesh import Mesh, SphereChart, icosphere, mirror_permutation

ALLOWED_DOD = (1, 4, 16, 64, 256, 1024)


@dataclass
class TemplateBank:
    """n templates on one shared topology and chart, with positive scales."""

    faces: np.ndarray
    chart: SphereChart
    vertices: np.ndarray  # (n, V, 3)
    scales: np.ndarray  # (n,)
    names: tuple[str, ...] = ()

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim == 2:
            self.vertices = self.vertices[None]
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(-1)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if len(self.scales) != len(self.vertices):
            raise ValueError(f"{len(self.scales)} scales for {len(self.vertices)} templates")
        if np.any(self.scales <= 0):
            raise ValueError("template scales must be positive")
        if self.vertices.shape[1] != len(self.chart):
            raise ValueError("template vertex count does not match the chart")
        if not self.names:
            self.names = tuple(f"template{i}" for i in range(len(self.vertices)))

    @property
    def n(self) -> int:
        return len(self.vertices)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[1]

    def mesh(self, i: int = 0) -> Mesh:
        return Mesh(self.vertices[i], self.faces)

    def bounding_radius(self) -> float:
        return float(np.max(np.linalg.norm(self.vertices * self.scales[:, None, None], axis=2)))

    @classmethod
    def from_reference(cls, reference: Mesh, templates: list[np.ndarray], scales=None, names=(), symmetrize: bool = True) -> "TemplateBank":
        chart = SphereChart(reference.vertices / np.linalg.norm(reference.vertices, axis=1, keepdims=True))
        verts = np.stack(templates)
        if symmetrize:
            perm = mirror_permutation(chart.directions)
            verts = np.stack([symmetrize_vertices(v, perm) for v in verts])
        scales = np.ones(len(verts)) if scales is None else scales
        return cls(reference.faces, chart, verts, scales, tuple(names))

    @classmethod
    def sphere(cls, level: int = 3) -> "TemplateBank":
        ref = icosphere(level)
        return cls.from_reference(ref, [ref.vertices], names=("sphere",))


def blend_templates(bank: TemplateBank, weights, scales=None):
    """sum_i s_i * w_i * V_i.

    ``weights`` may be a NumPy vector (n,) or a Tensor of shape (N, n); with a
    Tensor the result is (N, V, 3).  ``scales`` overrides ``bank.scales`` and
    may itself be a Tensor (learnable).
    """
    if isinstance(weights, ad.Tensor) or isinstance(scales, ad.Tensor):
        w = ad.as_tensor(weights)
        if w.ndim == 1:
            w = ad.reshape(w, (1, -1))
        if w.shape[1] != bank.n:
            raise ValueError(f"{w.shape[1]} weights for {bank.n} templates")
        s = ad.as_tensor(bank.scales if scales is None else scales)
        flat = ad.Tensor(bank.vertices.reshape(bank.n, -1))
        out = (w * ad.reshape(s, (1, -1))) @ flat
        return ad.reshape(out, (w.shape[0], bank.n_vertices, 3))
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(w) != bank.n:
        raise ValueError(f"{len(w)} weights for {bank.n} templates")
    s = bank.scales if scales is None else np.asarray(scales, dtype=np.float64)
    return np.einsum("i,ivj->vj", s * w, bank.vertices)


# ---------------------------------------------------------------- deformation
@dataclass
class DeformationMap:
    dod: int
    grid: np.ndarray  # (3, side, side)

    def __post_init__(self):
        side = dod_side(self.dod)
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.shape != (3, side, side):
            raise ValueError(f"dod={self.dod} needs a (3, {side}, {side}) grid, got {self.grid.shape}")

    @classmethod
    def zeros(cls, dod: int) -> "DeformationMap":
        side = dod_side(dod)
        return cls(dod, np.zeros((3, side, side)))


def dod_side(dod: int) -> int:
    if dod not in ALLOWED_DOD:
        raise ValueError(f"unsupported degree of deformation {dod}; choose from {ALLOWED_DOD}")
    return int(round(dod**0.5))


def sample_deformation(grid, chart: SphereChart):
    """Per-vertex offsets from a (3, s, s) or (N, 3, s, s) UV grid: (V, 3) or (N, V, 3)."""
    if isinstance(grid, DeformationMap):
        grid = grid.grid
    if isinstance(grid, ad.Tensor):
        sampled = ad.bilinear_grid_sample(grid, chart.uvs)
        axes = (1, 0) if grid.ndim == 3 else (0, 2, 1)
        return ad.transpose(sampled, axes)
    out = ad.bilinear_grid_sample(ad.Tensor(grid), chart.uvs).data
    return out.T if out.ndim == 2 else out.transpose(0, 2, 1)


# ------------------------------------------------------------------ symmetry
_Z_FLIP = np.array([1.0, 1.0, -1.0])


def _mirror_u(x):
    """Reverse the last (u / column) axis."""
    if isinstance(x, ad.Tensor):
        return ad._make(x.data[..., ::-1].copy(), (x,), lambda g: (g[..., ::-1].copy(),))
    return x[..., ::-1]


def symmetrize_offsets(grid):
    """Mirror-average an offset grid (..., 3, H, W) about u = 0.5, negating z.

    Exactly invariant under u -> 1 - u with z -> -z; a centre column (odd
    width) ends up with zero z.
    """
    shape = (3, 1, 1)
    if isinstance(grid, ad.Tensor):
        flip = ad.Tensor(_Z_FLIP.reshape(shape))
        return (grid + _mirror_u(grid) * flip) * 0.5
    g = np.asarray(grid, dtype=np.float64)
    return 0.5 * (g + _mirror_u(g) * _Z_FLIP.reshape(shape))


def symmetrize_texture(texture):
    """T(u, v) <- (T(u, v) + T(1 - u, v)) / 2."""
    if isinstance(texture, ad.Tensor):
        return (texture + _mirror_u(texture)) * 0.5
    t = np.asarray(texture, dtype=np.float64)
    return 0.5 * (t + _mirror_u(t))


def symmetrize_vertices(vertices, perm: np.ndarray):
    """Average each vertex with the z-mirror of its mirror partner."""
    if isinstance(vertices, ad.Tensor):
        axis_take = ad.take(vertices, perm) if vertices.ndim == 2 else vertices[:, perm]
        return (vertices + axis_take * ad.Tensor(_Z_FLIP)) * 0.5
    v = np.asarray(vertices, dtype=np.float64)
    mirrored = (v[perm] if v.ndim == 2 else v[:, perm]) * _Z_FLIP
    return 0.5 * (v + mirrored)


def apply_reflection_symmetry(field, kind: str | None = None, perm: np.ndarray | None = None):
    """Project a deformation map, texture map or vertex array onto its z = 0 mirror-symmetric part.

    ``kind`` is one of "offsets", "texture", "vertices"; a DeformationMap is
    recognised automatically.
    """
    if isinstance(field, DeformationMap):
        return DeformationMap(field.dod, symmetrize_offsets(field.grid))
    if kind == "offsets":
        return symmetrize_offsets(field)
    if kind == "texture":
        return symmetrize_texture(field)
    if kind == "vertices":
        if perm is None:
            perm = mirror_permutation(np.asarray(field.data if isinstance(field, ad.Tensor) else field).reshape(-1, 3))
        return symmetrize_vertices(field, perm)
    raise ValueError(f"unknown field kind {kind!r}")
