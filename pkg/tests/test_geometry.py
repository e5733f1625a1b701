import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viewgen import autodiff as ad
from viewgen.geometry import io as gio
from viewgen.geometry.mesh import (
    Mesh,
    MeshError,
    SphereChart,
    face_normals,
    icosphere,
    mirror_permutation,
    sphere_to_uv,
    torus,
    uniform_laplacian,
    unit_cube,
)
from viewgen.geometry.preprocess import (
    OccupancyGrid,
    PreprocessError,
    marching_cubes,
    point_in_mesh,
    preprocess_template,
    resample_on_common_topology,
    signed_spherical_areas,
    spherical_parameterize,
    voxelize,
)
from viewgen.geometry.templates import (
    DeformationMap,
    TemplateBank,
    apply_reflection_symmetry,
    blend_templates,
    dod_side,
    sample_deformation,
)

REF = icosphere(3)
CHART = SphereChart(REF.vertices)


def _components_union_find(mesh: Mesh) -> int:
    parent = list(range(mesh.n_vertices))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b, c in mesh.faces:
        for x, y in ((a, b), (b, c)):
            parent[find(x)] = find(y)
    return len({find(i) for i in np.unique(mesh.faces)})


def _cube_surface_distance(p: np.ndarray, half: float = 0.5) -> np.ndarray:
    q = np.abs(p) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(-q.max(axis=1), 0.0)
    return np.where(q.max(axis=1) > 0, outside, -inside)


def _subdivided_cube(n: int = 4) -> Mesh:
    """Centred unit cube with each face split into an n x n grid (closed, shared edges)."""
    index, verts, faces = {}, [], []

    def vid(p):
        key = tuple(np.round(p, 9))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    t = np.linspace(-0.5, 0.5, n + 1)
    for axis in range(3):
        for sign in (-1.0, 1.0):
            a1, a2 = [k for k in range(3) if k != axis]
            for i in range(n):
                for j in range(n):
                    corner = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3)
                        p[axis], p[a1], p[a2] = sign * 0.5, t[i + di], t[j + dj]
                        corner.append(vid(p))
                    a, b, c, d = corner
                    faces += [(a, b, c), (a, c, d)]
    m = Mesh(np.array(verts), np.array(faces))
    # orient each face outward individually
    f = m.faces.copy()
    for k, (a, b, c) in enumerate(f):
        n_ = np.cross(m.vertices[b] - m.vertices[a], m.vertices[c] - m.vertices[a])
        if n_ @ m.vertices[[a, b, c]].mean(axis=0) < 0:
            f[k] = (a, c, b)
    return Mesh(m.vertices, f)


# ------------------------------------------------------------------ voxelize
def test_voxelize_cube_box_all_occupied():
    cube = unit_cube()
    grid = voxelize(cube, 4, np.zeros(3), np.ones(3))
    assert grid.cells.sum() == 64
    centers = np.stack(np.meshgrid(*(grid.centers(a) for a in range(3)), indexing="ij"), axis=-1).reshape(-1, 3)
    np.testing.assert_array_equal(point_in_mesh(cube, centers), grid.cells.reshape(-1))


def test_voxelize_sphere_center_and_corners():
    grid = voxelize(icosphere(2), 8, -np.ones(3), np.ones(3))
    c = grid.cells
    assert c[3:5, 3:5, 3:5].all()
    for i in (0, -1):
        for j in (0, -1):
            for k in (0, -1):
                assert not c[i, j, k]
    centers = np.stack(np.meshgrid(*(grid.centers(a) for a in range(3)), indexing="ij"), axis=-1)
    r = np.linalg.norm(centers, axis=-1)
    # inscribed polyhedron radius is within 3% of the unit sphere at level 2
    assert np.all(c[r < 0.95]) and not np.any(c[r > 1.0])


def test_voxelize_errors():
    with pytest.raises(MeshError):
        voxelize(Mesh(np.zeros((0, 3)), np.zeros((0, 3))), 8)
    open_mesh = Mesh(unit_cube().vertices, unit_cube().faces[:-1])
    with pytest.raises(MeshError, match="edge"):
        voxelize(open_mesh, 8)


def test_voxelize_nonempty_has_occupied_cell():
    assert voxelize(unit_cube(center=True), 5).cells.any()


# ------------------------------------------------------------ marching cubes
def test_marching_cubes_single_cell():
    cells = np.zeros((4, 4, 4), dtype=bool)
    cells[1, 2, 1] = True
    m = marching_cubes(OccupancyGrid(cells, np.zeros(3), np.ones(3)))
    assert m.is_closed()
    assert m.euler_characteristic() == 2


def test_marching_cubes_block_single_component():
    cells = np.zeros((6, 6, 6), dtype=bool)
    cells[2:4, 2:4, 2:4] = True
    m = marching_cubes(OccupancyGrid(cells, np.zeros(3), np.ones(3)))
    assert _components_union_find(m) == 1
    assert m.is_genus0()


def test_marching_cubes_checkerboard_flagged():
    i, j, k = np.indices((4, 4, 4))
    cells = (i + j + k) % 2 == 0
    m = marching_cubes(OccupancyGrid(cells, np.zeros(3), np.ones(3)))
    assert not m.is_genus0()
    with pytest.raises(MeshError):
        spherical_parameterize(m)


def test_marching_cubes_rejects_uniform_grid():
    for fill in (False, True):
        with pytest.raises(MeshError):
            marching_cubes(OccupancyGrid(np.full((4, 4, 4), fill), np.zeros(3), np.ones(3)))


# ---------------------------------------------------- spherical parameterize
def test_parameterize_icosphere_is_rotation_of_identity():
    chart = spherical_parameterize(REF)
    d = chart.directions
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-6)
    assert np.sum(signed_spherical_areas(d, REF.faces) <= 0) == 0
    # best orthogonal map from the input directions to the chart is (near) exact
    src = REF.vertices / np.linalg.norm(REF.vertices, axis=1, keepdims=True)
    u, _, vt = np.linalg.svd(src.T @ d)
    rot = u @ vt
    assert np.max(np.abs(src @ rot - d)) < 1e-6


def test_parameterize_cube():
    cube = _subdivided_cube(3)
    chart = spherical_parameterize(cube)
    np.testing.assert_allclose(np.linalg.norm(chart.directions, axis=1), 1.0, atol=1e-6)
    assert np.sum(signed_spherical_areas(chart.directions, cube.faces) <= 0) == 0


def test_parameterize_rejects_torus():
    with pytest.raises(MeshError, match="genus"):
        spherical_parameterize(torus())


# ------------------------------------------------------------------- chart
def test_sphere_to_uv_examples():
    np.testing.assert_allclose(sphere_to_uv(np.array([1.0, 0.0, 0.0])), [0.5, 0.5])
    np.testing.assert_allclose(sphere_to_uv(np.array([0.0, 1.0, 0.0])), [0.5, 1.0])
    np.testing.assert_allclose(sphere_to_uv(np.array([-1.0, 0.0, 0.0])), [0.0, 0.5])
    with pytest.raises(MeshError):
        sphere_to_uv(np.array([1.1, 0.0, 0.0]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_sphere_to_uv_range_and_inverse(v):
    p = np.asarray(v) / np.linalg.norm(v)
    u, vv = sphere_to_uv(p)
    assert 0.0 <= u < 1.0 and 0.0 <= vv <= 1.0
    if abs(p[1]) < 1 - 1e-9:
        phi = (u - 0.5) * 2 * math.pi
        lat = (vv - 0.5) * math.pi
        back = np.array([math.cos(lat) * math.cos(phi), math.sin(lat), math.cos(lat) * math.sin(phi)])
        np.testing.assert_allclose(back, p, atol=1e-9)


def test_chart_uvs_match_formula():
    np.testing.assert_array_equal(CHART.uvs, sphere_to_uv(CHART.directions))


# -------------------------------------------------------------- resampling
def test_resample_identity():
    out = resample_on_common_topology(REF, CHART, REF)
    np.testing.assert_allclose(out, REF.vertices, atol=1e-12)


def test_resample_radius_two_sphere():
    big = Mesh(2.0 * icosphere(2).vertices, icosphere(2).faces)
    out = resample_on_common_topology(big, SphereChart(icosphere(2).vertices), REF)
    # flat triangles of a level-2 sphere sit inside radius 2; only vertex hits are exact
    norms = np.linalg.norm(out, axis=1)
    assert np.all(norms <= 2.0 + 1e-6)
    sphere_src = Mesh(2.0 * REF.vertices, REF.faces)
    np.testing.assert_allclose(np.linalg.norm(resample_on_common_topology(sphere_src, CHART, REF), axis=1), 2.0, atol=1e-6)


def test_resample_cube_close_to_surface():
    cube = _subdivided_cube(4)
    out = resample_on_common_topology(cube, spherical_parameterize(cube), REF)
    edge = np.linalg.norm(REF.vertices[REF.edges[:, 0]] - REF.vertices[REF.edges[:, 1]], axis=1).mean()
    assert _cube_surface_distance(out).max() < 2 * edge


# --------------------------------------------------------- full preprocessing
def test_preprocess_icosphere_close_to_unit_sphere():
    r = 24
    out = preprocess_template(icosphere(3), r, REF)
    assert out.shape == REF.vertices.shape
    # the output is a radial graph over the reference directions, so radial deviation bounds the distance
    assert np.max(np.abs(np.linalg.norm(out, axis=1) - 1.0)) < 2.0 / r


def test_preprocess_interior_shell_removed():
    outer = unit_cube(center=True)
    inner = Mesh(0.3 * outer.vertices, outer.faces[:, ::-1])
    both = Mesh(np.vstack([outer.vertices, inner.vertices]), np.vstack([outer.faces, inner.faces + 8]))
    out = preprocess_template(both, 16, REF)
    assert Mesh(out, REF.faces).n_components() == 1
    # no vertex was pulled onto the inner shell
    assert _cube_surface_distance(out).max() < 0.15


def test_preprocess_junk_mesh_errors(rng):
    soup = Mesh(rng.standard_normal((30, 3)), rng.permutation(30).reshape(10, 3))
    with pytest.raises(PreprocessError) as info:
        preprocess_template(soup, 16, REF)
    assert info.value.stage == "voxelize"


def test_preprocessed_template_invariants():
    """Every template in the bank comes with a valid chart on a genus-0 topology."""
    bank = TemplateBank.from_reference(REF, [preprocess_template(_subdivided_cube(3), 16, REF), REF.vertices])
    np.testing.assert_allclose(np.linalg.norm(bank.chart.directions, axis=1), 1.0, atol=1e-6)
    assert np.sum(signed_spherical_areas(bank.chart.directions, bank.faces) <= 0) == 0
    for i in range(bank.n):
        assert bank.mesh(i).euler_characteristic() == 2


# ---------------------------------------------------------------- blending
def _bank(rng, n=3, scales=None):
    verts = [REF.vertices * (1 + 0.2 * k) + 0.01 * rng.standard_normal(REF.vertices.shape) for k in range(n)]
    return TemplateBank(REF.faces, CHART, np.stack(verts), np.ones(n) if scales is None else scales)


def test_blend_examples(rng):
    b1 = _bank(rng, 1)
    np.testing.assert_array_equal(blend_templates(b1, [1.0]), b1.vertices[0])
    b2 = _bank(rng, 2)
    np.testing.assert_allclose(blend_templates(b2, [0.5, 0.5]), 0.5 * (b2.vertices[0] + b2.vertices[1]), rtol=1e-15)
    b3 = _bank(rng, 2, scales=np.array([2.0, 1.0]))
    np.testing.assert_array_equal(blend_templates(b3, [1.0, 0.0]), 2.0 * b3.vertices[0])
    with pytest.raises(ValueError):
        blend_templates(b2, [1.0])


def test_blend_one_hot_identity_exact(rng):
    bank = _bank(rng, 4)
    for i in range(4):
        w = np.eye(4)[i]
        assert blend_templates(bank, w).tobytes() == bank.vertices[i].tobytes()
        t = blend_templates(bank, ad.Tensor(w[None])).data[0]
        assert t.tobytes() == bank.vertices[i].tobytes()


def test_blend_tensor_matches_numpy(rng):
    bank = _bank(rng, 3, scales=np.array([0.5, 1.5, 2.0]))
    w = rng.dirichlet(np.ones(3))
    np.testing.assert_allclose(blend_templates(bank, ad.Tensor(w[None])).data[0], blend_templates(bank, w), rtol=1e-13)


# ------------------------------------------------------------- deformation
def test_sample_deformation_examples():
    c = np.array([0.1, -0.2, 0.3])
    grid = np.broadcast_to(c[:, None, None], (3, 4, 4))
    np.testing.assert_allclose(sample_deformation(grid, CHART), np.broadcast_to(c, (REF.n_vertices, 3)), rtol=1e-14)

    g4 = np.arange(12.0).reshape(3, 2, 2)
    centre = SphereChart(np.array([[1.0, 0.0, 0.0]]))
    np.testing.assert_allclose(sample_deformation(g4, centre)[0], g4.mean(axis=(1, 2)))

    g1 = np.array([0.5, 0.0, -0.25]).reshape(3, 1, 1)
    np.testing.assert_allclose(sample_deformation(DeformationMap(1, g1), CHART), np.broadcast_to(g1.ravel(), (REF.n_vertices, 3)))


def test_dod_grid_shapes():
    assert dod_side(4) == 2
    assert DeformationMap.zeros(1024).grid.shape == (3, 32, 32)
    with pytest.raises(ValueError):
        dod_side(8)


@settings(max_examples=20, deadline=None)
@given(dod=st.sampled_from([1, 4, 16, 64, 256, 1024]), level=st.integers(0, 3), seed=st.integers(0, 999))
def test_sample_deformation_shape_and_linearity(dod, level, seed):
    r = np.random.default_rng(seed)
    chart = SphereChart(icosphere(level).vertices)
    side = dod_side(dod)
    g1, g2 = r.standard_normal((3, side, side)), r.standard_normal((3, side, side))
    a, b = r.uniform(-2, 2, size=2)
    out = sample_deformation(a * g1 + b * g2, chart)
    assert out.shape == (len(chart), 3)
    np.testing.assert_allclose(out, a * sample_deformation(g1, chart) + b * sample_deformation(g2, chart), atol=1e-12)


# ---------------------------------------------------------------- symmetry
def test_symmetry_texture_exact(rng):
    t = apply_reflection_symmetry(rng.random((3, 8, 9)), "texture")
    np.testing.assert_array_equal(t, t[..., ::-1])


def test_symmetry_sign_rule(rng):
    zonly = np.zeros((3, 4, 4))
    zonly[2] = rng.standard_normal((4, 4))
    anti = zonly.copy()
    anti[2] = zonly[2] - zonly[2][:, ::-1]
    np.testing.assert_allclose(apply_reflection_symmetry(anti, "offsets"), anti, atol=1e-15)
    sym = zonly.copy()
    sym[2] = zonly[2] + zonly[2][:, ::-1]
    np.testing.assert_allclose(apply_reflection_symmetry(sym, "offsets"), 0.0, atol=1e-15)


def test_symmetry_odd_width_centre_column(rng):
    out = apply_reflection_symmetry(rng.standard_normal((3, 5, 5)), "offsets")
    np.testing.assert_array_equal(out[2, :, 2], 0.0)


@settings(max_examples=30, deadline=None)
@given(w=st.integers(1, 9), seed=st.integers(0, 9999))
def test_symmetry_is_idempotent_projection(w, seed):
    r = np.random.default_rng(seed)
    for kind, x in (("offsets", r.standard_normal((3, 4, w))), ("texture", r.random((3, 4, w)))):
        once = apply_reflection_symmetry(x, kind)
        np.testing.assert_allclose(apply_reflection_symmetry(once, kind), once, atol=1e-15)
    dm = DeformationMap(16, r.standard_normal((3, 4, 4)))
    once = apply_reflection_symmetry(dm)
    np.testing.assert_allclose(apply_reflection_symmetry(once).grid, once.grid, atol=1e-15)
    v = r.standard_normal(REF.vertices.shape)
    perm = mirror_permutation(REF.vertices)
    vs = apply_reflection_symmetry(v, "vertices", perm)
    np.testing.assert_allclose(vs[perm] * [1, 1, -1], vs, atol=1e-15)
    np.testing.assert_allclose(apply_reflection_symmetry(vs, "vertices", perm), vs, atol=1e-15)


def test_symmetric_offsets_give_mirror_symmetric_vertices(rng):
    grid = apply_reflection_symmetry(rng.standard_normal((3, 4, 4)), "offsets")
    d = sample_deformation(grid, CHART)
    perm = mirror_permutation(REF.vertices)
    # seam vertices (u = 0) read the first and last columns, whose z components are opposite
    off_seam = (CHART.uvs[:, 0] > 1e-9) & (CHART.uvs[:, 0] < 1 - 1e-9)
    np.testing.assert_allclose((d[perm] * [1, 1, -1])[off_seam], d[off_seam], atol=1e-12)


# --------------------------------------------------------------- operators
def test_laplacian_examples():
    hexagon = np.array([[0.0, 0.0, 0.0]] + [[math.cos(a), math.sin(a), 0.0] for a in np.arange(6) * math.pi / 3])
    fan = Mesh(hexagon, [(0, i, i % 6 + 1) for i in range(1, 7)])
    np.testing.assert_allclose(uniform_laplacian(fan)[0], 0.0, atol=1e-15)

    lap = uniform_laplacian(REF)
    assert np.all(np.einsum("ij,ij->i", lap, REF.vertices) < 0)

    shifted = Mesh(REF.vertices + [3.0, -1.0, 2.0], REF.faces)
    np.testing.assert_allclose(uniform_laplacian(shifted), lap, atol=1e-12)

    with pytest.raises(MeshError, match="isolated"):
        uniform_laplacian(Mesh(np.vstack([REF.vertices, [[5.0, 5.0, 5.0]]]), REF.faces))


def test_face_normal_examples():
    tri = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    np.testing.assert_allclose(face_normals(tri), [[0, 0, 1]])
    np.testing.assert_allclose(face_normals(Mesh(tri.vertices, [[0, 2, 1]])), [[0, 0, -1]])
    np.testing.assert_allclose(face_normals(Mesh(REF.vertices * 3.7, REF.faces)), face_normals(REF), atol=1e-14)
    with pytest.raises(MeshError, match="zero-area face 0"):
        face_normals(Mesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]]))


def test_mesh_rejects_bad_faces():
    with pytest.raises(MeshError):
        Mesh(np.zeros((3, 3)), [[0, 1, 3]])
    with pytest.raises(MeshError):
        Mesh(np.zeros((3, 3)), [[0, 1, 1]])


def test_icosphere_counts():
    assert REF.n_vertices == 642 and REF.n_faces == 1280
    assert REF.is_genus0()


# --------------------------------------------------------------------- I/O
def test_obj_round_trip(tmp_path, rng):
    from viewgen.geometry.mesh import face_uvs

    tex = rng.random((3, 16, 16))
    fuv = face_uvs(CHART, REF.faces)
    gio.write_obj(tmp_path / "m.obj", REF, fuv, tex)
    mesh, fuv2, tex2 = gio.read_obj(tmp_path / "m.obj")
    np.testing.assert_array_equal(mesh.vertices, REF.vertices)
    np.testing.assert_array_equal(mesh.faces, REF.faces)
    np.testing.assert_allclose(fuv2, fuv, atol=1e-15)
    np.testing.assert_allclose(tex2, np.round(tex * 255) / 255, atol=1e-12)


def test_bank_round_trip(tmp_path, rng):
    bank = _bank(rng, 2, scales=np.array([0.75, 1.25]))
    gio.save_bank(bank, tmp_path / "bank")
    back = gio.load_bank(tmp_path / "bank")
    np.testing.assert_array_equal(back.vertices, bank.vertices)
    np.testing.assert_array_equal(back.scales, bank.scales)
    np.testing.assert_array_equal(back.faces, bank.faces)
    np.testing.assert_array_equal(back.chart.directions, bank.chart.directions)
    for f in sorted((tmp_path / "bank").iterdir()):
        if f.suffix == ".bin":
            assert len(f.read_bytes()) >= 16
