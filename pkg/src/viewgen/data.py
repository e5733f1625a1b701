"""Procedural textured shapes and the single-view dataset built from them."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import jsonio
from .geometry.io import image_from_png, image_to_png, read_obj, write_obj
from .geometry.mesh import Mesh, SphereChart, face_uvs, icosphere
from .render import Camera, composite, project, rasterize

DATASET_VERSION = 1
FAMILIES = ("ellipsoid", "superquadric", "box-blend")
PROGRAMS = ("checker", "stripes", "gradient")
EVAL_OFFSETS_DEG = (90, 180, 270)
ELEVATION_RANGE_DEG = (-20.0, 40.0)
MARKER_COLOR = (0.95, 0.05, 0.05)
HARD_SIGMA = 1e-7
KEYPOINT_DIRECTIONS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1], [1, 1, 1], [1, 1, -1]], dtype=np.float64
)


class DataError(RuntimeError):
    pass


@dataclass
class ShapeSpec:
    family: str = "ellipsoid"
    axes: tuple[float, float, float] = (1.0, 1.0, 1.0)
    exponent: float = 2.0
    blend: float = 0.0
    taper: float = 0.0
    program: str = "checker"
    colors: tuple = ((0.2, 0.4, 0.8), (0.9, 0.9, 0.3))
    frequency: int = 4
    marker_half_width: float = 0.045
    marker_half_height: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown shape family {self.family!r}")
        if self.program not in PROGRAMS:
            raise ValueError(f"unknown texture program {self.program!r}")

    @classmethod
    def random(cls, seed: int, family: str | None = None) -> "ShapeSpec":
        rng = np.random.default_rng(seed)
        fam = family or FAMILIES[int(rng.integers(len(FAMILIES)))]
        axes = (float(rng.uniform(0.75, 1.05)), float(rng.uniform(0.45, 0.85)), float(rng.uniform(0.4, 0.7)))
        palette = rng.uniform(0.1, 0.9, size=(2, 3))
        palette[:, 0] *= 0.6  # keep the marker red distinctive
        return cls(
            family=fam,
            axes=axes,
            exponent=float(rng.uniform(2.5, 5.0)),
            blend=float(rng.uniform(0.3, 0.8)),
            taper=float(rng.uniform(-0.3, 0.3)),
            program=PROGRAMS[int(rng.integers(len(PROGRAMS)))],
            colors=tuple(tuple(float(c) for c in row) for row in palette),
            frequency=int(rng.integers(2, 6)),
            seed=seed,
        )

    def as_dict(self) -> dict:
        return asdict(self)


def shape_radius(spec: ShapeSpec, dirs: np.ndarray) -> np.ndarray:
    """Radius along each direction, in units of the direction's own length.

    Written homogeneous of degree 0 so unit axes give exactly 1 even when the
    reference directions are only unit to rounding.
    """
    n = np.linalg.norm(dirs, axis=1)
    q = dirs / np.asarray(spec.axes)
    if spec.family == "ellipsoid":
        r = n / np.linalg.norm(q, axis=1)
    elif spec.family == "superquadric":
        e = spec.exponent
        r = n * np.sum(np.abs(q) ** e, axis=1) ** (-1.0 / e)
    else:
        box = n / np.max(np.abs(q), axis=1)
        ell = n / np.linalg.norm(q, axis=1)
        r = (1.0 - spec.blend) * ell + spec.blend * box
    if spec.taper:
        r = r * (1.0 + spec.taper * dirs[:, 0] / n)
    if not np.all(np.isfinite(r)) or np.any(r <= 0):
        raise ValueError("radius function is non-positive somewhere on the sphere")
    return r


def paint_texture(spec: ShapeSpec, size: int) -> np.ndarray:
    """(3, size, size) texture, mirror symmetric in u about 0.5, with one front marker."""
    # built from column indices so column j and size-1-j get identical values
    dist = np.abs(2 * np.arange(size) - (size - 1)) / (2.0 * (size - 1))  # |u - 0.5|
    v = np.linspace(0.0, 1.0, size)
    fold = dist * 2.0  # 0 at the front, 1 at the back seam
    F, V = np.meshgrid(fold, v)  # rows are v
    c0, c1 = (np.asarray(c, dtype=np.float64)[:, None, None] for c in spec.colors)
    k = spec.frequency
    if spec.program == "checker":
        t = ((np.floor(F * k) + np.floor(V * k)) % 2)[None]
    elif spec.program == "stripes":
        t = (np.floor(V * 2 * k) % 2)[None]
    else:
        t = (0.5 * F + 0.5 * V)[None]
    tex = (1.0 - t) * c0 + t * c1
    D = np.meshgrid(dist, v)[0]
    marker = (D <= spec.marker_half_width) & (np.abs(V - 0.5) <= spec.marker_half_height)
    tex[:, marker] = np.asarray(MARKER_COLOR)[:, None]
    return np.clip(tex, 0.0, 1.0)


def marker_region(spec: ShapeSpec, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return (np.abs(u - 0.5) <= spec.marker_half_width) & (np.abs(v - 0.5) <= spec.marker_half_height)


def generate_shape(spec: ShapeSpec, reference: Mesh | None = None, texture_size: int = 64) -> tuple[Mesh, np.ndarray]:
    reference = reference or icosphere(3)
    r = shape_radius(spec, reference.vertices)
    return Mesh(reference.vertices * r[:, None], reference.faces), paint_texture(spec, texture_size)


def keypoint_indices(reference: Mesh) -> np.ndarray:
    dirs = reference.vertices / np.linalg.norm(reference.vertices, axis=1, keepdims=True)
    targets = KEYPOINT_DIRECTIONS / np.linalg.norm(KEYPOINT_DIRECTIONS, axis=1, keepdims=True)
    return np.argmax(targets @ dirs.T, axis=1).astype(np.int64)


# ---------------------------------------------------------------- cameras
def train_camera(rng: np.random.Generator, distance: float, fov: float) -> Camera:
    lo, hi = (math.radians(x) for x in ELEVATION_RANGE_DEG)
    # draw order is part of the reproducibility contract
    az = float(rng.uniform(0.0, 2 * math.pi))
    el = float(rng.uniform(lo, hi))
    return Camera(az, el, distance, fov)


def eval_cameras(cam: Camera) -> dict[str, Camera]:
    th, ph, rho = cam.values()
    return {f"az{d:03d}": Camera((th + math.radians(d)) % (2 * math.pi), ph, rho, cam.fov) for d in EVAL_OFFSETS_DEG}


# ------------------------------------------------------- keypoint visibility
def keypoint_visibility(mesh: Mesh, kp: np.ndarray, cam: Camera, rel_tol: float = 1e-6):
    """NDC keypoints (K, 2) and visibility flags from an exact screen-space depth query.

    Every projected face (other than those incident to the keypoint) that
    contains the keypoint's NDC position is a candidate occluder; its depth
    there comes from perspective-correct interpolation, 1/z = sum(b_i / z_i).
    """
    ndc, depth = project(mesh.vertices, cam)
    xy, z = ndc.data, depth
    f = mesh.faces
    a, b, c = xy[f[:, 0]], xy[f[:, 1]], xy[f[:, 2]]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    ok = np.abs(area) > 1e-14
    inv_area = np.where(ok, 1.0 / np.where(ok, area, 1.0), 0.0)
    pts = xy[kp]
    visible = np.zeros(len(kp), dtype=bool)
    for n, vid in enumerate(kp):
        p = pts[n]
        if abs(p[0]) > 1 or abs(p[1]) > 1:
            continue
        l0 = ((b[:, 0] - p[0]) * (c[:, 1] - p[1]) - (b[:, 1] - p[1]) * (c[:, 0] - p[0])) * inv_area
        l1 = ((c[:, 0] - p[0]) * (a[:, 1] - p[1]) - (c[:, 1] - p[1]) * (a[:, 0] - p[0])) * inv_area
        l2 = 1.0 - l0 - l1
        inside = ok & (l0 >= 0) & (l1 >= 0) & (l2 >= 0) & ~np.any(f == vid, axis=1)
        if not inside.any():
            visible[n] = True
            continue
        w = np.stack([l0, l1, l2], axis=1)[inside]
        zf = 1.0 / np.sum(w / z[f[inside]], axis=1)
        visible[n] = bool(np.all(zf >= z[vid] * (1.0 - rel_tol)))
    return xy[kp].copy(), visible


def keypoint_visibility_raycast(mesh: Mesh, kp: np.ndarray, cam: Camera) -> np.ndarray:
    """Reference oracle: segment eye -> keypoint hits no face outside the keypoint's 1-ring."""
    eye = cam.eye()
    a, b, c = (mesh.vertices[mesh.faces[:, i]] for i in range(3))
    e1, e2 = b - a, c - a
    ndc, _ = project(mesh.vertices[kp], cam)
    out = np.zeros(len(kp), dtype=bool)
    for n, vid in enumerate(kp):
        if np.any(np.abs(ndc.data[n]) > 1):
            continue
        d = mesh.vertices[vid] - eye
        pvec = np.cross(d, e2)
        det = np.einsum("ij,ij->i", e1, pvec)
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = eye - a
        u = np.einsum("ij,ij->i", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        v = (qvec @ d) * inv
        t = np.einsum("ij,ij->i", e2, qvec) * inv
        incident = np.any(mesh.faces == vid, axis=1)
        hit = ok & ~incident & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-9) & (t < 1 - 1e-6)
        out[n] = not hit.any()
    return out


# ---------------------------------------------------------------- rendering
def render_view(mesh: Mesh, texture: np.ndarray, chart: SphereChart, cam: Camera, H: int, W: int):
    fuv = face_uvs(chart, mesh.faces)
    res = rasterize(mesh.vertices, mesh.faces, texture, fuv, cam, H, W, sigma=HARD_SIGMA)
    return res, composite(res).data


def marker_pixels(spec: ShapeSpec, res, fuv: np.ndarray) -> np.ndarray:
    """Covered pixels whose interpolated chart UV lies in the front marker."""
    f = res.face_index
    cov = f >= 0
    out = np.zeros(f.shape, dtype=bool)
    if cov.any():
        uv = np.einsum("cp,pcj->pj", res.barycentric[:, cov], fuv[f[cov]])
        u = np.mod(uv[:, 0], 1.0)
        out[cov] = marker_region(spec, u, uv[:, 1])
    return out


@dataclass
class DatasetManifest:
    version: int
    seed: int
    n_shapes: int
    height: int
    width: int
    distance: float
    fov: float
    texture_size: int
    train: list = field(default_factory=list)
    eval: list = field(default_factory=list)
    shapes: list = field(default_factory=list)
    keypoint_indices: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        raw = jsonio.load(path)
        if raw.get("version") != DATASET_VERSION:
            raise DataError(f"{path}: unsupported manifest version {raw.get('version')}")
        return cls(**raw)


def build_dataset(n_shapes: int, seed: int, H: int, W: int, out_dir: str | Path, distance: float = 2.6,
                  fov: float = math.radians(50.0), texture_size: int = 64, family: str | None = None,
                  same_texture_pairs: bool = False) -> DatasetManifest:
    """Write the dataset under ``out_dir`` and return its manifest.

    ``family`` pins every shape to one family; ``same_texture_pairs`` gives
    shapes 2k and 2k+1 one shared texture program.
    """
    if n_shapes < 1:
        raise DataError("n_shapes must be >= 1")
    root = Path(out_dir)
    try:
        for sub in ("images", "masks", "meta", "gt", "markers"):
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {root}: {exc}") from exc
    reference = icosphere(3)
    chart = SphereChart(reference.vertices)
    fuv = face_uvs(chart, reference.faces)
    kp = keypoint_indices(reference)
    seeds = np.random.SeedSequence(seed)
    shape_seeds = [int(s.generate_state(1)[0]) for s in seeds.spawn(n_shapes)]
    cam_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    manifest = DatasetManifest(DATASET_VERSION, seed, n_shapes, H, W, distance, fov, texture_size,
                               keypoint_indices=[int(k) for k in kp])
    for n in range(n_shapes):
        sid = f"s{n:04d}"
        spec = ShapeSpec.random(shape_seeds[n], family)
        if same_texture_pairs and n % 2 == 1:
            prev = ShapeSpec.random(shape_seeds[n - 1], family)
            spec = ShapeSpec(**{**spec.as_dict(), "program": prev.program, "colors": prev.colors, "frequency": prev.frequency,
                                "marker_half_width": prev.marker_half_width, "marker_half_height": prev.marker_half_height})
        mesh, tex = generate_shape(spec, reference, texture_size)
        cam = train_camera(cam_rng, distance, fov)
        views = {"train": cam, **eval_cameras(cam)}
        try:
            write_obj(root / "gt" / f"{sid}.obj", mesh, fuv, tex)
            for view, c in views.items():
                res, img = render_view(mesh, tex, chart, c, H, W)
                if not res.mask.any():
                    raise DataError(f"{sid}/{view}: empty mask")
                name = f"{sid}_{view}"
                image_to_png(img, root / "images" / f"{name}.png")
                image_to_png(res.mask.astype(np.float64), root / "masks" / f"{name}.png")
                image_to_png(marker_pixels(spec, res, fuv).astype(np.float64), root / "markers" / f"{name}.png")
                pts, vis = keypoint_visibility(mesh, kp, c)
                meta = {"id": sid, "view": view, "camera": c.as_dict(), "keypoints": pts, "visibility": [bool(x) for x in vis]}
                jsonio.dump(meta, root / "meta" / f"{name}.json")
                entry = {"id": sid, "view": view, "image": f"images/{name}.png", "mask": f"masks/{name}.png",
                         "meta": f"meta/{name}.json", "marker": f"markers/{name}.png"}
                (manifest.train if view == "train" else manifest.eval).append(entry)
        except OSError as exc:
            raise DataError(f"write failed under {root}: {exc}") from exc
        manifest.shapes.append({"id": sid, "obj": f"gt/{sid}.obj", "texture": f"gt/{sid}_tex.png", "spec": spec.as_dict()})
    jsonio.dump(manifest.as_dict(), root / "manifest.json")
    return manifest


# ------------------------------------------------------------------ loading
@dataclass
class ViewSet:
    ids: list[str]
    images: np.ndarray  # (N, 3, H, W)
    masks: np.ndarray  # (N, H, W)
    cameras: list[Camera]
    keypoints: np.ndarray  # (N, K, 2)
    visibility: np.ndarray  # (N, K)
    markers: np.ndarray  # (N, H, W) bool
    views: list[str]

    def __len__(self) -> int:
        return len(self.ids)

    def camera_codes(self) -> np.ndarray:
        return np.stack([c.encode() for c in self.cameras]) if self.cameras else np.zeros((0, 4))

    def subset(self, idx) -> "ViewSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ViewSet([self.ids[i] for i in idx], self.images[idx], self.masks[idx], [self.cameras[i] for i in idx],
                       self.keypoints[idx], self.visibility[idx], self.markers[idx], [self.views[i] for i in idx])


@dataclass
class Dataset:
    root: Path
    manifest: DatasetManifest
    train: ViewSet
    eval: ViewSet


def _load_views(root: Path, entries: list, fov: float) -> ViewSet:
    ids, imgs, masks, cams, kps, vis, marks, views = [], [], [], [], [], [], [], []
    for e in entries:
        paths = [root / e[k] for k in ("image", "mask", "meta")]
        for p in paths:
            if not p.exists():
                raise DataError(f"missing dataset file {p}")
        meta = jsonio.load(paths[2])
        c = meta["camera"]
        ids.append(e["id"])
        views.append(e["view"])
        imgs.append(image_from_png(paths[0]))
        masks.append(image_from_png(paths[1]) > 0.5)
        cams.append(Camera(c["azimuth"], c["elevation"], c["distance"], c.get("fov", fov)))
        kps.append(np.asarray(meta["keypoints"], dtype=np.float64))
        vis.append(np.asarray(meta["visibility"], dtype=bool))
        mp = root / e.get("marker", "")
        marks.append(image_from_png(mp) > 0.5 if e.get("marker") and mp.exists() else np.zeros(masks[-1].shape, dtype=bool))
    if not ids:
        return ViewSet([], np.zeros((0, 3, 1, 1)), np.zeros((0, 1, 1), dtype=bool), [], np.zeros((0, 0, 2)), np.zeros((0, 0), dtype=bool),
                       np.zeros((0, 1, 1), dtype=bool), [])
    return ViewSet(ids, np.stack(imgs), np.stack(masks), cams, np.stack(kps), np.stack(vis), np.stack(marks), views)


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    manifest = DatasetManifest.load(root)
    train = _load_views(root, manifest.train, manifest.fov)
    if len(train) == 0:
        raise DataError(f"{root}: dataset has no training samples")
    return Dataset(root, manifest, train, _load_views(root, manifest.eval, manifest.fov))


def load_ground_truth(data: Dataset, ids: list[str]) -> tuple[np.ndarray, np.ndarray]:
    """Stacked GT vertices (N, V, 3) and textures (N, 3, T, T) for shape ids."""
    by_id = {s["id"]: s for s in data.manifest.shapes}
    verts, texs = [], []
    for sid in ids:
        if sid not in by_id:
            raise DataError(f"unknown shape id {sid}")
        path = data.root / by_id[sid]["obj"]
        if not path.exists():
            raise DataError(f"missing ground-truth mesh {path}")
        mesh, _, tex = read_obj(path)
        if tex is None:
            raise DataError(f"{path}: no texture")
        verts.append(mesh.vertices)
        texs.append(tex)
    return np.stack(verts), np.stack(texs)
