"""Wavefront OBJ/MTL exchange and the binary template-bank directory format."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .mesh import Mesh, SphereChart
from .templates import TemplateBank

BANK_MAGIC = b"VGBANK\x00\x00"
BANK_VERSION = 1


# ----------------------------------------------------------------- textures
def texture_to_png(texture: np.ndarray, path: str | Path) -> None:
    """(3, H, W) texture in [0, 1] -> 8-bit PNG with the v = 1 row on top."""
    arr = np.clip(np.asarray(texture), 0.0, 1.0).transpose(1, 2, 0)[::-1]
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="RGB").save(path)


def texture_from_png(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr[::-1].transpose(2, 0, 1))


def image_to_png(image: np.ndarray, path: str | Path) -> None:
    """(3, H, W) or (H, W) image in [0, 1] -> 8-bit PNG, row 0 on top."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    if arr.ndim == 3:
        Image.fromarray(np.round(arr.transpose(1, 2, 0) * 255.0).astype(np.uint8), mode="RGB").save(path)
    else:
        Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L").save(path)


def image_from_png(path: str | Path) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy() if arr.ndim == 3 else arr


# --------------------------------------------------------------------- OBJ
def write_obj(path: str | Path, mesh: Mesh, face_uv: np.ndarray | None = None, texture: np.ndarray | None = None) -> None:
    """Write vertices/faces; with ``face_uv`` (F, 3, 2) emit per-corner vt records.

    When ``texture`` is given a companion ``.mtl`` and ``_tex.png`` are written
    next to the OBJ.
    """
    path = Path(path)
    lines = []
    if texture is not None:
        mtl = path.with_suffix(".mtl")
        png = path.with_name(path.stem + "_tex.png")
        texture_to_png(texture, png)
        mtl.write_text(f"newmtl material0\nKa 1 1 1\nKd 1 1 1\nmap_Kd {png.name}\n")
        lines.append(f"mtllib {mtl.name}")
    for x, y, z in mesh.vertices:
        lines.append(f"v {x:.17g} {y:.17g} {z:.17g}")
    if face_uv is not None:
        for u, v in np.asarray(face_uv).reshape(-1, 2):
            lines.append(f"vt {u:.17g} {v:.17g}")
        if texture is not None:
            lines.append("usemtl material0")
        for fi, (a, b, c) in enumerate(mesh.faces):
            t = 3 * fi + 1
            lines.append(f"f {a + 1}/{t} {b + 1}/{t + 1} {c + 1}/{t + 2}")
    else:
        for a, b, c in mesh.faces:
            lines.append(f"f {a + 1} {b + 1} {c + 1}")
    path.write_text("\n".join(lines) + "\n")


def read_obj(path: str | Path):
    """Return (mesh, face_uv or None, texture or None). Polygons are fan-triangulated."""
    path = Path(path)
    verts, uvs, faces, face_t = [], [], [], []
    texture = None
    for raw in path.read_text().splitlines():
        tok = raw.split()
        if not tok or tok[0].startswith("#"):
            continue
        if tok[0] == "v":
            verts.append([float(x) for x in tok[1:4]])
        elif tok[0] == "vt":
            uvs.append([float(x) for x in tok[1:3]])
        elif tok[0] == "f":
            idx = [_parse_corner(c, len(verts), len(uvs)) for c in tok[1:]]
            for k in range(1, len(idx) - 1):
                tri = (idx[0], idx[k], idx[k + 1])
                faces.append([c[0] for c in tri])
                face_t.append([c[1] for c in tri])
        elif tok[0] == "mtllib":
            texture = _read_mtl_texture(path.parent / tok[1])
    mesh = Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
    face_uv = None
    if uvs and all(t >= 0 for row in face_t for t in row):
        face_uv = np.array(uvs)[np.array(face_t)]
    return mesh, face_uv, texture


def _parse_corner(token: str, nv: int, nt: int) -> tuple[int, int]:
    parts = token.split("/")
    v = int(parts[0])
    v = v - 1 if v > 0 else nv + v
    t = -1
    if len(parts) > 1 and parts[1]:
        t = int(parts[1])
        t = t - 1 if t > 0 else nt + t
    return v, t


def _read_mtl_texture(mtl: Path):
    if not mtl.exists():
        return None
    for line in mtl.read_text().splitlines():
        tok = line.split()
        if tok and tok[0] == "map_Kd":
            return texture_from_png(mtl.parent / tok[-1])
    return None


# ------------------------------------------------------------ template banks
def _write_block(path: Path, kind: int, array: np.ndarray, dtype: str) -> None:
    arr = np.ascontiguousarray(array, dtype=dtype)
    header = BANK_MAGIC + struct.pack("<HHI", BANK_VERSION, kind, arr.shape[0])
    cols = arr.shape[1] if arr.ndim > 1 else 1
    path.write_bytes(header + struct.pack("<Q", cols) + arr.tobytes())


def _read_block(path: Path, dtype: str) -> np.ndarray:
    blob = path.read_bytes()
    if blob[:8] != BANK_MAGIC:
        raise ValueError(f"{path}: bad magic")
    version, _, rows = struct.unpack("<HHI", blob[8:16])
    if version != BANK_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    (cols,) = struct.unpack("<Q", blob[16:24])
    return np.frombuffer(blob[24:], dtype=dtype).reshape(rows, cols).copy()


def save_bank(bank: TemplateBank, directory: str | Path) -> None:
    """topology.bin (faces), chart.bin (directions), template_XX.bin, scales.bin, names.txt."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_block(d / "topology.bin", 1, bank.faces, "<i8")
    _write_block(d / "chart.bin", 2, bank.chart.directions, "<f8")
    for i, v in enumerate(bank.vertices):
        _write_block(d / f"template_{i:02d}.bin", 3, v, "<f8")
    _write_block(d / "scales.bin", 4, bank.scales.reshape(-1, 1), "<f8")
    (d / "names.txt").write_text("\n".join(bank.names) + "\n")


def load_bank(directory: str | Path) -> TemplateBank:
    d = Path(directory)
    faces = _read_block(d / "topology.bin", "<i8")
    chart = SphereChart(_read_block(d / "chart.bin", "<f8"))
    scales = _read_block(d / "scales.bin", "<f8").reshape(-1)
    verts = np.stack([_read_block(d / f"template_{i:02d}.bin", "<f8") for i in range(len(scales))])
    names = tuple((d / "names.txt").read_text().split()) if (d / "names.txt").exists() else ()
    return TemplateBank(faces, chart, verts, scales, names)
