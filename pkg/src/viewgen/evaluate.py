"""Evaluation metrics, held-out view evaluation, turntables and mesh export."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import HARD_SIGMA, Dataset
from .geometry.io import read_obj, write_obj
from .geometry.mesh import Mesh, face_uvs
from .networks import ModelState, infer_model
from .render import Camera, composite, rasterize

PSNR_CAP = 99.0


# ------------------------------------------------------------------ metrics
def miou(pred, gt, threshold: float = 0.5) -> float:
    """|A & B| / |A | B| on thresholded masks; 1 when both are empty."""
    a = np.asarray(pred) > threshold
    b = np.asarray(gt) > threshold
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def quantize(image) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0)


def mse(a, b) -> float:
    """Mean squared error of the 8-bit quantized images, in [0, 1] units."""
    d = (quantize(a) - quantize(b)) / 255.0
    return float(np.mean(d * d))


def psnr(a, b) -> float:
    m = mse(a, b)
    if m == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * math.log10(1.0 / m)))


def ssim(a, b) -> float:
    """Gaussian-window SSIM (11 taps, sigma 1.5, k1 0.01, k2 0.03) on 8-bit values."""
    from skimage.metrics import structural_similarity

    qa, qb = quantize(a), quantize(b)
    if qa.ndim == 2:
        qa, qb = qa[None], qb[None]
    return float(structural_similarity(qa, qb, data_range=255.0, channel_axis=0, gaussian_weights=True, sigma=1.5,
                                       use_sample_covariance=False, K1=0.01, K2=0.03))


def _angle_diff(a: float, b: float) -> float:
    return abs((a - b + math.pi) % (2 * math.pi) - math.pi)


@dataclass
class MetricsReport:
    original_miou: float
    novel: dict  # offset -> metric -> mean
    camera_error: dict
    marker_mse: dict
    samples: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)

    @property
    def novel_mse(self) -> float:
        return float(np.mean([v["mse"] for v in self.novel.values()])) if self.novel else float("nan")


# ------------------------------------------------------------- evaluation
def infer_batches(model: ModelState, images: np.ndarray, batch_size: int, use_multi_template: bool):
    """Run inference in fixed-size chunks (normalization uses per-call batch statistics)."""
    verts, texs, codes = [], [], []
    for start in range(0, len(images), batch_size):
        m = infer_model(model, ad.Tensor(images[start : start + batch_size]), use_multi_template)
        verts.append(m.vertices.data)
        texs.append(m.texture.data)
        codes.append(m.camera_code.data)
    return np.concatenate(verts), np.concatenate(texs), np.concatenate(codes)


def render_hard(vertices, faces, texture, fuv, cam: Camera, H: int, W: int, sigma: float):
    res = rasterize(vertices, faces, texture, fuv, cam, H, W, sigma=sigma)
    return composite(res).data, res.alpha.data


def evaluate_predictions(vertices: np.ndarray, textures: np.ndarray, codes: np.ndarray | None, faces: np.ndarray, fuv: np.ndarray,
                         data: Dataset, fov: float, sigma: float, use_predicted_camera: bool = True) -> MetricsReport:
    """Score per-training-sample predictions (vertices, textures, camera codes) against the dataset."""
    train, ev = data.train, data.eval
    H, W = train.images.shape[2:]
    index = {sid: i for i, sid in enumerate(train.ids)}
    samples = []
    ious, cam_err = [], {"azimuth": [], "elevation": [], "distance": []}
    for i, sid in enumerate(train.ids):
        gt_cam = train.cameras[i]
        cam = Camera.decode(codes[i], fov) if (use_predicted_camera and codes is not None) else gt_cam
        img, alpha = render_hard(vertices[i], faces, textures[i], fuv, cam, H, W, sigma)
        iou = miou(alpha, train.masks[i])
        ious.append(iou)
        row = {"id": sid, "view": "train", "iou": iou, "psnr": psnr(img, train.images[i]), "mse": mse(img, train.images[i])}
        if codes is not None:
            p, g = Camera.decode(codes[i], fov).values(), gt_cam.values()
            for k, a, b in zip(("azimuth", "elevation", "distance"), p, g):
                cam_err[k].append(_angle_diff(a, b) if k == "azimuth" else abs(a - b))
        samples.append(row)
    novel: dict = {}
    marker: dict = {}
    for j, sid in enumerate(ev.ids):
        if sid not in index:
            raise ValueError(f"eval view {sid}/{ev.views[j]} has no training sample")
        i = index[sid]
        img, alpha = render_hard(vertices[i], faces, textures[i], fuv, ev.cameras[j], H, W, sigma)
        row = {"id": sid, "view": ev.views[j], "iou": miou(alpha, ev.masks[j]), "psnr": psnr(img, ev.images[j]),
               "ssim": ssim(img, ev.images[j]), "mse": mse(img, ev.images[j])}
        region = ev.markers[j]
        if region.any():
            d = (quantize(img) - quantize(ev.images[j]))[:, region] / 255.0
            row["marker_mse"] = float(np.mean(d * d))
            marker.setdefault(ev.views[j], []).append(row["marker_mse"])
        novel.setdefault(ev.views[j], []).append(row)
        samples.append(row)
    novel_means = {v: {k: float(np.mean([r[k] for r in rows])) for k in ("iou", "psnr", "ssim", "mse")} for v, rows in novel.items()}
    return MetricsReport(
        original_miou=float(np.mean(ious)),
        novel=novel_means,
        camera_error={k: float(np.mean(v)) for k, v in cam_err.items() if v},
        marker_mse={k: float(np.mean(v)) for k, v in marker.items()},
        samples=samples,
    )


def evaluate(trainer, data: Dataset) -> MetricsReport:
    """Original view with the predicted camera; held-out views with ground-truth cameras."""
    if len(data.eval) == 0:
        raise ValueError("dataset has no held-out evaluation views")
    model, cfg = trainer.model, trainer.cfg
    verts, texs, codes = infer_batches(model, data.train.images, cfg.batch_size, cfg.use_multi_template)
    fuv = face_uvs(model.bank.chart, model.bank.faces)
    # score at the generator's near-hard sigma; the training sigma dilates silhouettes by a fraction of a pixel
    return evaluate_predictions(verts, texs, codes, model.bank.faces, fuv, data, model.config.fov, HARD_SIGMA)


# ------------------------------------------------------------ visualization
def render_turntable(model: ModelState, image: np.ndarray, n_views: int, sigma: float = 1e-4, use_multi_template: bool = False) -> np.ndarray:
    """(3, H, n_views * W) strip at equally spaced azimuths starting from the predicted camera."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    m = infer_model(model, ad.Tensor(np.asarray(image)[None]), use_multi_template)
    cam = m.camera(0)
    H, W = np.asarray(image).shape[1:]
    fuv = face_uvs(model.bank.chart, model.bank.faces)
    th = cam.values()[0]
    views = []
    for k in range(n_views):
        c = cam.with_azimuth(th + 2 * math.pi * k / n_views)
        views.append(render_hard(m.vertices.data[0], model.bank.faces, m.texture.data[0], fuv, c, H, W, sigma)[0])
    return np.concatenate(views, axis=2)


def export_textured_mesh(model: ModelState, image: np.ndarray, out_prefix: str | Path, use_multi_template: bool = False):
    """Write ``{prefix}.obj``, ``.mtl`` and ``_tex.png``; returns (obj path, predicted camera, inferred model)."""
    m = infer_model(model, ad.Tensor(np.asarray(image)[None]), use_multi_template)
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    obj = prefix.with_suffix(".obj")
    fuv = face_uvs(model.bank.chart, model.bank.faces)
    write_obj(obj, Mesh(m.vertices.data[0], model.bank.faces), fuv, m.texture.data[0])
    return obj, m.camera(0), m


def import_textured_mesh(path: str | Path):
    mesh, fuv, tex = read_obj(path)
    if fuv is None or tex is None:
        raise ValueError(f"{path}: OBJ has no texture coordinates or material")
    return mesh, fuv, tex
