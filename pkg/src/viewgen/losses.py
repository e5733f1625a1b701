"""Training objectives, loss weights and per-step loss reports."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .geometry.mesh import interior_edge_faces, laplacian_matrix, tensor_face_normals

IOU_EPS = 1e-6


@dataclass
class LossWeights:
    recon: float = 20.0
    perceptual: float = 0.5
    silhouette: float = 5.0
    camera: float = 1.0
    keypoint: float = 50.0
    deform: float = 2.5
    laplacian: float = 5.0
    smooth: float = 0.0
    gan: float = 0.5
    rotcyc: float = 1.0
    texcyc: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")

    BASELINE = ("recon", "perceptual", "silhouette", "camera", "keypoint", "deform", "laplacian", "smooth")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    step: int
    components: dict[str, float] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    @property
    def total(self) -> float:
        return float(sum(self.weights[k] * v for k, v in self.components.items() if k in self.weights))

    def to_json(self) -> str:
        body = {"step": self.step, "total": self.total, "components": self.components}
        if self.flags:
            body["flags"] = self.flags
        return json.dumps(body, sort_keys=True)


# ----------------------------------------------------------------- images
def _check_same(a: ad.Tensor, b: ad.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def recon_l1(image, target) -> ad.Tensor:
    a, b = ad.as_tensor(image), ad.as_tensor(target)
    _check_same(a, b, "recon_l1")
    return ad.absolute(a - b).mean()


def pyramid_extractor(image: ad.Tensor, levels: int = 3) -> list[ad.Tensor]:
    """Average-pool pyramid plus forward differences along x and y at every level."""
    x = ad.as_tensor(image)
    if x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    feats = []
    for level in range(levels):
        if level:
            if x.shape[2] % 2 or x.shape[3] % 2 or x.shape[2] < 2:
                break
            x = ad.avg_pool(x, 2)
        feats.append(x)
        if x.shape[3] > 1:
            feats.append(x[:, :, :, 1:] - x[:, :, :, :-1])
        if x.shape[2] > 1:
            feats.append(x[:, :, 1:, :] - x[:, :, :-1, :])
    return feats


def perceptual(image, target, extractor: Callable = pyramid_extractor) -> ad.Tensor:
    a, b = ad.as_tensor(image), ad.as_tensor(target)
    _check_same(a, b, "perceptual")
    total = ad.Tensor(0.0)
    for fa, fb in zip(extractor(a), extractor(b)):
        d = fa - fb
        total = total + (d * d).mean()
    return total


def silhouette_iou(mask, target) -> ad.Tensor:
    """1 - sum(S * S_r) / sum(S + S_r - S * S_r); 0 when both masks are (numerically) empty."""
    s, t = ad.as_tensor(mask), ad.as_tensor(target)
    _check_same(s, t, "silhouette_iou")
    inter = (s * t).sum()
    union = (s + t - s * t).sum()
    if float(union.item()) <= IOU_EPS:
        return ad.Tensor(0.0)
    return 1.0 - inter / union


def silhouette_iou_batch(mask, target) -> ad.Tensor:
    """Mean over the leading batch axis of per-sample silhouette_iou."""
    s, t = ad.as_tensor(mask), ad.as_tensor(target)
    _check_same(s, t, "silhouette_iou")
    n = s.shape[0]
    axes = tuple(range(1, s.ndim))
    inter = (s * t).sum(axis=axes)
    union = (s + t - s * t).sum(axis=axes)
    empty = union.data <= IOU_EPS
    safe = ad.where(empty, ad.Tensor(np.ones(n)), union)
    per = ad.where(empty, ad.Tensor(np.zeros(n)), 1.0 - inter / safe)
    return per.mean()


# ------------------------------------------------------------ mesh priors
def laplacian_loss(vertices, faces: np.ndarray) -> ad.Tensor:
    """Mean over vertices of |L v|^2 with the uniform Laplacian; batched (N, V, 3) allowed."""
    v = ad.as_tensor(vertices)
    lap = laplacian_matrix(faces, v.shape[-2])
    if v.ndim == 2:
        lv = ad.sparse_matmul(lap, v)
        return (lv * lv).sum(axis=1).mean()
    n, nv = v.shape[0], v.shape[1]
    flat = ad.reshape(ad.transpose(v, (1, 0, 2)), (nv, n * 3))
    lv = ad.sparse_matmul(lap, flat)
    return (lv * lv).sum() * (1.0 / (n * nv))


def smoothness_loss(vertices, faces: np.ndarray) -> ad.Tensor:
    """Mean over interior edges of 1 - cos(angle between adjacent face normals)."""
    pairs = interior_edge_faces(faces)
    v = ad.as_tensor(vertices)
    normals = tensor_face_normals(v, faces)
    if normals.ndim == 2:
        a, b = ad.take(normals, pairs[:, 0]), ad.take(normals, pairs[:, 1])
        return (1.0 - (a * b).sum(axis=1)).mean()
    a, b = normals[:, pairs[:, 0]], normals[:, pairs[:, 1]]
    return (1.0 - (a * b).sum(axis=2)).mean()


def deform_reg(offsets) -> ad.Tensor:
    """Mean per-vertex Euclidean norm of the offsets."""
    d = ad.as_tensor(offsets)
    return ad.norm(d, axis=-1).mean()


# ------------------------------------------------------------ supervision
def camera_loss(pred, gt) -> ad.Tensor:
    p, g = ad.as_tensor(pred), ad.as_tensor(gt)
    _check_same(p, g, "camera_loss")
    d = p - g
    return (d * d).mean()


def keypoint_loss(pred, gt, visible) -> tuple[ad.Tensor, bool]:
    """Mean squared NDC distance over visible keypoints; returns (loss, any_visible)."""
    p, g = ad.as_tensor(pred), ad.as_tensor(gt)
    _check_same(p, g, "keypoint_loss")
    vis = np.asarray(visible, dtype=bool).reshape(p.shape[:-1])
    count = int(vis.sum())
    if count == 0:
        return ad.Tensor(0.0), False
    d = (p - g) * ad.Tensor(vis[..., None].astype(np.float64))
    return (d * d).sum() * (1.0 / count), True


def combined_baseline(components: dict[str, float | ad.Tensor], weights: LossWeights):
    """sum_k lambda_k * component_k over the baseline terms present in ``components``."""
    w = weights.as_dict()
    total = 0.0
    for k in LossWeights.BASELINE:
        if k in components:
            total = total + w[k] * components[k]
    return total


# --------------------------------------------------------------------- GAN
def _bce_logits(logits: ad.Tensor, target: float) -> ad.Tensor:
    # target 1: softplus(-x); target 0: softplus(x)
    return ad.softplus(-logits if target == 1.0 else logits).mean()


def gan_losses(disc_real, disc_fake) -> tuple[ad.Tensor, ad.Tensor]:
    """Non-saturating BCE averaged over the global and pixel heads.

    ``disc_real`` / ``disc_fake`` are (global_logits, pixel_logits) pairs.
    Returns (d_loss, g_loss); the caller detaches fakes for the d step.
    """
    (gr, pr), (gf, pf) = disc_real, disc_fake
    d_glob = 0.5 * (_bce_logits(gr, 1.0) + _bce_logits(gf, 0.0))
    d_pix = 0.5 * (_bce_logits(pr, 1.0) + _bce_logits(pf, 0.0))
    g_loss = 0.5 * (_bce_logits(gf, 1.0) + _bce_logits(pf, 1.0))
    return 0.5 * (d_glob + d_pix), g_loss


LN2 = math.log(2.0)
