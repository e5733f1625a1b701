"""Rotation and texture-swap cycle consistency."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .losses import perceptual, recon_l1
from .networks import ModelState, infer_model, infer_texture
from .render import Camera

GAN_REAL_VARIANTS = ("input_images", "original_view_renders")


@dataclass
class CycleConfig:
    gan_real_variant: str = "input_images"
    reinfer_swap_geometry: bool = False  # alternative reading: second swap pass uses M(I) instead of M(X)

    def __post_init__(self):
        if self.gan_real_variant not in GAN_REAL_VARIANTS:
            raise ValueError(f"gan_real_variant must be one of {GAN_REAL_VARIANTS}")


class NetworkInferencer:
    """M(.) and T(.) backed by the trained networks."""

    def __init__(self, model: ModelState, use_multi_template: bool = True):
        self.model = model
        self.use_multi_template = use_multi_template

    def infer(self, images):
        m = infer_model(self.model, images, self.use_multi_template)
        return m.vertices, m.texture

    def texture(self, images):
        return infer_texture(self.model, images)


class OracleInferencer:
    """Returns the ground-truth mesh and texture of batch slot i, whatever image it is given."""

    def __init__(self, vertices: np.ndarray, textures: np.ndarray):
        self.vertices = ad.Tensor(vertices)
        self.textures = ad.Tensor(textures)

    def infer(self, images):
        return self.vertices, self.textures

    def texture(self, images):
        return self.textures


def sample_novel_camera(cam: Camera, rng: np.random.Generator) -> Camera:
    return Camera(float(rng.uniform(0.0, 2 * math.pi)), cam.elevation, cam.distance, cam.fov)


def _image_loss(x, y, lam_p: float):
    # equal-size samples: batch means equal the mean of per-sample means
    return recon_l1(x, y) + lam_p * perceptual(x, y)


def rotation_cycle(images, cams1: list[Camera], inferencer, renderer, novel_cams: list[Camera], lam_p: float = 0.5, first=None):
    """I1 = R(M(X), T(X), C2); X' = R(M(I1), T(I1), C1).

    ``first`` may carry an already computed (M(X), T(X)) pair.  Returns
    (I1, X', L_rotcyc).
    """
    x = ad.as_tensor(images)
    verts, tex = first if first is not None else inferencer.infer(x)
    novel, _ = renderer(verts, tex, novel_cams)
    verts2, tex2 = inferencer.infer(novel)
    back, _ = renderer(verts2, tex2, cams1)
    return novel, back, _image_loss(x, back, lam_p)


def swap_partners(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random involution over batch slots; with odd n one slot pairs with itself."""
    order = rng.permutation(n)
    partner = np.arange(n)
    for k in range(0, n - 1, 2):
        a, b = order[k], order[k + 1]
        partner[a], partner[b] = b, a
    return partner


def _take(t: ad.Tensor, idx: np.ndarray) -> ad.Tensor:
    return ad.take(t, idx)


def texture_swap_cycle(images, cams: list[Camera], inferencer, renderer, partner: np.ndarray, lam_p: float = 0.5,
                       first=None, cfg: CycleConfig | None = None):
    """I_i = R(M(X_i), T(X_p), C_i); X'_i = R(M(X_i), T(I_p), C_i) with p = partner[i].

    Returns (intermediates, reconstructions, L_texcyc); L_texcyc is the
    per-pair sum of both reconstruction terms averaged over pairs.
    """
    cfg = cfg or CycleConfig()
    x = ad.as_tensor(images)
    n = x.shape[0]
    partner = np.asarray(partner, dtype=np.int64)
    if not np.array_equal(partner[partner], np.arange(n)):
        raise ValueError("partner map must be an involution")
    verts, tex = first if first is not None else inferencer.infer(x)
    inter, _ = renderer(verts, _take(tex, partner), cams)
    if cfg.reinfer_swap_geometry:
        verts2, tex2 = inferencer.infer(inter)
    else:
        verts2, tex2 = verts, inferencer.texture(inter)
    recon, _ = renderer(verts2, _take(tex2, partner), cams)
    # 2 * mean over slots == sum of both terms per pair, averaged over pairs
    return inter, recon, _image_loss(x, recon, lam_p) * 2.0
