"""Soft differentiable rasterizer with hard z-tested texture colour.

Colour at a covered pixel comes from the front-most face (screen-space
barycentric interpolation of chart UVs, bilinear texture lookup).  Coverage
is softened only in the silhouette: alpha = 1 - prod_k (1 - a_k) over the K
faces nearest the pixel, a_k = 1 inside and exp(-d^2 / sigma) outside, with d
the NDC distance to the face boundary.  Both paths have analytic backward
kernels; camera gradients come from building the projection out of autodiff
ops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from . import autodiff as ad
from .geometry.mesh import SphereChart, face_uvs

BACKGROUND = (1.0, 1.0, 1.0)
DEFAULT_SIGMA = 1e-4
DEFAULT_K = 8
# beyond d^2 / sigma = 40 the face term exp(-40) ~ 4e-18 is below double resolution of (1 - a)
_CUTOFF = 40.0


class RenderError(ValueError):
    pass


@dataclass
class Camera:
    """Look-at-origin camera; angles in radians. Fields may be floats or scalar Tensors."""

    azimuth: float | ad.Tensor
    elevation: float | ad.Tensor
    distance: float | ad.Tensor
    fov: float = math.radians(50.0)

    def values(self) -> tuple[float, float, float]:
        return tuple(float(ad.as_tensor(x).item()) for x in (self.azimuth, self.elevation, self.distance))

    def eye(self) -> np.ndarray:
        th, ph, rho = self.values()
        return rho * np.array([math.cos(ph) * math.cos(th), math.sin(ph), math.cos(ph) * math.sin(th)])

    def with_azimuth(self, azimuth) -> "Camera":
        return Camera(azimuth, self.elevation, self.distance, self.fov)

    def encode(self) -> np.ndarray:
        """(sin az, cos az, elevation, distance)."""
        th, ph, rho = self.values()
        return np.array([math.sin(th), math.cos(th), ph, rho])

    @classmethod
    def decode(cls, code, fov: float) -> "Camera":
        s, c, ph, rho = (float(x) for x in np.asarray(code).reshape(-1)[:4])
        ph = float(np.clip(ph, -math.pi / 2 + 1e-3, math.pi / 2 - 1e-3))
        return cls(math.atan2(s, c), ph, max(rho, 1e-3), fov)

    def as_dict(self) -> dict:
        th, ph, rho = self.values()
        return {"azimuth": th, "elevation": ph, "distance": rho, "fov": float(self.fov)}


def _camera_frame(cam: Camera):
    th, ph = ad.as_tensor(cam.azimuth), ad.as_tensor(cam.elevation)
    ct, st, cp, sp = ad.cos(th), ad.sin(th), ad.cos(ph), ad.sin(ph)
    zero = ad.Tensor(0.0)
    right = ad.stack([st, zero, -ct])
    up = ad.stack([-(sp * ct), cp, -(sp * st)])
    back = ad.stack([cp * ct, sp, cp * st])
    return right, up, back


def camera_transform(cam: Camera) -> np.ndarray:
    """4x4 view-projection matrix (OpenGL clip-space convention, aspect 1)."""
    right, up, back = (x.data for x in _camera_frame(cam))
    eye = cam.eye()
    view = np.eye(4)
    view[0, :3], view[1, :3], view[2, :3] = right, up, back
    view[:3, 3] = -view[:3, :3] @ eye
    rho = cam.values()[2]
    near, far = 0.1 * rho, 10.0 * rho
    t = math.tan(cam.fov / 2)
    proj = np.zeros((4, 4))
    proj[0, 0] = 1.0 / t
    proj[1, 1] = 1.0 / t
    proj[2, 2] = -(far + near) / (far - near)
    proj[2, 3] = -2.0 * far * near / (far - near)
    proj[3, 2] = -1.0
    return proj @ view


def project(vertices, cam: Camera):
    """World (V, 3) -> NDC xy Tensor (V, 2) and view depth (V,) array.

    Differentiable w.r.t. vertices and any Tensor-valued camera field.
    """
    p = ad.as_tensor(vertices)
    right, up, back = _camera_frame(cam)
    rho = ad.as_tensor(cam.distance)
    xc = (p * right).sum(axis=1)
    yc = (p * up).sum(axis=1)
    depth = rho - (p * back).sum(axis=1)
    near = 0.1 * float(rho.item())
    if p.shape[0] and float(depth.data.min()) < near:
        raise RenderError(f"vertex behind the near plane (depth {float(depth.data.min()):.4g} < {near:.4g})")
    scale = 1.0 / math.tan(cam.fov / 2)
    inv = scale / depth
    ndc = ad.stack([xc * inv, yc * inv], axis=1)
    return ndc, depth.data.copy()


def render_keypoints(vertices, kp_indices, cam: Camera) -> ad.Tensor:
    idx = np.asarray(kp_indices, dtype=np.int64).reshape(-1)
    v = ad.as_tensor(vertices)
    if idx.size and (idx.min() < 0 or idx.max() >= v.shape[0]):
        raise RenderError(f"keypoint index out of range for {v.shape[0]} vertices")
    if idx.size == 0:
        return ad.Tensor(np.zeros((0, 2)))
    ndc, _ = project(ad.take(v, idx), cam)
    return ndc


# ------------------------------------------------------------------ kernels
@numba.njit(cache=True)
def _seg_dist2(px, py, sx, sy, tx, ty):
    ex, ey = tx - sx, ty - sy
    ll = ex * ex + ey * ey
    tau = 0.0
    if ll > 0.0:
        tau = ((px - sx) * ex + (py - sy) * ey) / ll
        if tau < 0.0:
            tau = 0.0
        elif tau > 1.0:
            tau = 1.0
    qx, qy = sx + tau * ex, sy + tau * ey
    dx, dy = px - qx, py - qy
    return dx * dx + dy * dy, tau, dx, dy


@numba.njit(cache=True)
def _tex_axis(coord, extent, wrap):
    if extent == 1:
        return 0, 0, 0.0, 0.0
    span = extent - 1
    pos = coord * span
    if wrap:
        dpos = float(span)
        if pos < 0.0 or pos > span:
            pos = pos - span * math.floor(pos / span)
    else:
        dpos = float(span)
        if pos < 0.0:
            pos, dpos = 0.0, 0.0
        elif pos > span:
            pos, dpos = float(span), 0.0
    lo = int(math.floor(pos))
    if lo > extent - 2:
        lo = extent - 2
    return lo, lo + 1, pos - lo, dpos


@numba.njit(cache=True)
def _raster_forward(ndc, depth, faces, fuv, tex, H, W, sigma, K, bg):
    C, Ht, Wt = tex.shape
    image = np.empty((C, H, W))
    alpha = np.zeros((H, W))
    face_index = -np.ones((H, W), dtype=np.int64)
    bary = np.zeros((3, H, W))
    zbuf = np.full((H, W), np.inf)
    knn_face = -np.ones((H, W, K), dtype=np.int64)
    knn_d2 = np.full((H, W, K), np.inf)
    reach = math.sqrt(_CUTOFF * sigma)
    order = np.empty(K, dtype=np.int64)
    for f in range(faces.shape[0]):
        ia, ib, ic = faces[f, 0], faces[f, 1], faces[f, 2]
        ax, ay = ndc[ia, 0], ndc[ia, 1]
        bx, by = ndc[ib, 0], ndc[ib, 1]
        cx, cy = ndc[ic, 0], ndc[ic, 1]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        xmin = min(ax, bx, cx) - reach
        xmax = max(ax, bx, cx) + reach
        ymin = min(ay, by, cy) - reach
        ymax = max(ay, by, cy) + reach
        j0 = max(0, int(math.floor((xmin + 1.0) * W / 2.0 - 0.5)))
        j1 = min(W - 1, int(math.ceil((xmax + 1.0) * W / 2.0 - 0.5)))
        i0 = max(0, int(math.floor((1.0 - ymax) * H / 2.0 - 0.5)))
        i1 = min(H - 1, int(math.ceil((1.0 - ymin) * H / 2.0 - 0.5)))
        for i in range(i0, i1 + 1):
            py = 1.0 - (2.0 * i + 1.0) / H
            for j in range(j0, j1 + 1):
                px = -1.0 + (2.0 * j + 1.0) / W
                inside = False
                if area != 0.0:
                    w0 = ((cx - bx) * (py - by) - (cy - by) * (px - bx)) / area
                    w1 = ((ax - cx) * (py - cy) - (ay - cy) * (px - cx)) / area
                    w2 = 1.0 - w0 - w1
                    if w0 >= 0.0 and w1 >= 0.0 and w2 >= 0.0:
                        inside = True
                if inside:
                    d2 = 0.0
                    z = w0 * depth[ia] + w1 * depth[ib] + w2 * depth[ic]
                    if z < zbuf[i, j]:
                        zbuf[i, j] = z
                        face_index[i, j] = f
                        bary[0, i, j] = w0
                        bary[1, i, j] = w1
                        bary[2, i, j] = w2
                else:
                    d2, _, _, _ = _seg_dist2(px, py, ax, ay, bx, by)
                    e2, _, _, _ = _seg_dist2(px, py, bx, by, cx, cy)
                    e3, _, _, _ = _seg_dist2(px, py, cx, cy, ax, ay)
                    d2 = min(d2, e2, e3)
                    if d2 > _CUTOFF * sigma:
                        continue
                # insert (d2, f) into the sorted K-list
                if d2 < knn_d2[i, j, K - 1]:
                    k = K - 1
                    while k > 0 and knn_d2[i, j, k - 1] > d2:
                        knn_d2[i, j, k] = knn_d2[i, j, k - 1]
                        knn_face[i, j, k] = knn_face[i, j, k - 1]
                        k -= 1
                    knn_d2[i, j, k] = d2
                    knn_face[i, j, k] = f
    for i in range(H):
        for j in range(W):
            # product in ascending face-index order for a fixed reduction order
            n_k = 0
            while n_k < K and knn_face[i, j, n_k] >= 0:
                n_k += 1
            for k in range(n_k):
                order[k] = k
            for a in range(1, n_k):
                b = a
                while b > 0 and knn_face[i, j, order[b - 1]] > knn_face[i, j, order[b]]:
                    order[b - 1], order[b] = order[b], order[b - 1]
                    b -= 1
            keep = 1.0
            for a in range(n_k):
                keep *= 1.0 - math.exp(-knn_d2[i, j, order[a]] / sigma)
            alpha[i, j] = 1.0 - keep
            f = face_index[i, j]
            if f < 0:
                for ch in range(C):
                    image[ch, i, j] = bg[ch]
                continue
            u = 0.0
            v = 0.0
            for c in range(3):
                u += bary[c, i, j] * fuv[f, c, 0]
                v += bary[c, i, j] * fuv[f, c, 1]
            x0, x1, fx, _ = _tex_axis(u, Wt, True)
            y0, y1, fy, _ = _tex_axis(v, Ht, False)
            for ch in range(C):
                image[ch, i, j] = (
                    (1 - fy) * ((1 - fx) * tex[ch, y0, x0] + fx * tex[ch, y0, x1])
                    + fy * ((1 - fx) * tex[ch, y1, x0] + fx * tex[ch, y1, x1])
                )
    return image, alpha, face_index, bary, zbuf, knn_face, knn_d2


@numba.njit(cache=True)
def _raster_backward(ndc, faces, fuv, tex, face_index, bary, knn_face, knn_d2, sigma, g_image, g_alpha, need_tex):
    C, Ht, Wt = tex.shape
    H, W = face_index.shape
    K = knn_face.shape[2]
    g_ndc = np.zeros(ndc.shape)
    g_tex = np.zeros(tex.shape)
    for i in range(H):
        py = 1.0 - (2.0 * i + 1.0) / H
        for j in range(W):
            px = -1.0 + (2.0 * j + 1.0) / W
            f = face_index[i, j]
            if f >= 0:
                ia, ib, ic = faces[f, 0], faces[f, 1], faces[f, 2]
                w0, w1, w2 = bary[0, i, j], bary[1, i, j], bary[2, i, j]
                u = w0 * fuv[f, 0, 0] + w1 * fuv[f, 1, 0] + w2 * fuv[f, 2, 0]
                v = w0 * fuv[f, 0, 1] + w1 * fuv[f, 1, 1] + w2 * fuv[f, 2, 1]
                x0, x1, fx, dxdu = _tex_axis(u, Wt, True)
                y0, y1, fy, dydv = _tex_axis(v, Ht, False)
                gu = 0.0
                gv = 0.0
                for ch in range(C):
                    g = g_image[ch, i, j]
                    if g == 0.0:
                        continue
                    t00, t01 = tex[ch, y0, x0], tex[ch, y0, x1]
                    t10, t11 = tex[ch, y1, x0], tex[ch, y1, x1]
                    gu += g * ((1 - fy) * (t01 - t00) + fy * (t11 - t10)) * dxdu
                    gv += g * ((1 - fx) * (t10 - t00) + fx * (t11 - t01)) * dydv
                    if need_tex:
                        g_tex[ch, y0, x0] += g * (1 - fy) * (1 - fx)
                        g_tex[ch, y0, x1] += g * (1 - fy) * fx
                        g_tex[ch, y1, x0] += g * fy * (1 - fx)
                        g_tex[ch, y1, x1] += g * fy * fx
                if gu != 0.0 or gv != 0.0:
                    ax, ay = ndc[ia, 0], ndc[ia, 1]
                    bx, by = ndc[ib, 0], ndc[ib, 1]
                    cx, cy = ndc[ic, 0], ndc[ic, 1]
                    area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
                    gam0 = gu * fuv[f, 0, 0] + gv * fuv[f, 0, 1]
                    gam1 = gu * fuv[f, 1, 0] + gv * fuv[f, 1, 1]
                    gam2 = gu * fuv[f, 2, 0] + gv * fuv[f, 2, 1]
                    gbar = w0 * gam0 + w1 * gam1 + w2 * gam2
                    k0 = (gam0 - gbar) / area
                    k1 = (gam1 - gbar) / area
                    k2 = (gam2 - gbar) / area
                    # E0 = E(p; b, c): d/db = (cy - py, px - cx), d/dc = (py - by, bx - px)
                    g_ndc[ib, 0] += k0 * (cy - py)
                    g_ndc[ib, 1] += k0 * (px - cx)
                    g_ndc[ic, 0] += k0 * (py - by)
                    g_ndc[ic, 1] += k0 * (bx - px)
                    # E1 = E(p; c, a)
                    g_ndc[ic, 0] += k1 * (ay - py)
                    g_ndc[ic, 1] += k1 * (px - ax)
                    g_ndc[ia, 0] += k1 * (py - cy)
                    g_ndc[ia, 1] += k1 * (cx - px)
                    # E2 = E(p; a, b)
                    g_ndc[ia, 0] += k2 * (by - py)
                    g_ndc[ia, 1] += k2 * (px - bx)
                    g_ndc[ib, 0] += k2 * (py - ay)
                    g_ndc[ib, 1] += k2 * (ax - px)
            ga = g_alpha[i, j]
            if ga == 0.0:
                continue
            for k in range(K):
                fk = knn_face[i, j, k]
                if fk < 0:
                    break
                d2 = knn_d2[i, j, k]
                if d2 <= 0.0:
                    continue
                others = 1.0
                for m in range(K):
                    if m != k and knn_face[i, j, m] >= 0:
                        others *= 1.0 - math.exp(-knn_d2[i, j, m] / sigma)
                a = math.exp(-d2 / sigma)
                gd2 = ga * others * (-a / sigma)
                if gd2 == 0.0:
                    continue
                # nearest edge, same scan order as the forward pass
                best = np.inf
                bs, bt, btau, bdx, bdy = 0, 0, 0.0, 0.0, 0.0
                for e in range(3):
                    s = faces[fk, e]
                    t = faces[fk, (e + 1) % 3]
                    dd, tau, dx, dy = _seg_dist2(px, py, ndc[s, 0], ndc[s, 1], ndc[t, 0], ndc[t, 1])
                    if dd < best:
                        best, bs, bt, btau, bdx, bdy = dd, s, t, tau, dx, dy
                g_ndc[bs, 0] += gd2 * (-2.0 * bdx * (1.0 - btau))
                g_ndc[bs, 1] += gd2 * (-2.0 * bdy * (1.0 - btau))
                g_ndc[bt, 0] += gd2 * (-2.0 * bdx * btau)
                g_ndc[bt, 1] += gd2 * (-2.0 * bdy * btau)
    return g_ndc, g_tex


# ---------------------------------------------------------------- public API
@dataclass
class RenderResult:
    image: ad.Tensor  # (3, H, W)
    alpha: ad.Tensor  # (H, W)
    face_index: np.ndarray
    barycentric: np.ndarray
    depth: np.ndarray
    aux: dict | None = field(default=None, repr=False)

    @property
    def mask(self) -> np.ndarray:
        return self.face_index >= 0


def rasterize_ndc(ndc, depth: np.ndarray, faces: np.ndarray, face_uv: np.ndarray, texture, H: int, W: int,
                  sigma: float = DEFAULT_SIGMA, K: int = DEFAULT_K, background=BACKGROUND) -> RenderResult:
    """Rasterize already-projected vertices; ``ndc`` and ``texture`` may be Tensors."""
    if not sigma > 0:
        raise RenderError(f"sigma must be positive, got {sigma}")
    if K < 1:
        raise RenderError(f"K must be >= 1, got {K}")
    ndc_t = ad.as_tensor(ndc)
    tex_t = ad.as_tensor(texture)
    faces = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3)
    fuv = np.ascontiguousarray(face_uv, dtype=np.float64).reshape(-1, 3, 2)
    nd = np.ascontiguousarray(ndc_t.data, dtype=np.float64).reshape(-1, 2)
    tx = np.ascontiguousarray(tex_t.data, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    image, alpha, face_index, bary, zbuf, knn_face, knn_d2 = _raster_forward(
        nd, np.ascontiguousarray(depth, dtype=np.float64), faces, fuv, tx, int(H), int(W), float(sigma), int(K), bg
    )
    aux = dict(ndc=nd, faces=faces, fuv=fuv, tex=tx, face_index=face_index, bary=bary,
               knn_face=knn_face, knn_d2=knn_d2, sigma=float(sigma))
    def backward_pair(g_image, g_alpha):
        g_ndc, g_tex = _raster_backward(nd, faces, fuv, tx, face_index, bary, knn_face, knn_d2, float(sigma),
                                        np.ascontiguousarray(g_image, dtype=np.float64),
                                        np.ascontiguousarray(g_alpha, dtype=np.float64), tex_t.requires_grad)
        return g_ndc.astype(ndc_t.data.dtype).reshape(ndc_t.shape), g_tex.astype(tex_t.data.dtype)

    # image and alpha are two outputs of one kernel; the joint node receives both grads
    joint = ad._make(np.concatenate([image.reshape(-1), alpha.reshape(-1)]), (ndc_t, tex_t),
                     lambda g: backward_pair(g[: image.size].reshape(image.shape), g[image.size:].reshape(alpha.shape)))
    n_img = image.size
    img_t = ad.reshape(ad.getitem(joint, slice(0, n_img)), image.shape) if joint.requires_grad else ad.Tensor(image)
    alp_t = ad.reshape(ad.getitem(joint, slice(n_img, None)), alpha.shape) if joint.requires_grad else ad.Tensor(alpha)
    aux["backward"] = backward_pair
    return RenderResult(img_t, alp_t, face_index, bary, zbuf, aux)


def rasterize(vertices, faces: np.ndarray, texture, chart: SphereChart | np.ndarray, cam: Camera, H: int, W: int,
              sigma: float = DEFAULT_SIGMA, K: int = DEFAULT_K, background=BACKGROUND) -> RenderResult:
    """Project and rasterize a textured mesh; ``chart`` is a SphereChart or precomputed (F, 3, 2) face UVs."""
    fuv = face_uvs(chart, faces) if isinstance(chart, SphereChart) else chart
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces.size == 0:
        tex = np.asarray(ad.as_tensor(texture).data)
        img = np.broadcast_to(np.asarray(background, dtype=np.float64)[:, None, None], (tex.shape[0], H, W)).copy()
        return RenderResult(ad.Tensor(img), ad.Tensor(np.zeros((H, W))), -np.ones((H, W), dtype=np.int64),
                            np.zeros((3, H, W)), np.full((H, W), np.inf), {"empty": True})
    ndc, depth = project(vertices, cam)
    return rasterize_ndc(ndc, depth, faces, fuv, texture, H, W, sigma, K, background)


def rasterize_backward(result: RenderResult, grad_image: np.ndarray, grad_alpha: np.ndarray):
    """Raw kernel gradients (d/d ndc (V, 2), d/d texture) for given output cotangents."""
    if result.aux is None or "backward" not in result.aux:
        raise RenderError("render result carries no retained forward state")
    return result.aux["backward"](grad_image, grad_alpha)


def composite(result: RenderResult, background=BACKGROUND) -> ad.Tensor:
    """alpha * image + (1 - alpha) * background."""
    bg = ad.Tensor(np.asarray(background, dtype=np.float64).reshape(-1, 1, 1))
    a = ad.reshape(result.alpha, (1,) + result.alpha.shape)
    return result.image * a + bg * (1.0 - a)


def render_batch(vertices, faces: np.ndarray, textures, face_uv: np.ndarray, cameras, H: int, W: int,
                 sigma: float = DEFAULT_SIGMA, K: int = DEFAULT_K, background=BACKGROUND):
    """Composited images (N, 3, H, W), soft alphas (N, H, W) and per-sample results for batched inputs."""
    v, t = ad.as_tensor(vertices), ad.as_tensor(textures)
    images, alphas, results = [], [], []
    for n, cam in enumerate(cameras):
        r = rasterize(v[n], faces, t[n], face_uv, cam, H, W, sigma, K, background)
        images.append(composite(r, background))
        alphas.append(r.alpha)
        results.append(r)
    out_img, out_alpha = ad.stack(images), ad.stack(alphas)
    out_img.tag = "render"
    return out_img, out_alpha, results


@dataclass
class BatchRenderer:
    """Fixed topology and render settings; call with (vertices, textures, cameras)."""

    faces: np.ndarray
    face_uv: np.ndarray
    height: int
    width: int
    sigma: float = DEFAULT_SIGMA
    K: int = DEFAULT_K

    @classmethod
    def for_chart(cls, faces: np.ndarray, chart: SphereChart, height: int, width: int, sigma: float = DEFAULT_SIGMA, K: int = DEFAULT_K):
        return cls(faces, face_uvs(chart, faces), height, width, sigma, K)

    def __call__(self, vertices, textures, cameras):
        img, alpha, _ = render_batch(vertices, self.faces, textures, self.face_uv, cameras, self.height, self.width, self.sigma, self.K)
        return img, alpha
