"""Encoder / decoder networks and the composite inference pipeline."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry.mesh import Mesh, mirror_permutation
from .geometry.templates import ALLOWED_DOD, TemplateBank, blend_templates, dod_side, sample_deformation, symmetrize_offsets, symmetrize_texture
from .render import Camera

FULL_ENCODER = (32, 64, 128, 256, 512, 512, 512)
FULL_TEXTURE_DECODER = (1024, 1024, 1024, 512, 256, 128, 32)
FULL_DEFORM_DECODER = (512, 512, 256, 128)
SLOPE = 0.2


@dataclass
class NetConfig:
    image_size: int = 64
    levels: int = 5
    width_scale: int = 8
    kernel: int = 5
    decoder_kernel: int = 3
    dod: int = 16
    texture_size: int = 64
    backbone_feature_dim: int = 200
    n_templates: int = 1
    max_offset_frac: float = 0.35
    disc_levels: int = 3
    fov: float = math.radians(50.0)
    init_distance: float = 2.6

    @classmethod
    def full(cls, **kw) -> "NetConfig":
        base = dict(image_size=256, levels=7, width_scale=1, texture_size=256, backbone_feature_dim=200, disc_levels=7)
        base.update(kw)
        return cls(**base)

    @classmethod
    def desk(cls, **kw) -> "NetConfig":
        base = dict(image_size=64, levels=5, width_scale=8, texture_size=64, backbone_feature_dim=25, disc_levels=3)
        base.update(kw)
        return cls(**base)

    def validate(self) -> None:
        if self.dod not in ALLOWED_DOD:
            raise ValueError(f"unsupported degree of deformation {self.dod}; choose from {ALLOWED_DOD}")
        if not 1 <= self.levels <= len(FULL_ENCODER):
            raise ValueError(f"levels must be in [1, {len(FULL_ENCODER)}]")
        if self.image_size % (2 ** self.levels):
            raise ValueError(f"image size {self.image_size} not divisible by 2^{self.levels}")
        if self.texture_size != self.image_size:
            raise ValueError("texture_size must equal image_size (decoder mirrors the encoder)")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")
        if self.n_templates < 1:
            raise ValueError("need at least one template")

    def _scaled(self, widths) -> tuple[int, ...]:
        return tuple(max(1, w // self.width_scale) for w in widths)

    @property
    def encoder_filters(self) -> tuple[int, ...]:
        return self._scaled(FULL_ENCODER[: self.levels])

    @property
    def texture_decoder_filters(self) -> tuple[int, ...]:
        return self._scaled(FULL_TEXTURE_DECODER[len(FULL_TEXTURE_DECODER) - self.levels :])

    @property
    def bottleneck(self) -> int:
        return self.image_size // 2 ** self.levels

    def deform_decoder_filters(self, dod: int | None = None) -> tuple[int, ...]:
        side = dod_side(self.dod if dod is None else dod)
        n = 1 + max(0, int(round(math.log2(side / self.bottleneck)))) if side >= self.bottleneck else 1
        widths = list(FULL_DEFORM_DECODER)
        while len(widths) < n:
            widths.append(max(widths[-1] // 2, 8))
        return self._scaled(widths[:n])

    def as_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ layers
def _conv_params(ps: ad.ParameterSet, name: str, cin: int, cout: int, k: int, rng) -> None:
    std = math.sqrt(2.0 / (cin * k * k))
    ps.add(f"{name}.w", rng.standard_normal((cout, cin, k, k)) * std)
    ps.add(f"{name}.b", np.zeros(cout))


def _norm_params(ps: ad.ParameterSet, name: str, c: int) -> None:
    ps.add(f"{name}.gamma", np.ones(c))
    ps.add(f"{name}.beta", np.zeros(c))


def _linear_params(ps: ad.ParameterSet, name: str, fin: int, fout: int, rng, bias=None) -> None:
    ps.add(f"{name}.w", rng.standard_normal((fout, fin)) * math.sqrt(1.0 / fin))
    ps.add(f"{name}.b", np.zeros(fout) if bias is None else np.asarray(bias, dtype=np.float64))


def _cbl(ps, name, x, stride, pad):
    y = ad.conv2d(x, ps[f"{name}.w"], ps[f"{name}.b"], stride=stride, pad=pad)
    y = ad.norm_layer(y, ps[f"{name}.gamma"], ps[f"{name}.beta"])
    return ad.leaky_relu(y, SLOPE)


def _upsample(x):
    return ad.bilinear_resize(x, 2 * x.shape[2], 2 * x.shape[3])


def _build_encoder(ps, prefix, widths, kernel, rng, cin=3):
    for i, w in enumerate(widths):
        _conv_params(ps, f"{prefix}{i}", cin, w, kernel, rng)
        _norm_params(ps, f"{prefix}{i}", w)
        cin = w


def _run_encoder(ps, prefix, x, n, kernel):
    feats = []
    for i in range(n):
        x = _cbl(ps, f"{prefix}{i}", x, 2, kernel // 2)
        feats.append(x)
    return feats


# ------------------------------------------------------------------- model
@dataclass
class InferredModel:
    vertices: ad.Tensor  # (N, V, 3), blend + offsets
    texture: ad.Tensor  # (N, 3, T, T)
    camera_code: ad.Tensor  # (N, 4): sin, cos, elevation, distance
    weights: ad.Tensor  # (N, n) simplex
    offsets: ad.Tensor  # (N, V, 3)
    deformation: ad.Tensor  # (N, 3, s, s)
    faces: np.ndarray
    fov: float

    def __len__(self) -> int:
        return self.vertices.shape[0]

    def camera(self, i: int = 0) -> Camera:
        return Camera.decode(self.camera_code.data[i], self.fov)

    def mesh(self, i: int = 0) -> Mesh:
        return Mesh(self.vertices.data[i], self.faces)


@dataclass
class ModelState:
    """All trainable parameters plus the template bank they act on."""

    config: NetConfig
    bank: TemplateBank
    encoder: ad.ParameterSet = field(default_factory=ad.ParameterSet)
    texture: ad.ParameterSet = field(default_factory=ad.ParameterSet)
    deform: ad.ParameterSet = field(default_factory=ad.ParameterSet)
    pose: ad.ParameterSet = field(default_factory=ad.ParameterSet)
    disc: ad.ParameterSet = field(default_factory=ad.ParameterSet)
    scales: ad.ParameterSet = field(default_factory=ad.ParameterSet)

    GROUPS = ("encoder", "texture", "deform", "pose", "disc", "scales")

    @classmethod
    def create(cls, config: NetConfig, bank: TemplateBank, seed: int = 0) -> "ModelState":
        config.validate()
        if bank.n != config.n_templates:
            raise ValueError(f"config expects {config.n_templates} templates, bank has {bank.n}")
        rng = np.random.default_rng(seed)
        m = cls(config, bank)
        k = config.kernel
        enc = config.encoder_filters
        _build_encoder(m.encoder, "enc", enc, k, rng)

        skips = tuple(reversed(enc[:-1])) + (0,)
        cin = enc[-1]
        for i, (w, s) in enumerate(zip(config.texture_decoder_filters, skips)):
            _conv_params(m.texture, f"tex{i}", cin, w - s, config.decoder_kernel, rng)
            _norm_params(m.texture, f"tex{i}", w - s)
            cin = w
        _conv_params(m.texture, "tex_out", cin, 3, config.decoder_kernel, rng)

        cin = enc[-1]
        for i, w in enumerate(config.deform_decoder_filters()):
            _conv_params(m.deform, f"def{i}", cin, w, config.decoder_kernel, rng)
            _norm_params(m.deform, f"def{i}", w)
            cin = w
        _conv_params(m.deform, "def_out", cin, 3, config.decoder_kernel, rng)
        m.deform["def_out.w"].data *= 0.1

        _build_encoder(m.pose, "pose", enc, k, rng)
        flat = enc[-1] * config.bottleneck**2
        d = config.backbone_feature_dim
        _linear_params(m.pose, "feat", flat, d, rng)
        _linear_params(m.pose, "cam", d, 4, rng, bias=[0.0, 1.0, 0.0, _softplus_inv(config.init_distance)])
        _linear_params(m.pose, "tmpl", d, config.n_templates, rng)

        dw = enc[: config.disc_levels]
        _build_encoder(m.disc, "denc", dw, k, rng)
        cin = dw[-1]
        for i in range(config.disc_levels - 1, -1, -1):
            skip = dw[i - 1] if i > 0 else 0
            w = dw[i - 1] if i > 0 else dw[0]
            _conv_params(m.disc, f"ddec{i}", cin, w, config.decoder_kernel, rng)
            _norm_params(m.disc, f"ddec{i}", w)
            cin = w + skip
        _conv_params(m.disc, "dpix", cin, 1, config.decoder_kernel, rng)
        _linear_params(m.disc, "dglob", dw[-1], 1, rng)

        m.scales.add("raw", _softplus_inv(bank.scales))
        return m

    # -------------------------------------------------------------- access
    def groups(self) -> list[tuple[str, ad.ParameterSet]]:
        return [(g, getattr(self, g)) for g in self.GROUPS]

    def named_parameters(self, include_disc: bool = True) -> list[tuple[str, ad.Tensor]]:
        out = []
        for g, ps in self.groups():
            if g == "disc" and not include_disc:
                continue
            out.extend((f"{g}/{n}", t) for n, t in ps)
        return out

    def generator_parameters(self) -> list[ad.Tensor]:
        return [t for _, t in self.named_parameters(include_disc=False)]

    def discriminator_parameters(self) -> list[ad.Tensor]:
        return self.disc.tensors()

    def count(self, include_disc: bool = True) -> int:
        return sum(t.size for _, t in self.named_parameters(include_disc))

    def zero_grad(self) -> None:
        for _, ps in self.groups():
            ps.zero_grad()

    def template_scales(self) -> ad.Tensor:
        return ad.softplus(self.scales["raw"])

    def max_offset(self) -> float:
        return self.config.max_offset_frac * self.bank.bounding_radius()


def _softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


# ------------------------------------------------------------- operations
def _batch(image) -> ad.Tensor:
    x = ad.as_tensor(image)
    return ad.reshape(x, (1,) + x.shape) if x.ndim == 3 else x


def encode(model: ModelState, image) -> list[ad.Tensor]:
    """Feature pyramid; level i has spatial size H / 2^(i+1)."""
    cfg = model.config
    x = _batch(image)
    if x.shape[2] % 2**cfg.levels or x.shape[3] % 2**cfg.levels:
        raise ValueError(f"image {x.shape[2]}x{x.shape[3]} not divisible by 2^{cfg.levels}")
    return _run_encoder(model.encoder, "enc", x, cfg.levels, cfg.kernel)


def decode_texture(model: ModelState, pyramid: list[ad.Tensor]) -> ad.Tensor:
    """(N, 3, T, T) texture in [0, 1], mirror symmetric about u = 0.5."""
    ps, k = model.texture, model.config.decoder_kernel
    x = pyramid[-1]
    skips = list(reversed(pyramid[:-1]))
    for i in range(model.config.levels):
        x = _cbl(ps, f"tex{i}", _upsample(x), 1, k // 2)
        if i < len(skips):
            x = ad.concat([x, skips[i]], axis=1)
    x = ad.conv2d(x, ps["tex_out.w"], ps["tex_out.b"], stride=1, pad=k // 2)
    return symmetrize_texture(ad.sigmoid(x))


def decode_deformation(model: ModelState, pyramid: list[ad.Tensor], dod: int | None = None) -> ad.Tensor:
    """(N, 3, s, s) offset grid, s = sqrt(dod); bounded by max_offset and z-mirror symmetric."""
    cfg = model.config
    dod = cfg.dod if dod is None else dod
    side = dod_side(dod)
    if len(model.config.deform_decoder_filters(dod)) != sum(1 for n in model.deform.names() if n.endswith(".w")) - 1:
        raise ValueError(f"deformation decoder was built for dod={cfg.dod}, not {dod}")
    ps = model.deform
    x = pyramid[-1]
    if side < cfg.bottleneck:
        x = ad.avg_pool(x, cfg.bottleneck // side)
    for i in range(len(cfg.deform_decoder_filters(dod))):
        if i > 0:
            x = _upsample(x)
        x = _cbl(ps, f"def{i}", x, 1, cfg.decoder_kernel // 2)
    x = ad.conv2d(x, ps["def_out.w"], ps["def_out.b"], stride=1, pad=cfg.decoder_kernel // 2)
    return symmetrize_offsets(ad.tanh(x) * model.max_offset())


def predict_pose_and_weights(model: ModelState, image) -> tuple[ad.Tensor, ad.Tensor]:
    """Camera code (N, 4) = (sin az, cos az, elevation, distance) and template weights (N, n)."""
    cfg = model.config
    ps = model.pose
    feats = _run_encoder(ps, "pose", _batch(image), cfg.levels, cfg.kernel)[-1]
    flat = ad.reshape(feats, (feats.shape[0], -1))
    h = ad.leaky_relu(ad.linear(flat, ps["feat.w"], ps["feat.b"]), SLOPE)
    raw = ad.linear(h, ps["cam.w"], ps["cam.b"])
    sc = raw[:, 0:2]
    sc = sc / ad.reshape(ad.sqrt((sc * sc).sum(axis=1) + 1e-12), (-1, 1))
    elev = ad.reshape(ad.tanh(raw[:, 2]) * (math.pi / 2 - 1e-2), (-1, 1))
    dist = ad.reshape(ad.softplus(raw[:, 3]), (-1, 1))
    code = ad.concat([sc, elev, dist], axis=1)
    weights = ad.softmax(ad.linear(h, ps["tmpl.w"], ps["tmpl.b"]), axis=1)
    return code, weights


def infer_model(model: ModelState, image, use_multi_template: bool = True) -> InferredModel:
    """M(X), T(X), predicted camera and template weights for a batch (N, 3, H, W)."""
    x = _batch(image)
    pyramid = encode(model, x)
    texture = decode_texture(model, pyramid)
    grid = decode_deformation(model, pyramid)
    code, weights = predict_pose_and_weights(model, x)
    offsets = sample_deformation(grid, model.bank.chart)
    if model.bank.n == 1 or not use_multi_template:
        blend_w = ad.Tensor(np.eye(model.bank.n)[np.zeros(x.shape[0], dtype=np.int64)])
    else:
        blend_w = weights
    base = blend_templates(model.bank, blend_w, model.template_scales())
    return InferredModel(base + offsets, texture, code, weights, offsets, grid, model.bank.faces, model.config.fov)


def discriminate(model: ModelState, image) -> tuple[ad.Tensor, ad.Tensor]:
    """U-Net discriminator: global logits (N,) and pixel logits (N, H, W)."""
    cfg, ps, k = model.config, model.disc, model.config.kernel
    x = _batch(image)
    feats = _run_encoder(ps, "denc", x, cfg.disc_levels, k)
    bottleneck = feats[-1]
    pooled = bottleneck.mean(axis=(2, 3))
    glob = ad.reshape(ad.linear(pooled, ps["dglob.w"], ps["dglob.b"]), (-1,))
    y = bottleneck
    for i in range(cfg.disc_levels - 1, -1, -1):
        y = _cbl(ps, f"ddec{i}", _upsample(y), 1, cfg.decoder_kernel // 2)
        if i > 0:
            y = ad.concat([y, feats[i - 1]], axis=1)
    pix = ad.conv2d(y, ps["dpix.w"], ps["dpix.b"], stride=1, pad=cfg.decoder_kernel // 2)
    return glob, ad.reshape(pix, (pix.shape[0], pix.shape[2], pix.shape[3]))


def vertex_mirror(bank: TemplateBank) -> np.ndarray:
    return mirror_permutation(bank.chart.directions)


def infer_texture(model: ModelState, image) -> ad.Tensor:
    """T(X) alone."""
    return decode_texture(model, encode(model, image))
