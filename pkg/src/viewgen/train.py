"""Training configuration, optimizer, training loop and checkpoints."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .cycles import GAN_REAL_VARIANTS, CycleConfig, NetworkInferencer, rotation_cycle, sample_novel_camera, swap_partners, texture_swap_cycle
from .data import DataError, Dataset, ViewSet, load_dataset
from .geometry.io import load_bank
from .geometry.mesh import SphereChart
from .geometry.templates import TemplateBank
from .losses import (LossReport, LossWeights, camera_loss, deform_reg, gan_losses, keypoint_loss, laplacian_loss, perceptual,
                     recon_l1, silhouette_iou_batch, smoothness_loss)
from .networks import ModelState, NetConfig, discriminate, infer_model
from .render import DEFAULT_SIGMA, BatchRenderer, render_keypoints

CHECKPOINT_MAGIC = b"VGCKPT\x00\x00"
CHECKPOINT_VERSION = 1
CYCLE_NAMES = ("rotation", "texture")


class ConfigError(ValueError):
    pass


class NumericAbort(RuntimeError):
    def __init__(self, report: LossReport):
        bad = {k: v for k, v in report.components.items() if not math.isfinite(v)}
        super().__init__(f"non-finite loss at step {report.step}: {bad or report.components}")
        self.report = report


# ------------------------------------------------------------------ config
@dataclass
class TrainConfig:
    dataset: str = ""
    net: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    dod: int = 16
    epochs: int = 300
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    use_cycles: bool = False
    cycles: list = field(default_factory=lambda: list(CYCLE_NAMES))
    use_gan: bool = False
    gan_real_variant: str = "input_images"
    use_multi_template: bool = False
    reinfer_swap_geometry: bool = False
    render_size: int = 64
    sigma: float = DEFAULT_SIGMA
    bank: str = ""
    dtype: str = "float64"
    checkpoint_every: int = 0
    max_steps: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.dod not in (1, 4, 16, 64, 256, 1024):
            raise ConfigError(f"unsupported dod {self.dod}")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if self.gan_real_variant not in GAN_REAL_VARIANTS:
            raise ConfigError(f"gan_real_variant must be one of {GAN_REAL_VARIANTS}")
        if any(c not in CYCLE_NAMES for c in self.cycles):
            raise ConfigError(f"cycles must be drawn from {CYCLE_NAMES}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if "dod" in self.net and self.net["dod"] != self.dod:
            raise ConfigError("net.dod disagrees with dod")
        if self.use_cycles and "texture" in self.cycles and self.batch_size < 2:
            raise ConfigError("texture-swap cycle needs batch_size >= 2")
        try:
            self.net_config()
            self.loss_weights()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def net_config(self) -> NetConfig:
        cfg = NetConfig.desk(**{**self.net, "dod": self.dod})
        cfg.validate()
        if cfg.image_size != self.render_size:
            raise ValueError(f"net image_size {cfg.image_size} != render_size {self.render_size}")
        return cfg

    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.weights)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    @classmethod
    def full(cls, **kw) -> "TrainConfig":
        """Full-scale schedule: lr 1e-4, 1200 epochs, batch 16, 256px."""
        base = dict(lr=1e-4, epochs=1200, batch_size=16, render_size=256,
                    net={"image_size": 256, "levels": 7, "width_scale": 1, "texture_size": 256, "backbone_feature_dim": 200, "disc_levels": 7})
        base.update(kw)
        return cls(**base)

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Single-core preset: 64px, width scale 8, 300 epochs."""
        base = dict(lr=1e-3, epochs=300, batch_size=16, render_size=64)
        base.update(kw)
        return cls(**base)


# --------------------------------------------------------------- optimizer
class Adam:
    def __init__(self, named: list[tuple[str, ad.Tensor]], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(named)
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.t = 0

    def step(self, names: list[str] | None = None) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in names if names is not None else self.params:
            p = self.params[k]
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def baseline_losses(model: ModelState, renderer: BatchRenderer, kp_indices: np.ndarray, batch: ViewSet, x: ad.Tensor,
                    use_multi_template: bool, with_smooth: bool = False):
    """Unweighted baseline terms for one batch plus the inference and render they came from."""
    cams = batch.cameras
    inferred = infer_model(model, x, use_multi_template)
    images, alphas = renderer(inferred.vertices, inferred.texture, cams)
    terms: dict[str, ad.Tensor] = {}
    terms["recon"] = recon_l1(images, x)
    terms["perceptual"] = perceptual(images, x)
    terms["silhouette"] = silhouette_iou_batch(alphas, ad.Tensor(batch.masks.astype(np.float64)))
    terms["camera"] = camera_loss(inferred.camera_code, ad.Tensor(batch.camera_codes()))
    kp_pred = ad.stack([render_keypoints(inferred.vertices[n], kp_indices, c) for n, c in enumerate(cams)])
    kp_loss, any_visible = keypoint_loss(kp_pred, ad.Tensor(batch.keypoints), batch.visibility)
    terms["keypoint"] = kp_loss
    terms["deform"] = deform_reg(inferred.offsets)
    terms["laplacian"] = laplacian_loss(inferred.vertices, model.bank.faces)
    if with_smooth:
        terms["smooth"] = smoothness_loss(inferred.vertices, model.bank.faces)
    return terms, inferred, images, any_visible


def weighted_total(terms: dict[str, ad.Tensor], lam: dict[str, float]) -> ad.Tensor:
    total = ad.Tensor(0.0)
    for k, t in terms.items():
        total = total + lam[k] * t
    return total


# ---------------------------------------------------------------- training
@dataclass
class Trainer:
    cfg: TrainConfig
    model: ModelState
    gen_opt: Adam
    disc_opt: Adam
    renderer: BatchRenderer
    kp_indices: np.ndarray
    shuffle_rng: np.random.Generator
    cycle_rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0
    epoch_state: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: TrainConfig, bank: TemplateBank, kp_indices) -> "Trainer":
        set_dtype(cfg)
        net = cfg.net_config()
        if net.n_templates != bank.n:
            net.n_templates = bank.n
        model = ModelState.create(net, bank, cfg.seed)
        gen = Adam([(n, t) for n, t in model.named_parameters() if not n.startswith("disc/")], cfg.lr)
        disc = Adam([(n, t) for n, t in model.named_parameters() if n.startswith("disc/")], cfg.lr)
        renderer = BatchRenderer.for_chart(bank.faces, bank.chart, cfg.render_size, cfg.render_size, cfg.sigma)
        seq = np.random.SeedSequence(cfg.seed)
        s_shuffle, s_cycle = seq.spawn(2)
        t = cls(cfg, model, gen, disc, renderer, np.asarray(kp_indices, dtype=np.int64),
                np.random.default_rng(s_shuffle), np.random.default_rng(s_cycle))
        t.epoch_state = t.shuffle_rng.bit_generator.state
        return t

    # ------------------------------------------------------------- step
    def train_step(self, batch: ViewSet) -> LossReport:
        cfg, model = self.cfg, self.model
        w = cfg.loss_weights()
        lam = w.as_dict()
        model.zero_grad()
        x = ad.Tensor(batch.images)
        x.tag = "input"
        cams = batch.cameras
        terms, inferred, images, any_visible = baseline_losses(model, self.renderer, self.kp_indices, batch, x,
                                                              cfg.use_multi_template, lam["smooth"] > 0)

        fakes = None
        if cfg.use_cycles or cfg.use_gan:
            inf = NetworkInferencer(model, cfg.use_multi_template)
            first = (inferred.vertices, inferred.texture)
            novel_cams = [sample_novel_camera(c, self.cycle_rng) for c in cams]
            if cfg.use_cycles and "rotation" in cfg.cycles:
                fakes, _, terms["rotcyc"] = rotation_cycle(x, cams, inf, self.renderer, novel_cams, w.perceptual, first)
            if cfg.use_cycles and "texture" in cfg.cycles:
                partner = swap_partners(x.shape[0], self.cycle_rng)
                ccfg = CycleConfig(cfg.gan_real_variant, cfg.reinfer_swap_geometry)
                _, _, terms["texcyc"] = texture_swap_cycle(x, cams, inf, self.renderer, partner, w.perceptual, first, ccfg)
            if cfg.use_gan and fakes is None:
                fakes, _ = self.renderer(inferred.vertices, inferred.texture, novel_cams)

        d_loss_value = None
        if cfg.use_gan:
            if cfg.gan_real_variant == "input_images":
                real = x
                if real.tag != "input":
                    raise RuntimeError("rendered pixels entered the real pool")
            else:
                real = images.detach()
                real.tag = "render"
            d_real = discriminate(model, real.detach())
            d_fake = discriminate(model, fakes.detach())
            d_loss, _ = gan_losses(d_real, d_fake)
            d_loss_value = float(d_loss.item())
            if math.isfinite(d_loss_value):
                d_loss.backward()
                self.disc_opt.step()
            model.disc.zero_grad()
            _, g_loss = gan_losses(discriminate(model, real.detach()), discriminate(model, fakes))
            terms["gan"] = g_loss

        total = weighted_total(terms, lam)
        report = LossReport(self.step, {k: float(t.item()) for k, t in terms.items()}, {k: lam[k] for k in terms})
        if not any_visible:
            report.flags.append("no_visible_keypoints")
        if d_loss_value is not None:
            report.components["gan_d"] = d_loss_value
        if not all(math.isfinite(v) for v in report.components.values()):
            raise NumericAbort(report)
        total.backward()
        model.disc.zero_grad()
        self.gen_opt.step()
        model.zero_grad()
        self.step += 1
        return report

    # ----------------------------------------------------------- batches
    def _epoch_batches(self, n: int) -> list[np.ndarray]:
        perm = self.shuffle_rng.permutation(n)
        bs = self.cfg.batch_size
        batches = [perm[i : i + bs] for i in range(0, n, bs)]
        if len(batches) > 1 and len(batches[-1]) < 2:
            batches[-2] = np.concatenate([batches[-2], batches[-1]])
            batches.pop()
        return batches

    def run(self, data: ViewSet, log_path: Path | None = None, ckpt_dir: Path | None = None, max_steps: int | None = None) -> list[LossReport]:
        """Train until ``cfg.epochs`` (or ``max_steps`` total steps); append reports to ``log_path``."""
        reports = []
        limit = max_steps if max_steps else (self.cfg.max_steps or None)
        log = open(log_path, "a") if log_path else None
        try:
            while self.epoch < self.cfg.epochs:
                self.shuffle_rng.bit_generator.state = self.epoch_state
                batches = self._epoch_batches(len(data))
                while self.batch_in_epoch < len(batches):
                    if limit is not None and self.step >= limit:
                        return reports
                    rep = self.train_step(data.subset(batches[self.batch_in_epoch]))
                    self.batch_in_epoch += 1
                    reports.append(rep)
                    if log:
                        log.write(rep.to_json() + "\n")
                        log.flush()
                    if ckpt_dir and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                        save_checkpoint(self, ckpt_dir / f"step_{self.step:07d}.bin")
                self.epoch += 1
                self.batch_in_epoch = 0
                self.epoch_state = self.shuffle_rng.bit_generator.state
        finally:
            if log:
                log.close()
        return reports


def set_dtype(cfg: TrainConfig) -> None:
    ad.set_default_dtype(np.float32 if cfg.dtype == "float32" else np.float64)


def load_template_bank(cfg: TrainConfig) -> TemplateBank:
    if cfg.bank:
        return load_bank(cfg.bank)
    return TemplateBank.sphere(3)


def train(cfg: TrainConfig, out_dir: str | Path, resume: str | Path | None = None, data: Dataset | None = None,
          max_steps: int | None = None) -> Trainer:
    """Full training run writing ``log.jsonl`` and ``final.bin`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = data or load_dataset(cfg.dataset)
    if len(data.train) == 0:
        raise DataError("empty dataset")
    if abs(cfg.net_config().fov - data.manifest.fov) > 1e-12:
        raise ConfigError(f"net fov {cfg.net_config().fov} differs from the dataset fov {data.manifest.fov}")
    if resume:
        trainer = load_checkpoint(resume)
        if trainer.cfg.as_dict() != cfg.as_dict():
            raise ConfigError("resume config differs from the checkpoint's config")
    else:
        trainer = Trainer.create(cfg, load_template_bank(cfg), data.manifest.keypoint_indices)
    trainer.run(data.train, out / "log.jsonl", out, max_steps)
    save_checkpoint(trainer, out / "final.bin")
    return trainer


# ------------------------------------------------------------- checkpoints
def _records(trainer: Trainer) -> list[tuple[str, np.ndarray]]:
    bank = trainer.model.bank
    recs = [(f"param/{n}", t.data) for n, t in trainer.model.named_parameters()]
    for opt_name, opt in (("gen", trainer.gen_opt), ("disc", trainer.disc_opt)):
        recs += [(f"adam.{opt_name}.m/{k}", v) for k, v in opt.m.items()]
        recs += [(f"adam.{opt_name}.v/{k}", v) for k, v in opt.v.items()]
    recs += [("bank/faces", bank.faces), ("bank/directions", bank.chart.directions), ("bank/vertices", bank.vertices),
             ("bank/scales", bank.scales), ("kp_indices", trainer.kp_indices)]
    return recs


def _meta(trainer: Trainer) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "step": trainer.step,
        "epoch": trainer.epoch,
        "batch_in_epoch": trainer.batch_in_epoch,
        "config": trainer.cfg.as_dict(),
        "net": trainer.model.config.as_dict(),
        "bank_names": list(trainer.model.bank.names),
        "epoch_rng": trainer.epoch_state,
        "shuffle_rng": trainer.shuffle_rng.bit_generator.state,
        "cycle_rng": trainer.cycle_rng.bit_generator.state,
        "adam_t": [trainer.gen_opt.t, trainer.disc_opt.t],
    }


def encode_checkpoint(meta: dict, records: list[tuple[str, np.ndarray]]) -> bytes:
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)), blob, struct.pack("<I", len(records))]
    for name, arr in records:
        a = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, meta_len = struct.unpack_from("<IQ", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 20
    meta = json.loads(blob[pos : pos + meta_len])
    pos += meta_len
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + nl].decode()
        pos += nl
        (rank,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        records[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    return meta, records


def save_checkpoint(trainer: Trainer, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(_meta(trainer), _records(trainer)))


def load_checkpoint(path: str | Path) -> Trainer:
    meta, rec = decode_checkpoint(Path(path).read_bytes())
    cfg = TrainConfig.from_dict(meta["config"])
    set_dtype(cfg)
    chart = SphereChart(rec["bank/directions"])
    bank = TemplateBank(rec["bank/faces"].astype(np.int64), chart, rec["bank/vertices"], rec["bank/scales"], tuple(meta["bank_names"]))
    trainer = Trainer.create(cfg, bank, rec["kp_indices"].astype(np.int64))
    net = NetConfig(**meta["net"])
    if net != trainer.model.config:
        raise ValueError("checkpoint network config does not match its training config")
    dtype = ad.default_dtype()
    for n, t in trainer.model.named_parameters():
        t.data = rec[f"param/{n}"].astype(dtype)
    for opt_name, opt in (("gen", trainer.gen_opt), ("disc", trainer.disc_opt)):
        for k in opt.m:
            opt.m[k] = rec[f"adam.{opt_name}.m/{k}"].astype(dtype)
            opt.v[k] = rec[f"adam.{opt_name}.v/{k}"].astype(dtype)
    trainer.gen_opt.t, trainer.disc_opt.t = meta["adam_t"]
    trainer.step, trainer.epoch, trainer.batch_in_epoch = meta["step"], meta["epoch"], meta["batch_in_epoch"]
    trainer.epoch_state = meta["epoch_rng"]
    trainer.shuffle_rng.bit_generator.state = meta["shuffle_rng"]
    trainer.cycle_rng.bit_generator.state = meta["cycle_rng"]
    return trainer
