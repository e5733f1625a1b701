import math

import numpy as np
import pytest

from viewgen import autodiff as ad
from viewgen.geometry.mesh import icosphere
from viewgen.geometry.templates import TemplateBank, blend_templates, dod_side
from viewgen.losses import LossWeights
from viewgen.networks import (
    FULL_DEFORM_DECODER,
    FULL_ENCODER,
    FULL_TEXTURE_DECODER,
    ModelState,
    NetConfig,
    decode_deformation,
    decode_texture,
    discriminate,
    encode,
    infer_model,
    predict_pose_and_weights,
)
from viewgen.render import BatchRenderer
from viewgen.train import baseline_losses, weighted_total
from oracles import central_diff

BANK = TemplateBank.sphere(3)


def _model(seed=0, n_templates=1, **kw):
    cfg = NetConfig.desk(n_templates=n_templates, **kw)
    bank = BANK
    if n_templates > 1:
        ref = icosphere(3)
        bank = TemplateBank.from_reference(ref, [ref.vertices * (1 + 0.3 * k) for k in range(n_templates)])
    return ModelState.create(cfg, bank, seed)


def _images(rng, n=2, size=64):
    return rng.random((n, 3, size, size))


def test_full_preset_filter_tables():
    cfg = NetConfig.full()
    assert cfg.encoder_filters == FULL_ENCODER == (32, 64, 128, 256, 512, 512, 512)
    assert len(cfg.encoder_filters) == 7
    assert cfg.texture_decoder_filters == FULL_TEXTURE_DECODER
    # every decoder width except the last doubles its mirrored encoder width through the skip concat
    mirrored = tuple(reversed(FULL_ENCODER))[1:]
    for w, e in zip(FULL_TEXTURE_DECODER[:-1], mirrored):
        assert w >= 2 * e
    assert NetConfig.full(dod=256).deform_decoder_filters() == FULL_DEFORM_DECODER
    assert cfg.bottleneck == 2 and cfg.texture_size == 256 and cfg.backbone_feature_dim == 200


def test_desk_preset_values():
    cfg = NetConfig.desk()
    assert (cfg.image_size, cfg.levels, cfg.width_scale, cfg.texture_size) == (64, 5, 8, 64)
    assert cfg.encoder_filters == (4, 8, 16, 32, 64)


def test_full_scale_shapes_with_narrow_widths(rng):
    """Full-scale resolution and depth; widths divided so one forward pass fits a test budget."""
    cfg = NetConfig.full(width_scale=32, dod=256)
    m = ModelState.create(cfg, BANK, 0)
    x = ad.Tensor(rng.random((1, 3, 256, 256)))
    pyr = encode(m, x)
    assert [p.shape[2] for p in pyr] == [128, 64, 32, 16, 8, 4, 2]
    assert [p.shape[1] for p in pyr] == list(cfg.encoder_filters)
    assert decode_texture(m, pyr).shape == (1, 3, 256, 256)
    assert decode_deformation(m, pyr).shape == (1, 3, 16, 16)


@pytest.mark.parametrize("dod", [1, 4, 16, 64, 256, 1024])
def test_desk_deformation_sizes(dod, rng):
    m = _model(dod=dod)
    grid = decode_deformation(m, encode(m, ad.Tensor(_images(rng))))
    side = dod_side(dod)
    assert grid.shape == (2, 3, side, side)
    assert np.all(np.abs(grid.data) <= m.max_offset() + 1e-12)


def test_unsupported_dod():
    with pytest.raises(ValueError):
        NetConfig.desk(dod=8).validate()


def test_encode_examples(rng):
    m = _model()
    pyr = encode(m, ad.Tensor(np.zeros((1, 3, 64, 64))))
    for p in pyr:
        assert np.all(p.data == 0.0)
    pyr = encode(m, ad.Tensor(_images(rng)))
    assert [p.shape[2] for p in pyr] == [32, 16, 8, 4, 2]
    img = _images(rng, 1)
    twice = encode(m, ad.Tensor(np.concatenate([img, img])))
    for p in twice:
        np.testing.assert_array_equal(p.data[0], p.data[1])
    with pytest.raises(ValueError, match="divisible"):
        encode(m, ad.Tensor(np.zeros((1, 3, 60, 60))))


def test_texture_range_and_symmetry(rng):
    m = _model(seed=3)
    for name, t in m.texture:
        t.data = t.data * 5.0
    tex = decode_texture(m, encode(m, ad.Tensor(_images(rng)))).data
    assert tex.shape == (2, 3, 64, 64)
    assert np.all((tex >= 0) & (tex <= 1))
    np.testing.assert_array_equal(tex, tex[..., ::-1])


def test_pose_heads(rng):
    m = _model(n_templates=3)
    code, w = predict_pose_and_weights(m, ad.Tensor(_images(rng, 4)))
    np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(w.data >= 0)
    np.testing.assert_allclose(np.hypot(code.data[:, 0], code.data[:, 1]), 1.0, atol=1e-9)
    assert np.all(code.data[:, 3] > 0)
    assert np.all(np.abs(code.data[:, 2]) < math.pi / 2)
    _, w1 = predict_pose_and_weights(_model(), ad.Tensor(_images(rng, 3)))
    np.testing.assert_array_equal(w1.data, 1.0)


def test_infer_model_examples(rng):
    m = _model(n_templates=2)
    m.deform["def_out.w"].data[:] = 0.0
    m.deform["def_out.b"].data[:] = 0.0
    out = infer_model(m, ad.Tensor(_images(rng)), use_multi_template=True)
    base = blend_templates(m.bank, out.weights, m.template_scales()).data
    np.testing.assert_allclose(out.vertices.data, base, atol=1e-15)

    single = _model()
    single.deform["def_out.w"].data[:] = 0.0
    single.deform["def_out.b"].data[:] = 0.0
    out = infer_model(single, ad.Tensor(_images(rng, 1)))
    np.testing.assert_allclose(out.vertices.data[0], BANK.vertices[0], rtol=1e-14, atol=1e-15)

    for dod in (1, 64, 1024):
        mm = _model(dod=dod)
        assert infer_model(mm, ad.Tensor(_images(rng, 1))).vertices.shape == (1, BANK.n_vertices, 3)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_inferred_model_invariants(seed):
    rng = np.random.default_rng(seed)
    m = _model(seed=seed, n_templates=2)
    out = infer_model(m, ad.Tensor(_images(rng)))
    w = out.weights.data
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(out.texture.data, out.texture.data[..., ::-1])
    g = out.deformation.data
    np.testing.assert_allclose(g[:, :2], g[:, :2, :, ::-1], atol=1e-15)
    np.testing.assert_allclose(g[:, 2], -g[:, 2, :, ::-1], atol=1e-15)
    for _, t in m.named_parameters():
        assert np.all(np.isfinite(t.data))


def test_discriminator_examples(rng):
    m = _model()
    img = _images(rng, 2)
    glob, pix = discriminate(m, ad.Tensor(img))
    assert glob.shape == (2,) and pix.shape == (2, 64, 64)
    g2, p2 = discriminate(m, ad.Tensor(img))
    assert glob.data.tobytes() == g2.data.tobytes() and pix.data.tobytes() == p2.data.tobytes()
    m.disc["denc0.w"].data[:] = 0.0
    a = discriminate(m, ad.Tensor(img))
    b = discriminate(m, ad.Tensor(img + 0.3))
    np.testing.assert_array_equal(a[0].data, b[0].data)
    np.testing.assert_array_equal(a[1].data, b[1].data)


def test_desk_parameter_budget():
    m = _model()
    assert m.count() < 2_000_000


def test_parameter_order_is_deterministic():
    a, b = _model(seed=4), _model(seed=4)
    assert [n for n, _ in a.named_parameters()] == [n for n, _ in b.named_parameters()]
    for (_, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
        assert x.data.tobytes() == y.data.tobytes()


def test_end_to_end_gradient(small_data):
    """Total baseline loss vs central differences on ten random parameter entries."""
    m = _model(seed=5)
    batch = small_data.train.subset(np.array([0, 1]))
    renderer = BatchRenderer.for_chart(BANK.faces, BANK.chart, 64, 64)
    lam = LossWeights().as_dict()
    kp = np.asarray(small_data.manifest.keypoint_indices)

    def total():
        terms, *_ = baseline_losses(m, renderer, kp, batch, ad.Tensor(batch.images), False)
        return weighted_total(terms, lam)

    m.zero_grad()
    total().backward()
    named = [(n, t) for n, t in m.named_parameters(include_disc=False)]
    rng = np.random.default_rng(0)
    worst = 0.0
    checked = 0
    while checked < 10:
        name, t = named[rng.integers(len(named))]
        idx = np.unravel_index(rng.integers(t.data.size), t.data.shape)
        a = 0.0 if t.grad is None else float(t.grad[idx])
        n = central_diff(lambda: total().item(), t.data, idx, 1e-5)
        # biases ahead of a norm layer have an exactly cancelled gradient; the floor absorbs FD round-off there
        worst = max(worst, abs(a - n) / max(abs(a), abs(n), 1e-6))
        checked += 1
    assert worst < 1e-2
