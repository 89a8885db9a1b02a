import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docforge import autodiff as ad
from docforge import docgen
from docforge import preprocess as pp


def run(style, pixels, question="what is the id?", dtype=np.float64, **kw):
    spec = pp.headered_spec(**kw) if style == pp.HEADERED else pp.padded_spec(**kw)
    t = ad.Tape(dtype)
    img = t.input(np.asarray(pixels, dtype=np.float64))
    return t, img, pp.preprocess(img, question, spec), spec


def test_headered_fit_arithmetic():
    # independent recomputation: scale = min(352/384, 256/256)
    s = min(352 / 384, 256 / 256)
    assert pp.fit_size((384, 256), (352, 256)) == (352, round(256 * s))
    spec = pp.headered_spec()
    assert spec.grid == (48, 32) and spec.body == (352, 256)
    _, _, out, _ = run(pp.HEADERED, np.full((384, 256, 3), 200))
    assert out.tensor.shape == (3, 384, 256)
    assert out.geometry.resized == (352, 235)
    # body grid extents are 32 x 44 patches
    assert (spec.body[1] // 8, spec.body[0] // 8) == (32, 44)


def test_constant_image_hits_std_guard():
    spec = pp.headered_spec(header_in_stats=False)
    t = ad.Tape(np.float64)
    img = t.input(np.full((384, 256, 3), 127.0))
    out = pp.preprocess(img, "what is the id?", spec)
    body = out.tensor.value[:, 32:, :235]
    # variance is zero; std guard keeps things finite and the body centred at 0
    assert np.all(np.isfinite(out.tensor.value))
    assert np.abs(body).max() == 0.0


def test_header_gradient_is_literal_zero():
    doc = docgen.make_dataset(1, 3)[0]
    t, img, out, _ = run(pp.HEADERED, doc.pixels)
    y = (out.tensor * out.tensor).sum()
    g = ad.gradient(t, y, [img])[img.id]
    assert np.any(g != 0)
    # header is a constant: the tensor's header band carries no dependence on img
    gc = ad.gradient(t, (out.tensor * out.header_mask).sum(), [img])[img.id]
    # only the shared statistics link header values to the image
    assert out.header_mask[:32].all() and not out.header_mask[32:].any()
    t2 = ad.Tape(np.float64)
    c = t2.input(out.canvas.value)
    m = ad.masked_assign(c, np.broadcast_to(out.header_mask, c.shape), 0.0)
    g2 = ad.gradient(t2, (m * m).sum(), [c])[c.id]
    assert np.all(g2[:, :32] == 0.0)
    assert gc.shape == img.value.shape


def test_padded_identity_and_fixed_stats():
    px = np.random.default_rng(0).integers(0, 256, size=(384, 256, 3))
    _, _, out, spec = run(pp.PADDED, px)
    expect = (px.transpose(2, 0, 1) / 255.0 - np.reshape(pp.IMAGENET_MEAN, (3, 1, 1))) / np.reshape(
        pp.IMAGENET_STD, (3, 1, 1)
    )
    np.testing.assert_allclose(out.tensor.value, expect, atol=1e-6)
    white = np.full((384, 256, 3), 255)
    _, _, out, _ = run(pp.PADDED, white)
    assert out.tensor.value[0, 0, 0] == pytest.approx((1.0 - 0.485) / 0.229)
    assert out.tensor.value[0, 0, 0] == pytest.approx(2.249, abs=1e-3)
    assert not out.header_mask.any()


def test_padded_side_bands_have_zero_gradient():
    px = np.random.default_rng(1).integers(0, 256, size=(384, 128, 3)).astype(float)
    t, img, out, _ = run(pp.PADDED, px, target=(384, 256))
    assert out.geometry.offset == (0, 64) and out.geometry.resized == (384, 128)
    v = out.tensor.value
    assert np.all(v[:, :, :64] == 0) and np.all(v[:, :, 192:] == 0)
    # finite-difference probe: output pad bands do not move when the image moves
    t2 = ad.Tape(np.float64)
    img2 = t2.input(px + 1e-3)
    v2 = pp.preprocess(img2, "", pp.padded_spec(target=(384, 256))).tensor.value
    assert np.array_equal(v2[:, :, :64], v[:, :, :64])
    with pytest.raises(ValueError):
        pp.padded_spec(target=(0, 256))


def test_zero_delta_matches_clean_bitwise_and_reference():
    doc = docgen.make_dataset(1, 4)[0]
    for style in (pp.HEADERED, pp.PADDED):
        spec = pp.headered_spec() if style == pp.HEADERED else pp.padded_spec()
        t = ad.Tape(np.float64)
        d = t.input(np.zeros(doc.pixels.shape))
        out = pp.preprocess(pp.map_perturbation(d, doc.pixels), "what is the date?", spec)
        _, _, clean, _ = run(style, doc.pixels, "what is the date?")
        assert np.array_equal(out.tensor.value, clean.tensor.value)
        ref = pp.reference_preprocess(doc.pixels, "what is the date?", spec)
        np.testing.assert_allclose(out.tensor.value, ref, atol=1e-5)


def test_map_perturbation_rejects_mismatch():
    t = ad.Tape(np.float64)
    d = t.input(np.zeros((10, 10, 3)))
    with pytest.raises(ValueError):
        pp.map_perturbation(d, np.zeros((10, 11, 3)))


def test_patch_perturbation_footprint():
    doc = docgen.make_dataset(1, 5)[0]
    delta = np.zeros(doc.pixels.shape)
    delta[300:340, 200:240] = -40.0
    spec = pp.padded_spec()
    base = pp.reference_preprocess(doc.pixels, "", spec)
    pert = pp.reference_preprocess((doc.pixels + delta).clip(0, 255).astype(np.uint8), "", spec)
    rows, cols = np.nonzero(np.any(base != pert, axis=0))
    geom = pp.Geometry((384, 256), (384, 256), (0, 0))
    r0, c0 = geom.to_canvas(300, 200)
    r1, c1 = geom.to_canvas(339, 239)
    assert rows.min() >= r0 - 1 and rows.max() <= r1 + 1
    assert cols.min() >= c0 - 1 and cols.max() <= c1 + 1

    # headered: the footprint scales with the fit, plus a one-pixel halo
    spec = pp.headered_spec(header_in_stats=False)
    t = ad.Tape(np.float64)
    d = t.input(delta)
    out = pp.preprocess(pp.map_perturbation(d, doc.pixels), "what is the id?", spec)
    canvas0 = pp.preprocess(ad.Tape(np.float64).input(doc.pixels.astype(float)), "what is the id?", spec).canvas.value
    rows, cols = np.nonzero(np.any(out.canvas.value != canvas0, axis=0))
    r0, c0 = out.geometry.to_canvas(300, 200)
    r1, c1 = out.geometry.to_canvas(339, 239)
    assert rows.min() >= np.floor(r0) - 1 and rows.max() <= np.ceil(r1) + 1
    assert cols.min() >= np.floor(c0) - 1 and cols.max() <= np.ceil(c1) + 1


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(docgen.QUESTIONS), st.booleans())
def test_differentiable_matches_reference(seed, question, in_stats):
    px = np.random.default_rng(seed).integers(0, 256, size=(384, 256, 3)).astype(np.uint8)
    for spec in (pp.headered_spec(header_in_stats=in_stats), pp.padded_spec()):
        t = ad.Tape(np.float64)
        out = pp.preprocess(t.input(px.astype(float)), question, spec)
        np.testing.assert_allclose(out.tensor.value, pp.reference_preprocess(px, question, spec), atol=1e-9)


def test_question_too_wide_rejected():
    with pytest.raises(ValueError, match="wider"):
        pp.render_header("x" * 40, 256, 32)


def test_pipeline_gradient_check_small():
    # a shrunken canvas keeps the finite-difference sweep cheap
    px = np.random.default_rng(2).integers(0, 256, size=(24, 16, 3))
    for spec in (
        pp.headered_spec(target=(24, 16), header_height=8, patch=8),
        pp.padded_spec(target=(16, 16), patch=8),
    ):
        t = ad.Tape(np.float64)
        img = t.input(px.astype(float))
        try:
            out = pp.preprocess(img, "", spec)
        except ValueError:
            continue
        w = np.random.default_rng(3).normal(size=out.tensor.shape)
        y = (ad.tanh(out.tensor) * w).sum()
        assert ad.check_gradient(t, y, [img], h=1e-5) <= 1e-4
