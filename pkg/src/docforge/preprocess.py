"""Differentiable preprocessing pipelines and their frozen reference twins.

Two styles are supported:

* ``headered``: aspect-preserving rescale into the body grid, the question
  rendered into a constant header band on top, sample-wise standardization.
* ``padded``: aspect-preserving resize into the target canvas, fixed
  per-channel normalization, symmetric zero padding.

The differentiable versions operate on :class:`~docforge.autodiff.Tensor`
images of shape (H, W, 3) in raw 0..255 units and return (3, H', W') tensors.
The ``reference_*`` functions take uint8 arrays, use an independent gather
based bilinear implementation, and never touch the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import font

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

HEADERED = "headered"
PADDED = "padded"


@dataclass(frozen=True)
class PreprocessSpec:
    style: str = HEADERED
    target: tuple = (384, 256)  # full canvas (H, W)
    patch: int = 8
    header_height: int = 32
    normalization: str = "samplewise"  # or "fixed"
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD
    header_in_stats: bool = True
    std_guard: float = 1e-6
    pad_value: float = 0.0  # normalized units, fills the body right of the fitted document

    def __post_init__(self):
        h, w = self.target
        if h <= 0 or w <= 0:
            raise ValueError(f"degenerate target extents {self.target}")
        if h % self.patch or w % self.patch:
            raise ValueError(f"patch size {self.patch} does not divide target {self.target}")
        if self.style == HEADERED:
            if not 0 < self.header_height < h:
                raise ValueError("header height must lie strictly inside the target height")
            if self.header_height % self.patch:
                raise ValueError("header height must be a whole number of patches")
        elif self.style != PADDED:
            raise ValueError(f"unknown style {self.style!r}")
        if self.normalization not in ("samplewise", "fixed"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if min(self.std) <= 0:
            raise ValueError("std components must be positive")

    @property
    def body(self):
        """(H, W) of the region the document is fitted into."""
        h, w = self.target
        return (h - self.header_height, w) if self.style == HEADERED else (h, w)

    @property
    def grid(self):
        h, w = self.target
        return h // self.patch, w // self.patch


def headered_spec(**kw):
    return PreprocessSpec(style=HEADERED, normalization="samplewise", **kw)


def padded_spec(**kw):
    return PreprocessSpec(style=PADDED, normalization="fixed", **kw)


@dataclass(frozen=True)
class Geometry:
    """Maps raw document coordinates to canvas coordinates."""

    source: tuple  # raw (H, W)
    resized: tuple  # (h, w) after the aspect-preserving fit
    offset: tuple  # (top, left) of the resized image inside the canvas

    @property
    def scale(self):
        return (self.resized[0] / self.source[0], self.resized[1] / self.source[1])

    def to_canvas(self, row, col):
        """Canvas position of the raw pixel centre (row, col), half-pixel convention."""
        sy, sx = self.scale
        return ((row + 0.5) * sy - 0.5 + self.offset[0], (col + 0.5) * sx - 0.5 + self.offset[1])


@dataclass
class PreprocessOutput:
    tensor: ad.Tensor  # (3, H, W)
    header_mask: np.ndarray  # (H, W) bool
    geometry: Geometry
    canvas: ad.Tensor | None = field(default=None, repr=False)  # pre-normalization, post-header


def fit_size(src, box):
    """Aspect-preserving fit of ``src`` (H, W) inside ``box`` (H, W)."""
    s = min(box[0] / src[0], box[1] / src[1])
    h = min(box[0], max(1, int(round(src[0] * s))))
    w = min(box[1], max(1, int(round(src[1] * s))))
    return h, w


def render_header(question, width, height, scale=2):
    """Question band as a (height, width) uint8 array, black on white."""
    band = np.full((height, width), 255, dtype=np.uint8)
    tw = font.text_width(question, scale)
    th = font.GLYPH_H * scale
    if tw + 8 > width:
        raise ValueError(f"question {question!r} is wider than the canvas")
    font.draw_text(band, question, 8 if tw + 16 <= width else (width - tw) // 2, (height - th) // 2, scale)
    return band


def map_perturbation(delta, image):
    """x + delta in raw pixel space; ``image`` is a constant (H, W, 3) array."""
    image = np.asarray(image)
    if tuple(delta.shape) != image.shape:
        raise ValueError(f"perturbation extents {delta.shape} do not match image {image.shape}")
    return delta + image.astype(delta.tape.dtype)


def _standardize(canvas, spec, stats_mask=None):
    """Sample-wise standardization; statistics over ``stats_mask`` pixels (all if None)."""
    if stats_mask is None:
        mu = canvas.mean()
        centred = canvas - mu
        var = (centred * centred).mean()
    else:
        m = np.broadcast_to(stats_mask, canvas.shape).astype(np.float64)
        n = m.sum()
        mu = (canvas * m).sum() * (1.0 / n)
        centred = (canvas - mu) * m
        var = (centred * centred).sum() * (1.0 / n)
    std = ad.sqrt(ad.maximum(var, spec.std_guard ** 2))
    return (canvas - mu) / std


def preprocess_headered(image, question, spec: PreprocessSpec = None) -> PreprocessOutput:
    spec = spec or headered_spec()
    if spec.style != HEADERED:
        raise ValueError("spec style is not headered")
    H, W = image.shape[:2]
    bh, bw = spec.body
    hh = spec.header_height
    header = render_header(question, bw, hh)

    chw = ad.transpose(image, (2, 0, 1))
    h, w = fit_size((H, W), (bh, bw))
    body = chw if (h, w) == (H, W) else ad.resize_bilinear(chw, (h, w))
    canvas = ad.pad(body, ((0, 0), (hh, bh - h), (0, bw - w)))

    mask = np.zeros(spec.target, dtype=bool)
    mask[:hh] = True
    canvas = ad.masked_assign(canvas, np.broadcast_to(mask, (3,) + spec.target), _header_canvas(header, spec))
    doc = np.zeros(spec.target, dtype=bool)
    doc[hh : hh + h, :w] = True
    if spec.normalization == "samplewise":
        out = _standardize(canvas, spec, (doc | mask) if spec.header_in_stats else doc)
    else:
        out = _fixed(canvas, spec)
    pad = ~(doc | mask)
    if pad.any():
        out = ad.masked_assign(out, np.broadcast_to(pad, out.shape), spec.pad_value)
    geom = Geometry((H, W), (h, w), (hh, 0))
    return PreprocessOutput(out, mask, geom, canvas)


def _header_canvas(header, spec):
    full = np.zeros((3,) + spec.target)
    full[:, : spec.header_height, :] = header
    return full


def _fixed(canvas, spec):
    mean = np.asarray(spec.mean).reshape(3, 1, 1) * 255.0
    std = np.asarray(spec.std).reshape(3, 1, 1) * 255.0
    return (canvas - mean) * (1.0 / std)


def preprocess_padded(image, spec: PreprocessSpec = None) -> PreprocessOutput:
    spec = spec or padded_spec()
    if spec.style != PADDED:
        raise ValueError("spec style is not padded")
    H, W = image.shape[:2]
    th, tw = spec.target
    chw = ad.transpose(image, (2, 0, 1))
    h, w = fit_size((H, W), (th, tw))
    x = chw if (h, w) == (H, W) else ad.resize_bilinear(chw, (h, w))
    x = _fixed(x, spec) if spec.normalization == "fixed" else _standardize(x, spec)
    top, left = (th - h) // 2, (tw - w) // 2
    x = ad.pad(x, ((0, 0), (top, th - h - top), (left, tw - w - left)), value=0.0)
    return PreprocessOutput(x, np.zeros(spec.target, dtype=bool), Geometry((H, W), (h, w), (top, left)))


def preprocess(image, question, spec: PreprocessSpec) -> PreprocessOutput:
    if spec.style == HEADERED:
        return preprocess_headered(image, question, spec)
    return preprocess_padded(image, spec)


# ------------------------------------------------------ array fast path
# Tape-free helpers used to build training batches.  They follow the
# differentiable pipeline step by step (same interpolation matrices, same
# statistics), split so the resized body can be cached and translated.


def fit_body(pixels, spec: PreprocessSpec):
    """Resized (3, h, w) float32 body plus its Geometry; no tape."""
    img = np.asarray(pixels, dtype=np.float32).transpose(2, 0, 1)
    H, W = img.shape[1:]
    box = spec.body
    h, w = fit_size((H, W), box)
    if (h, w) != (H, W):
        Ry = ad.interp_matrix(h, H, np.float32)
        Rx = ad.interp_matrix(w, W, np.float32)
        img = np.matmul(np.matmul(Ry, np.ascontiguousarray(img)), np.ascontiguousarray(Rx.T))
    if spec.style == HEADERED:
        offset = (spec.header_height, 0)
    else:
        offset = ((box[0] - h) // 2, (box[1] - w) // 2)
    return img, Geometry((H, W), (h, w), offset)


_HEADERS: dict = {}


def _header_cached(question, width, height):
    key = (question, width, height)
    if key not in _HEADERS:
        _HEADERS[key] = render_header(question, width, height).astype(np.float32)
    return _HEADERS[key]


def compose_canvas(body, question, spec: PreprocessSpec, geometry: Geometry):
    """Header, normalization and padding around a fitted body; float32 (3, H, W)."""
    h, w = body.shape[1:]
    top, left = geometry.offset
    th, tw = spec.target
    doc = np.zeros(spec.target, dtype=bool)
    doc[top : top + h, left : left + w] = True
    canvas = np.zeros((3, th, tw), dtype=np.float32)
    canvas[:, top : top + h, left : left + w] = body
    keep = doc.copy()
    if spec.style == HEADERED:
        hh = spec.header_height
        canvas[:, :hh] = _header_cached(question, tw, hh)
        keep[:hh] = True
    if spec.normalization == "fixed":
        mean = np.asarray(spec.mean, dtype=np.float32).reshape(3, 1, 1) * 255.0
        std = np.asarray(spec.std, dtype=np.float32).reshape(3, 1, 1) * 255.0
        out = (canvas - mean) / std
    else:
        stats = keep if (spec.style == HEADERED and spec.header_in_stats) else doc
        # everything outside ``keep`` is still zero, so plain sums over the
        # selected rows see exactly the statistics pixels
        sel = canvas if stats is keep else canvas[:, top : top + h, left : left + w]
        n = 3.0 * stats.sum()
        mu = sel.sum(dtype=np.float64) / n
        var = max(float(np.square(sel, dtype=np.float64).sum() / n - mu * mu), 0.0)
        out = (canvas - np.float32(mu)) * np.float32(1.0 / max(np.sqrt(var), spec.std_guard))
    return np.where(keep, out, np.float32(0.0 if spec.style == PADDED else spec.pad_value))


# ------------------------------------------------------------- reference path


def _reference_resize(img, size):
    """Bilinear resize of (C, H, W) by explicit four-neighbour gathering."""
    C, H, W = img.shape
    h, w = size

    def coords(n_out, n_in):
        src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = coords(h, H)
    x0, x1, wx = coords(w, W)
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy)[:, None] + bot * wy[:, None]


def reference_preprocess(pixels, question, spec: PreprocessSpec) -> np.ndarray:
    """Non-differentiable pipeline on a uint8 (H, W, 3) image -> float64 (3, H', W')."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise TypeError("reference pipeline expects uint8 pixels")
    img = pixels.transpose(2, 0, 1).astype(np.float64)
    H, W = pixels.shape[:2]
    if spec.style == HEADERED:
        bh, bw = spec.body
        h, w = fit_size((H, W), (bh, bw))
        body = img if (h, w) == (H, W) else _reference_resize(img, (h, w))
        hh = spec.header_height
        header = render_header(question, bw, hh).astype(np.float64)
        if spec.normalization == "fixed":
            norm = lambda a: (a / 255.0 - np.reshape(spec.mean, (3, 1, 1))) / np.reshape(spec.std, (3, 1, 1))
        else:
            vals = body.ravel()
            if spec.header_in_stats:
                vals = np.concatenate([vals, np.tile(header.ravel(), 3)])
            mu, sd = vals.mean(), max(vals.std(), spec.std_guard)
            norm = lambda a: (a - mu) / sd
        out = np.full((3,) + spec.target, spec.pad_value, dtype=np.float64)
        out[:, :hh] = norm(np.broadcast_to(header, (3, hh, bw)))
        out[:, hh : hh + h, :w] = norm(body)
        return out
    th, tw = spec.target
    h, w = fit_size((H, W), (th, tw))
    x = img if (h, w) == (H, W) else _reference_resize(img, (h, w))
    if spec.normalization == "fixed":
        x = (x / 255.0 - np.reshape(spec.mean, (3, 1, 1))) / np.reshape(spec.std, (3, 1, 1))
    else:
        x = (x - x.mean()) / max(x.std(), spec.std_guard)
    out = np.zeros((3, th, tw))
    top, left = (th - h) // 2, (tw - w) // 2
    out[:, top : top + h, left : left + w] = x
    return out
