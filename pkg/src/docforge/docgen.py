"""Synthetic invoice generator with ground-truth QA pairs."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import font

WIDTH = 256
HEIGHT = 384
SCALE = 2
JITTER = 4
M = 5

ANSWER_ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789 $.,/'-"

PROVIDERS = (
    "Acme Corp",
    "Globex Inc.",
    "Initech",
    "Umbrella Ltd",
    "Stark Supply",
    "Wayne Bros",
    "Hooli",
    "Vandelay Co.",
    "Soylent Foods",
    "Tyrell Corp",
    "Cyberdyne",
    "Wonka's Sweets",
    "Oceanic Air",
    "Monarch Paper",
    "Dunder-Mifflin",
    "Kramerica",
)

# (field key, label printed on the page, question asked about it)
FIELDS = (
    ("provider", "Provider", "who is the provider?"),
    ("invoice_id", "Invoice No.", "what is the id?"),
    ("date", "Date", "what is the date?"),
    ("total", "Total", "what is the total?"),
    ("pages", "Pages", "how many pages?"),
)
QUESTIONS = tuple(q for _, _, q in FIELDS)

_TOP = 36
_BLOCK = 60
_LABEL_X = 12
_VALUE_X = 24
_VALUE_DY = 20


@dataclass(frozen=True)
class DocumentSpec:
    fields: dict
    layout_seed: int = 0
    width: int = WIDTH
    height: int = HEIGHT

    def __post_init__(self):
        for key, _, _ in FIELDS:
            value = self.fields.get(key, "")
            if not value:
                raise ValueError(f"field {key!r} is empty")
            bad = set(value) - set(ANSWER_ALPHABET)
            if bad:
                raise ValueError(f"field {key!r} has unrenderable characters {sorted(bad)}")

    def key(self):
        return tuple(self.fields[k] for k, _, _ in FIELDS)


@dataclass
class RasterDocument:
    pixels: np.ndarray  # (H, W, 3) uint8
    qa_pairs: list
    spec: DocumentSpec | None = None
    doc_id: str = ""

    @property
    def questions(self):
        return [q for q, _ in self.qa_pairs]

    @property
    def answers(self):
        return [a for _, a in self.qa_pairs]


def _layout_offsets(seed):
    rng = np.random.default_rng(seed)
    return rng.integers(-JITTER, JITTER + 1, size=(len(FIELDS), 2))


def value_anchor(spec: DocumentSpec, i: int):
    """Top-left (x, y) of field ``i``'s rendered value in page pixels."""
    dx, dy = (int(v) for v in _layout_offsets(spec.layout_seed)[i])
    return _VALUE_X + dx, _TOP + _BLOCK * i + dy + _VALUE_DY


def glyph_centres(spec: DocumentSpec, i: int, extra=1):
    """Page-space (x, y) centres of each character cell of field ``i``'s value.

    ``extra`` appends that many cells past the end (where an end-of-answer
    reader would look next).
    """
    x0, y0 = value_anchor(spec, i)
    adv = (font.GLYPH_W + 1) * SCALE
    cx = x0 + adv * np.arange(len(spec.fields[FIELDS[i][0]]) + extra) + (font.GLYPH_W * SCALE - 1) / 2
    cy = y0 + (font.GLYPH_H * SCALE - 1) / 2
    return [(float(x), float(cy)) for x in cx]


def render_document(spec: DocumentSpec) -> RasterDocument:
    canvas = np.full((spec.height, spec.width), 255, dtype=np.uint8)
    offsets = _layout_offsets(spec.layout_seed)
    try:
        font.draw_text(canvas, "INVOICE", _LABEL_X, 8, SCALE)
    except ValueError:
        raise ValueError("canvas too small for the title") from None
    for i, (key, label, _) in enumerate(FIELDS):
        dx, dy = (int(v) for v in offsets[i])
        y = _TOP + _BLOCK * i + dy
        try:
            font.draw_text(canvas, label + ":", _LABEL_X + dx, y, SCALE)
            font.draw_text(canvas, spec.fields[key], _VALUE_X + dx, y + _VALUE_DY, SCALE)
        except ValueError:
            raise ValueError(f"field {key!r} overflows the canvas") from None
    pixels = np.repeat(canvas[:, :, None], 3, axis=2)
    qa = [(q, spec.fields[k]) for k, _, q in FIELDS]
    digest = hashlib.sha1(repr((spec.key(), spec.layout_seed)).encode()).hexdigest()[:10]
    return RasterDocument(pixels=pixels, qa_pairs=qa, spec=spec, doc_id=digest)


def random_fields(rng):
    month = int(rng.integers(1, 13))
    day = int(rng.integers(1, 29))
    year = int(rng.integers(10, 30))
    dollars = int(rng.integers(0, 10 ** int(rng.integers(1, 5))))
    cents = int(rng.integers(0, 100))
    return {
        "provider": PROVIDERS[int(rng.integers(len(PROVIDERS)))],
        "invoice_id": str(int(rng.integers(1000, 10000))),
        "date": f"{month:02d}/{day:02d}/{year:02d}",
        "total": f"${dollars}.{cents:02d}",
        "pages": str(int(rng.integers(1, 10))),
    }


def make_dataset(n: int, seed: int, exclude=()) -> list[RasterDocument]:
    """``n`` distinct documents drawn from ``seed``; field maps in ``exclude`` are skipped."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    seen = set(exclude)
    docs = []
    while len(docs) < n:
        fields = random_fields(rng)
        spec = DocumentSpec(fields, layout_seed=int(rng.integers(2**31)))
        if spec.key() in seen:
            continue
        seen.add(spec.key())
        docs.append(render_document(spec))
    return docs


def train_heldout(n_train=64, n_heldout=16, seed=7):
    train = make_dataset(n_train, seed)
    held = make_dataset(n_heldout, seed + 1, exclude={d.spec.key() for d in train})
    return train, held


def save_png(pixels, path):
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def load_png(path):
    with Image.open(path) as im:
        return np.array(im.convert("RGB"), dtype=np.uint8)


def export_dataset(docs, out_dir):
    """Write one PNG per document plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, doc in enumerate(docs):
        name = f"doc_{i:04d}.png"
        save_png(doc.pixels, out / name)
        entries.append(
            {
                "doc_id": doc.doc_id,
                "file": name,
                "fields": doc.spec.fields if doc.spec else None,
                "layout_seed": doc.spec.layout_seed if doc.spec else None,
                "qa_pairs": [{"question": q, "answer": a} for q, a in doc.qa_pairs],
            }
        )
    path = out / "manifest.json"
    path.write_text(json.dumps({"documents": entries}, indent=2))
    return path


def load_dataset(manifest_path):
    manifest_path = Path(manifest_path)
    data = json.loads(manifest_path.read_text())
    docs = []
    for e in data["documents"]:
        pixels = load_png(manifest_path.parent / e["file"])
        spec = DocumentSpec(e["fields"], e["layout_seed"]) if e.get("fields") else None
        qa = [(p["question"], p["answer"]) for p in e["qa_pairs"]]
        docs.append(RasterDocument(pixels, qa, spec, e["doc_id"]))
    return docs
