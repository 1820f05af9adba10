"""Dense pseudo-label generation for image-level-labelled classes.

Pipeline per image and class: pixel-text score map from a vision-language
backend, seed points sampled from its binarized foreground, attention maps
from a self-supervised backend averaged over heads and seeds, top-K
binarization, then mask fusion (union by default). Binarization happens at
feature-grid resolution; only the final binary plane is upsampled
(nearest) to image resolution, so the top-K pixel count is exact at the
native grid.

Also owns the mask cache binary format ("FMWM") and the float32 plane
encoding used on the wire by HTTP backends.
"""

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadPercentage,
    DimMismatch,
    EmptyClassSet,
    EmptyForeground,
    FormatError,
    ShapeMismatch,
    UnknownClass,
    ZeroVector,
)

MASK_MAGIC = b"FMWM"
MASK_VERSION = 1
FLAG_BINARY = 0x0001

SOURCE_INIT_ONLY = "init_only"
SOURCE_FUSED = "fused"

DEFAULT_TEMPLATES = (
    "a photo of a {}.",
    "a photograph of one {}.",
    "an image showing a {}.",
)


@dataclass
class DenseFeatureMap:
    values: np.ndarray  # (h, w, d)

    @property
    def dim(self):
        return self.values.shape[2]


@dataclass
class TextEmbeddingMatrix:
    class_ids: tuple  # ascending
    values: np.ndarray  # (len(class_ids), d)

    @property
    def dim(self):
        return self.values.shape[1]


@dataclass
class ScoreMap:
    class_ids: tuple
    values: np.ndarray  # (h, w, len(class_ids))


@dataclass
class PseudoLabelSet:
    image_id: str
    masks: dict  # class id -> (H, W) uint8 in {0, 1}
    source: str = SOURCE_FUSED


@dataclass
class CosegParams:
    k: float = 70.0  # top-K% kept when binarizing attention means
    k_fg: float = 70.0  # top-K% for the seed-sampling foreground
    k_init: float = None  # top-K% for the fused init mask; defaults to k_fg
    n_seeds: int = 9
    fusion: str = "union"  # union | intersection | none
    templates: tuple = field(default_factory=lambda: DEFAULT_TEMPLATES)

    def init_percent(self):
        return self.k_fg if self.k_init is None else self.k_init


# ---------------------------------------------------------------------------
# resolution bridging


def downsample_nearest(arr, h, w):
    src_h, src_w = arr.shape[:2]
    ri = (np.arange(h) * src_h) // h
    ci = (np.arange(w) * src_w) // w
    return arr[np.ix_(ri, ci)]


def upsample_nearest(arr, h, w):
    src_h, src_w = arr.shape[:2]
    ri = (np.arange(h) * src_h) // h
    ci = (np.arange(w) * src_w) // w
    return arr[np.ix_(ri, ci)]


# ---------------------------------------------------------------------------
# score maps


def normalize_features(features):
    """L2-normalize every channel vector of a dense feature map."""
    vals = np.asarray(features.values, dtype=np.float64)
    norms = np.sqrt((vals * vals).sum(axis=2, keepdims=True))
    if np.any(norms < 1e-12):
        raise ZeroVector("feature map contains a (near) zero channel vector")
    return DenseFeatureMap(vals / norms)


def encode_text(backend, classes, templates):
    """Per class: embed every filled template, average, re-normalize.

    Rows follow ascending class id.
    """
    if not classes:
        raise EmptyClassSet("no classes to encode")
    if not templates:
        raise ValueError("at least one prompt template is required")
    ids = tuple(sorted(int(c) for c in classes))
    rows = []
    for cid in ids:
        name = backend.class_name(cid)
        embs = [np.asarray(backend.embed_text(t.format(name)), dtype=np.float64) for t in templates]
        dims = {e.shape for e in embs}
        if len(dims) != 1 or embs[0].ndim != 1:
            raise DimMismatch(f"backend returned inconsistent embedding shapes {dims}")
        mean = np.mean(embs, axis=0)
        norm = float(np.linalg.norm(mean))
        if norm < 1e-12:
            raise ZeroVector(f"averaged text embedding for class {cid} is zero")
        rows.append(mean / norm)
    return TextEmbeddingMatrix(ids, np.stack(rows))


def initial_mask(features, text):
    """Pixel-text score map: dot product of unit feature and text vectors."""
    if features.dim != text.dim:
        raise DimMismatch(f"feature dim {features.dim} != text dim {text.dim}")
    scores = np.einsum("hwd,cd->hwc", features.values, text.values)
    return ScoreMap(text.class_ids, scores)


def topk_count(k, cells):
    if float(k).is_integer():
        return -((-int(k) * cells) // 100)
    return math.ceil(k * cells / 100.0)


def binarize_topk(plane, k):
    """Keep exactly ceil(k% of the pixels): the largest values, ties broken
    in favor of earlier row-major position."""
    if not 0 < k <= 100:
        raise BadPercentage(f"k must be in (0, 100], got {k}")
    flat = np.asarray(plane, dtype=np.float64).ravel()
    m = topk_count(k, flat.size)
    order = np.argsort(-flat, kind="stable")
    out = np.zeros(flat.size, dtype=np.uint8)
    out[order[:m]] = 1
    return out.reshape(np.asarray(plane).shape)


def foreground_of(score_map, class_id, k_fg):
    """Seed-sampling foreground: pixels where `class_id` wins the argmax
    over the map's classes and survives top-K on its own plane."""
    class_id = int(class_id)
    if class_id not in score_map.class_ids:
        raise UnknownClass(f"class {class_id} not in score map")
    idx = score_map.class_ids.index(class_id)
    top = binarize_topk(score_map.values[:, :, idx], k_fg)
    wins = (np.argmax(score_map.values, axis=2) == idx)
    return (top.astype(bool) & wins).astype(np.uint8)


def sample_seeds(foreground, n, rng):
    """Draw n foreground coordinates; without replacement when enough
    pixels exist, with replacement otherwise."""
    if n < 1:
        raise ValueError("need at least one seed")
    coords = np.argwhere(np.asarray(foreground) == 1)
    if coords.shape[0] == 0:
        raise EmptyForeground("no foreground pixels to seed from")
    sel = rng.choice(coords.shape[0], size=n, replace=coords.shape[0] < n)
    return [(int(coords[s, 0]), int(coords[s, 1])) for s in sel]


def seed_attention_mask(backend, image_id, image, seeds, k):
    """Mean attention over heads, then over seeds, then top-K binarize."""
    if not seeds:
        raise EmptyForeground("no seeds supplied")
    acc = None
    for seed in seeds:
        stack = np.asarray(backend.attention(image_id, image, seed), dtype=np.float64)
        per_seed = stack.mean(axis=0)
        acc = per_seed if acc is None else acc + per_seed
    return binarize_topk(acc / len(seeds), k)


def fuse_masks(init_bin, seeds_bin, op):
    a = np.asarray(init_bin, dtype=np.uint8)
    b = np.asarray(seeds_bin, dtype=np.uint8)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    if op == "union":
        return (a | b).astype(np.uint8)
    if op == "intersection":
        return (a & b).astype(np.uint8)
    if op == "none":
        return a.copy()
    raise ValueError(f"unknown fusion op {op!r}")


def generate_pseudo_labels(image, image_id, image_labels, vlp, ssl, params, rng_for_class):
    """Run the full per-image pipeline and return image-resolution masks.

    `rng_for_class` maps a class id to the seeded generator used for its
    seed sampling, which keeps results independent of processing order.
    Classes whose seed foreground comes up empty fall back to the
    binarized score map alone.
    """
    if not image_labels:
        raise EmptyClassSet("image has no labels")
    big_h, big_w = image.shape[0], image.shape[1]
    feats = normalize_features(DenseFeatureMap(np.asarray(vlp.image_features(image_id, image))))
    text = encode_text(vlp, image_labels, params.templates)
    score = initial_mask(feats, text)

    masks = {}
    any_fused = False
    for cid in score.class_ids:
        idx = score.class_ids.index(cid)
        init_bin = binarize_topk(score.values[:, :, idx], params.init_percent())
        plane = init_bin
        if params.fusion != "none":
            fg = foreground_of(score, cid, params.k_fg)
            if fg.any():
                seeds = sample_seeds(fg, params.n_seeds, rng_for_class(cid))
                att_bin = seed_attention_mask(ssl, image_id, image, seeds, params.k)
                plane = fuse_masks(init_bin, att_bin, params.fusion)
                any_fused = True
        masks[int(cid)] = upsample_nearest(plane, big_h, big_w).astype(np.uint8)

    source = SOURCE_FUSED if any_fused else SOURCE_INIT_ONLY
    return PseudoLabelSet(image_id, masks, source)


# ---------------------------------------------------------------------------
# binary plane format
#
# magic "FMWM", version u16, flags u16 (bit0: 1=binary payload, 0=float32),
# H u32, W u32, C u16, C class ids u16, source byte, then C planes of H*W
# bytes (0/255) or H*W float32 little-endian.

_HEADER = struct.Struct("<4sHHIIH")


def _pack_header(flags, h, w, class_ids, source_byte):
    buf = bytearray(_HEADER.pack(MASK_MAGIC, MASK_VERSION, flags, h, w, len(class_ids)))
    for cid in class_ids:
        if not 0 <= cid < 1 << 16:
            raise FormatError(f"class id {cid} does not fit in u16")
        buf += struct.pack("<H", cid)
    buf.append(source_byte)
    return bytes(buf)


def _unpack_header(data):
    if len(data) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, flags, h, w, c = _HEADER.unpack_from(data, 0)
    if magic != MASK_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != MASK_VERSION:
        raise FormatError(f"unsupported version {version}")
    off = _HEADER.size
    if len(data) < off + 2 * c + 1:
        raise FormatError("truncated class table")
    ids = struct.unpack_from(f"<{c}H", data, off)
    off += 2 * c
    source_byte = data[off]
    return flags, h, w, list(ids), source_byte, off + 1


def encode_mask_set(pls):
    ids = sorted(pls.masks)
    planes = [np.asarray(pls.masks[c]) for c in ids]
    if not planes:
        raise FormatError("pseudo label set holds no masks")
    h, w = planes[0].shape
    source_byte = 1 if pls.source == SOURCE_FUSED else 0
    out = bytearray(_pack_header(FLAG_BINARY, h, w, ids, source_byte))
    for plane in planes:
        if plane.shape != (h, w):
            raise ShapeMismatch("mask planes disagree on shape")
        vals = plane.astype(np.uint8)
        if not np.isin(vals, (0, 1)).all():
            raise FormatError("mask planes must be strictly 0/1")
        out += (vals * 255).tobytes()
    return bytes(out)


def decode_mask_set(data, image_id=""):
    flags, h, w, ids, source_byte, off = _unpack_header(data)
    if not flags & FLAG_BINARY:
        raise FormatError("expected a binary-payload mask file")
    n = h * w
    if len(data) != off + n * len(ids):
        raise FormatError("payload size mismatch")
    masks = {}
    for cid in ids:
        raw = np.frombuffer(data, dtype=np.uint8, count=n, offset=off).reshape(h, w)
        off += n
        if not np.isin(raw, (0, 255)).all():
            raise FormatError("binary payload bytes must be 0 or 255")
        masks[int(cid)] = (raw // 255).astype(np.uint8)
    source = SOURCE_FUSED if source_byte == 1 else SOURCE_INIT_ONLY
    return PseudoLabelSet(image_id, masks, source)


def write_mask_cache(path, pls):
    with open(path, "wb") as fh:
        fh.write(encode_mask_set(pls))


def read_mask_cache(path):
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_mask_set(data, image_id=os.path.splitext(os.path.basename(path))[0])


def encode_float_planes(values):
    """(H, W, C) float array -> plane-format bytes with a float32 payload.

    Channel ids are 0..C-1 and the source byte is 0; this is the wire
    encoding the HTTP backends speak.
    """
    vals = np.asarray(values, dtype=np.float32)
    if vals.ndim != 3:
        raise ShapeMismatch(f"expected (H, W, C), got shape {vals.shape}")
    h, w, c = vals.shape
    out = bytearray(_pack_header(0, h, w, list(range(c)), 0))
    for ch in range(c):
        out += np.ascontiguousarray(vals[:, :, ch]).tobytes()
    return bytes(out)


def decode_float_planes(data):
    flags, h, w, ids, _, off = _unpack_header(data)
    if flags & FLAG_BINARY:
        raise FormatError("expected a float32-payload file")
    n = h * w
    if len(data) != off + 4 * n * len(ids):
        raise FormatError("payload size mismatch")
    planes = []
    for _cid in ids:
        planes.append(np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(h, w))
        off += 4 * n
    return np.stack(planes, axis=2).astype(np.float64)
