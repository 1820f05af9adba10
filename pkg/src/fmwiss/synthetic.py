"""Procedural shape world: deterministic toy datasets plus the synthetic
foundation backends that score them.

Each image is a noisy gray background with one or two colored shapes
(rectangles or discs, one color per class). The world keeps the ground
truth for itself; the synthetic backends derive their tensors from it
(class-vector features plus seeded noise, object-support attention), so
the pseudo-label pipeline sees realistic but solvable inputs. A
configurable "dropout band" hides the lower part of every object from the
vision-language features, which leaves real work for the attention side
of the fusion.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from .backends import SslBackend, VlpBackend
from .label_space import BACKGROUND_ID, DatasetIndex, IndexEntry
from .seeding import substream

_CLASS_TOKEN = re.compile(r"synthcls(\d+)")


def hue_to_rgb(hue):
    i = int(hue * 6.0)
    f = hue * 6.0 - i
    v, p, q, t = 0.95, 0.15, 0.95 - 0.8 * f, 0.15 + 0.8 * f
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i % 6]
    return np.array([int(round(255 * c)) for c in rgb], dtype=np.uint8)


def class_hue(cid):
    return (0.137 + cid * 0.381966) % 1.0


def class_color(cid):
    """Saturated, well-separated RGB per class id (golden-angle hue walk)."""
    return hue_to_rgb(class_hue(cid))


@dataclass(frozen=True)
class ObjectSpec:
    class_id: int
    shape: str  # rect | disc
    ci: int  # center row
    cj: int  # center col
    size: int  # rect: half side; disc: radius
    hue: float = None  # decoy clutter: painted but labelled background


@dataclass
class WorldParams:
    image_size: int = 64
    grid: int = 16
    feat_dim: int = 32
    n_heads: int = 4
    feature_noise: float = 0.12
    attn_noise: float = 0.06
    dropout_band: float = 0.35  # fraction of each object's grid bbox hidden from VLP
    text_jitter: float = 0.08


class SyntheticWorld:
    """Renders images and labels from object specs; serves backend queries."""

    def __init__(self, seed, params=None):
        self.seed = int(seed)
        self.params = params or WorldParams()
        self._specs = {}
        self._vecs = {}
        self._feat_cache = {}
        self._label_cache = {}

    # ----- roster ---------------------------------------------------------

    def add_image(self, image_id, objects):
        self._specs[image_id] = tuple(objects)

    def image_ids(self):
        return list(self._specs)

    def present_classes(self, image_id):
        return {o.class_id for o in self._specs[image_id] if o.class_id != BACKGROUND_ID}

    # ----- rendering ------------------------------------------------------

    def _paint(self, spec, size):
        ii, jj = np.mgrid[0:size, 0:size]
        if spec.shape == "rect":
            return (np.abs(ii - spec.ci) <= spec.size) & (np.abs(jj - spec.cj) <= spec.size)
        return (ii - spec.ci) ** 2 + (jj - spec.cj) ** 2 <= spec.size**2

    def labels(self, image_id):
        if image_id not in self._label_cache:
            size = self.params.image_size
            lab = np.zeros((size, size), dtype=np.int32)
            for spec in self._specs[image_id]:
                lab[self._paint(spec, size)] = spec.class_id
            self._label_cache[image_id] = lab
        return self._label_cache[image_id]

    def image(self, image_id):
        size = self.params.image_size
        rng = substream(self.seed, "render", image_id)
        img = np.clip(118 + rng.integers(-12, 13, size=(size, size, 3)), 0, 255).astype(np.float64)
        for spec in self._specs[image_id]:
            mask = self._paint(spec, size)
            base = class_color(spec.class_id) if spec.hue is None else hue_to_rgb(spec.hue)
            jitter = rng.integers(-10, 11, size=(int(mask.sum()), 3))
            img[mask] = np.clip(base.astype(np.float64) + jitter, 0, 255)
        return img.astype(np.uint8)

    def grid_labels(self, image_id):
        size, g = self.params.image_size, self.params.grid
        lab = self.labels(image_id)
        ri = (np.arange(g) * size) // g
        return lab[np.ix_(ri, ri)]

    # ----- backend services -----------------------------------------------

    def class_vector(self, cid):
        if cid not in self._vecs:
            v = substream(self.seed, "classvec", cid).standard_normal(self.params.feat_dim)
            self._vecs[cid] = v / np.linalg.norm(v)
        return self._vecs[cid]

    def _band_mask(self, image_id):
        """Grid cells inside the hidden lower band of some object."""
        g = self.params.grid
        gl = self.grid_labels(image_id)
        band = np.zeros((g, g), dtype=bool)
        for spec in self._specs[image_id]:
            rows = np.where((gl == spec.class_id).any(axis=1))[0]
            if rows.size == 0:
                continue
            span = rows[-1] - rows[0] + 1
            cut = rows[-1] - int(span * self.params.dropout_band) + 1
            band |= (gl == spec.class_id) & (np.arange(g)[:, None] >= cut)
        return band

    def vlp_features(self, image_id):
        if image_id not in self._feat_cache:
            p = self.params
            gl = self.grid_labels(image_id)
            band = self._band_mask(image_id)
            base = np.empty((p.grid, p.grid, p.feat_dim))
            bg = self.class_vector(BACKGROUND_ID)
            for i in range(p.grid):
                for j in range(p.grid):
                    cid = gl[i, j]
                    vec = bg if cid == BACKGROUND_ID or band[i, j] else self.class_vector(int(cid))
                    base[i, j] = vec
            rng = substream(self.seed, "vlpfeat", image_id)
            noise = rng.standard_normal(base.shape) * p.feature_noise
            self._feat_cache[image_id] = base + noise
        return self._feat_cache[image_id]

    def text_embedding(self, prompt):
        m = _CLASS_TOKEN.search(prompt)
        if m:
            base = self.class_vector(int(m.group(1)))
        else:
            base = substream(self.seed, "textbase", prompt).standard_normal(self.params.feat_dim)
            base = base / np.linalg.norm(base)
        pert = substream(self.seed, "textpert", prompt).standard_normal(self.params.feat_dim)
        vec = base + self.params.text_jitter * pert
        return vec / np.linalg.norm(vec)

    def attention_stack(self, image_id, seed_ij):
        p = self.params
        i, j = seed_ij
        gl = self.grid_labels(image_id)
        cid = int(gl[i, j])
        base = (gl == cid).astype(np.float64) if cid != BACKGROUND_ID else np.zeros_like(gl, dtype=np.float64)
        rng = substream(self.seed, "attn", image_id, i, j)
        scales = 0.85 + 0.3 * np.arange(p.n_heads) / max(p.n_heads - 1, 1)
        stack = base[None, :, :] * scales[:, None, None]
        stack = stack + np.abs(rng.standard_normal(stack.shape)) * p.attn_noise
        return stack


class SyntheticVlpBackend(VlpBackend):
    def __init__(self, world):
        self.world = world

    def image_features(self, image_id, image):
        return self.world.vlp_features(image_id)

    def embed_text(self, text):
        return self.world.text_embedding(text)

    def class_name(self, class_id):
        return f"synthcls{int(class_id)}"


class SyntheticSslBackend(SslBackend):
    def __init__(self, world):
        self.world = world

    def attention(self, image_id, image, seed):
        return self.world.attention_stack(image_id, seed)


# ---------------------------------------------------------------------------
# dataset assembly


@dataclass
class SyntheticDataset:
    world: SyntheticWorld
    train_index: DatasetIndex
    val_ids: list = field(default_factory=list)

    def image(self, image_id):
        return self.world.image(image_id)

    def labels(self, image_id):
        return self.world.labels(image_id)


def _big_disc(rng, cid, size):
    radius = int(size * rng.uniform(0.47, 0.495))
    ci = int(rng.integers(radius, size - radius))
    cj = int(rng.integers(radius, size - radius))
    return ObjectSpec(cid, "disc", ci, cj, radius)


def _rect(rng, cid, size, half_frac, cj_range=None):
    half = max(3, int(size * rng.uniform(*half_frac)))
    ci = int(rng.integers(half, size - half))
    lo, hi = cj_range if cj_range else (half, size - 1 - half)
    lo, hi = max(lo, half), min(hi, size - 1 - half)
    cj = int(rng.integers(lo, hi + 1))
    return ObjectSpec(cid, "rect", ci, cj, half)


def _corner_rect(rng, cid, size):
    half = max(int(size * 0.11), 3)
    corners = [(half, half), (half, size - 1 - half), (size - 1 - half, half), (size - 1 - half, size - 1 - half)]
    ci, cj = corners[int(rng.integers(4))]
    return ObjectSpec(cid, "rect", ci, cj, half)


def _hue_walk(start, avoid, min_dist=0.07):
    """Golden-ratio walk over the hue wheel skipping protected hues, so
    decoy clutter covers every color region even in small rosters."""
    hue = start
    while True:
        hue = (hue + 0.381966) % 1.0
        if all(min(abs(hue - h), 1.0 - abs(hue - h)) > min_dist for h in avoid):
            yield hue


def _decoy(rng, size, hue):
    """Background clutter blob: painted like an object, labelled background,
    so backbones see color diversity without any label information."""
    hue = (hue + float(rng.uniform(-0.02, 0.02))) % 1.0
    half = max(3, int(size * rng.uniform(0.06, 0.11)))
    ci = int(rng.integers(half, size - half))
    cj = int(rng.integers(half, size - half))
    shape = "disc" if rng.random() < 0.5 else "rect"
    return ObjectSpec(BACKGROUND_ID, shape, ci, cj, half, hue=hue)


def build_synthetic_dataset(seed, taxonomy, n_base, n_step, n_val, params=None, overlap_frac=0.5, decoy_frac=1.0):
    """Assemble the toy benchmark: pixel-labelled base images (1-2 medium
    rectangles), image-level step images (one dominant disc of a new class,
    sometimes a small old-class rectangle in a corner), and a held-out val
    roster cycling all classes. Colored decoy clutter, labelled background,
    appears throughout so backbones cannot overfit the class palette."""
    world = SyntheticWorld(seed, params)
    size = world.params.image_size
    base_classes = sorted(taxonomy.steps[0].new_classes)
    all_classes = sorted(set().union(*[s.new_classes for s in taxonomy.steps]))
    hues = [class_hue(c) for c in all_classes]
    # base-step backgrounds may contain clutter of any unseen hue, exactly
    # like overlap-protocol data where future classes sit in the background
    base_hues = [class_hue(c) for c in base_classes]
    entries = []

    rng = substream(seed, "roster", "base")
    # base-image decoys stride the whole wheel minus the base hues
    base_walk = _hue_walk(float(rng.random()), base_hues)
    for n in range(n_base):
        image_id = f"base{n:04d}"
        chosen = [base_classes[n % len(base_classes)]]
        if len(base_classes) > 1 and rng.random() < 0.4:
            chosen.append(base_classes[(n + 1) % len(base_classes)])
        objs = [_decoy(rng, size, next(base_walk))] if rng.random() < decoy_frac else []
        if len(chosen) == 1:
            objs.append(_rect(rng, chosen[0], size, (0.17, 0.26)))
        else:
            mid = size // 2
            objs.append(_rect(rng, chosen[0], size, (0.11, 0.18), cj_range=(0, mid - 1)))
            objs.append(_rect(rng, chosen[1], size, (0.11, 0.18), cj_range=(mid, size - 1)))
        world.add_image(image_id, objs)
        entries.append(IndexEntry(image_id, frozenset(chosen), True))

    for t, step in enumerate(taxonomy.steps[1:], start=1):
        step_classes = sorted(step.new_classes)
        old = sorted(set().union(*[s.new_classes for s in taxonomy.steps[:t]]))
        rng = substream(seed, "roster", f"step{t}")
        step_walk = _hue_walk(float(rng.random()), hues)
        for n in range(n_step):
            image_id = f"step{t}_{n:04d}"
            cid = step_classes[n % len(step_classes)]
            objs = [_decoy(rng, size, next(step_walk))] if rng.random() < decoy_frac * 0.7 else []
            objs.append(_big_disc(rng, cid, size))
            present = {cid}
            if overlap_frac > 0 and rng.random() < overlap_frac:
                ocid = old[int(rng.integers(len(old)))]
                objs.append(_corner_rect(rng, ocid, size))
                present.add(ocid)
            world.add_image(image_id, objs)
            entries.append(IndexEntry(image_id, frozenset(present), False))

    rng = substream(seed, "roster", "val")
    val_walk = _hue_walk(float(rng.random()), hues)
    val_ids = []
    for n in range(n_val):
        image_id = f"val{n:04d}"
        cid = all_classes[n % len(all_classes)]
        objs = [_decoy(rng, size, next(val_walk))] if rng.random() < decoy_frac * 0.7 else []
        if cid in base_classes:
            objs.append(_rect(rng, cid, size, (0.17, 0.26)))
        else:
            objs.append(_big_disc(rng, cid, size))
        world.add_image(image_id, objs)
        val_ids.append(image_id)

    return SyntheticDataset(world, DatasetIndex(tuple(entries)), val_ids)
