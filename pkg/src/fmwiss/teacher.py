"""Plug-in teacher head and its training losses.

The head is a small ASPP-shaped stack: four parallel dilated 3x3
convolutions (rates 1, 2, 4, 8) over backbone features, ReLU, channel
concat, then a 1x1 merge producing one logit per seen class (background
first). Pixel embeddings for the contrastive loss are the L2-normalized
penultimate activations (the concat).

Losses operate on probabilities already passed through the logistic
function; every log is guarded by a 1e-7 clamp. Each loss ships with an
analytic gradient in probability/embedding space so the whole family can
be checked against finite differences.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadTemperature,
    FormatError,
    NoForeground,
    NonFinite,
    ShapeMismatch,
    UnknownClass,
)
from .kernels import (
    conv2d_backward_input,
    conv2d_backward_weights,
    conv2d_forward,
    relu,
)

CLAMP = 1e-7
ASPP_RATES = (1, 2, 4, 8)


@dataclass
class TeacherHead:
    in_channels: int
    branch_channels: int
    out_channels: int
    branch_w: list  # per rate (3, 3, in, branch)
    branch_b: list
    merge_w: np.ndarray  # (1, 1, 4*branch, out)
    merge_b: np.ndarray
    proj_w: np.ndarray = None  # optional (1, 1, 4*branch, proj) embedding projection
    proj_b: np.ndarray = None

    @property
    def embed_dim(self):
        if self.proj_w is not None:
            return self.proj_w.shape[3]
        return self.branch_channels * len(ASPP_RATES)

    def param_items(self):
        """(name, array) pairs in checkpoint order."""
        for r, (w, b) in zip(ASPP_RATES, zip(self.branch_w, self.branch_b)):
            yield f"branch{r}_w", w
            yield f"branch{r}_b", b
        yield "merge_w", self.merge_w
        yield "merge_b", self.merge_b
        if self.proj_w is not None:
            yield "proj_w", self.proj_w
            yield "proj_b", self.proj_b


def init_teacher_head(in_channels, branch_channels, out_channels, rng, proj_channels=0):
    """Build the head; with proj_channels > 0 the contrast embeddings come
    from a 1x1 projection of the concat instead of the concat itself."""
    bw, bb = [], []
    for _ in ASPP_RATES:
        fan_in = 9 * in_channels
        bw.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(3, 3, in_channels, branch_channels)))
        bb.append(np.zeros(branch_channels))
    merge_in = branch_channels * len(ASPP_RATES)
    mw = rng.normal(0.0, np.sqrt(2.0 / merge_in), size=(1, 1, merge_in, out_channels))
    pw = pb = None
    if proj_channels:
        pw = rng.normal(0.0, np.sqrt(2.0 / merge_in), size=(1, 1, merge_in, proj_channels))
        pb = np.zeros(proj_channels)
    return TeacherHead(in_channels, branch_channels, out_channels, bw, bb, mw, np.zeros(out_channels), pw, pb)


def _normalize_pixels(h):
    norms = np.sqrt((h * h).sum(axis=-1, keepdims=True))
    safe = np.maximum(norms, 1e-12)
    return h / safe, norms


def _teacher_apply(head, features):
    feats = np.asarray(features, dtype=np.float64)
    squeeze = feats.ndim == 3
    if squeeze:
        feats = feats[None]
    if feats.shape[-1] != head.in_channels:
        raise ShapeMismatch(f"expected {head.in_channels} feature channels, got {feats.shape[-1]}")
    pre = []
    acts = []
    for w, b, rate in zip(head.branch_w, head.branch_b, ASPP_RATES):
        z = conv2d_forward(feats, w, b, stride=1, dilation=rate, pad=rate)
        pre.append(z)
        acts.append(relu(z))
    concat = np.concatenate(acts, axis=-1)
    logits = conv2d_forward(concat, head.merge_w, head.merge_b, stride=1, dilation=1, pad=0)
    raw_embed = concat
    if head.proj_w is not None:
        raw_embed = conv2d_forward(concat, head.proj_w, head.proj_b, stride=1, dilation=1, pad=0)
    embeds, norms = _normalize_pixels(raw_embed)
    cache = {"feats": feats, "pre": pre, "concat": concat, "embeds": embeds, "norms": norms, "squeeze": squeeze}
    return logits, embeds, cache


def teacher_forward(head, features):
    """Logits over all seen classes plus unit pixel embeddings."""
    logits, embeds, cache = _teacher_apply(head, features)
    if cache["squeeze"]:
        return logits[0], embeds[0]
    return logits, embeds


def teacher_forward_train(head, features):
    return _teacher_apply(head, features)


def teacher_backward(head, cache, d_logits, d_embeds=None):
    """Parameter gradients from logit and (optional) embedding gradients.

    Features are treated as a fixed input: nothing propagates past the
    head, so the student backbone is untouched by teacher losses.
    """
    feats, concat = cache["feats"], cache["concat"]
    grads = {}
    dw, db = conv2d_backward_weights(concat, d_logits, 1, 1, stride=1, dilation=1, pad=0)
    grads["merge_w"], grads["merge_b"] = dw, db
    d_concat = conv2d_backward_input(d_logits, head.merge_w, concat.shape[1], concat.shape[2], stride=1, dilation=1, pad=0)
    if d_embeds is not None:
        u, norms = cache["embeds"], np.maximum(cache["norms"], 1e-12)
        inner = (d_embeds * u).sum(axis=-1, keepdims=True)
        d_raw = (d_embeds - u * inner) / norms
        if head.proj_w is not None:
            grads["proj_w"], grads["proj_b"] = conv2d_backward_weights(concat, d_raw, 1, 1)
            d_concat = d_concat + conv2d_backward_input(d_raw, head.proj_w, concat.shape[1], concat.shape[2])
        else:
            d_concat = d_concat + d_raw
    elif head.proj_w is not None:
        grads["proj_w"] = np.zeros_like(head.proj_w)
        grads["proj_b"] = np.zeros_like(head.proj_b)
    c = head.branch_channels
    for i, rate in enumerate(ASPP_RATES):
        dz = d_concat[..., i * c : (i + 1) * c] * (cache["pre"][i] > 0)
        dw, db = conv2d_backward_weights(feats, dz, 3, 3, stride=1, dilation=rate, pad=rate)
        grads[f"branch{rate}_w"], grads[f"branch{rate}_b"] = dw, db
    return grads


# ---------------------------------------------------------------------------
# binary cross-entropy family


def _clamped(probs):
    return np.clip(np.asarray(probs, dtype=np.float64), CLAMP, 1.0 - CLAMP)


def _soft_bce(probs, targets):
    p = np.asarray(probs, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeMismatch(f"probs {p.shape} vs targets {t.shape}")
    pc = _clamped(p)
    total = t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc)
    return -float(total.sum()) / p.size


def _soft_bce_grad(probs, targets):
    p = np.asarray(probs, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeMismatch(f"probs {p.shape} vs targets {t.shape}")
    pc = _clamped(p)
    grad = -(t / pc - (1.0 - t) / (1.0 - pc)) / p.size
    grad[(p < CLAMP) | (p > 1.0 - CLAMP)] = 0.0
    return grad


def loss_bce_new(probs, pseudo_planes):
    """Pixel-wise BCE of new-class probabilities against binary pseudo
    masks, averaged over classes and pixels."""
    return _soft_bce(probs, pseudo_planes)


def loss_bce_new_grad(probs, pseudo_planes):
    return _soft_bce_grad(probs, pseudo_planes)


def loss_bce_old(probs, targets):
    """Soft-target BCE tying the head's old-class outputs to the previous
    model (pasted pixels carry forced targets, see build_old_targets)."""
    return _soft_bce(probs, targets)


def loss_bce_old_grad(probs, targets):
    return _soft_bce_grad(probs, targets)


def build_old_targets(old_probs, paste, old_layout):
    """Old-class supervision: the previous model's probabilities, except
    that pixels under a pasted crop get target 1 for the pasted class."""
    targets = np.array(old_probs, dtype=np.float64, copy=True)
    if paste is None:
        return targets
    class_id, plane = paste
    class_id = int(class_id)
    if class_id not in old_layout:
        raise UnknownClass(f"pasted class {class_id} is not an old class")
    plane = np.asarray(plane)
    if plane.shape != targets.shape[:2]:
        raise ShapeMismatch(f"paste plane {plane.shape} vs targets {targets.shape[:2]}")
    targets[plane == 1, old_layout.index(class_id)] = 1.0
    return targets


# ---------------------------------------------------------------------------
# dense contrastive loss


@dataclass
class ContrastBatch:
    embeddings: np.ndarray  # (A, E)
    class_ids: np.ndarray  # (A,)
    pixels: list  # (image, i, j) per anchor

    def __len__(self):
        return self.embeddings.shape[0]


def sample_contrast_points(label_planes, embed_fields, class_ids, per_class, rng):
    """Sample up to `per_class` anchor pixels for every class with pseudo
    foreground in the batch (with replacement when fewer exist).

    label_planes: (N, h, w, C) binary, embed_fields: (N, h, w, E).
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    planes = np.asarray(label_planes)
    embeds = np.asarray(embed_fields)
    anchors, ids, pixels = [], [], []
    found = False
    for c, cid in enumerate(class_ids):
        coords = np.argwhere(planes[:, :, :, c] == 1)
        if coords.shape[0] == 0:
            continue
        found = True
        sel = rng.choice(coords.shape[0], size=per_class, replace=coords.shape[0] < per_class)
        for s in sel:
            n, i, j = coords[s]
            anchors.append(embeds[n, i, j])
            ids.append(int(cid))
            pixels.append((int(n), int(i), int(j)))
    if not found:
        raise NoForeground("no class has any pseudo foreground in this batch")
    return ContrastBatch(np.stack(anchors), np.asarray(ids, dtype=np.int64), pixels)


def _dcl_terms(batch, tau):
    if tau <= 0:
        raise BadTemperature(f"temperature must be positive, got {tau}")
    emb = np.asarray(batch.embeddings, dtype=np.float64)
    if emb.shape[0] < 1:
        raise NoForeground("contrastive batch is empty")
    sims = emb @ emb.T / tau
    return emb, sims


def loss_dcl(batch, tau):
    """InfoNCE over anchor pixels: positives are other anchors of the same
    class, negatives are anchors of other classes. Anchors without
    positives contribute nothing; with no negatives the loss is exactly 0.
    """
    _, sims = _dcl_terms(batch, tau)
    ids = batch.class_ids
    total, counted = 0.0, 0
    for a in range(len(ids)):
        pos = np.where((ids == ids[a]) & (np.arange(len(ids)) != a))[0]
        if pos.size == 0:
            continue
        neg = np.where(ids != ids[a])[0]
        counted += 1
        acc = 0.0
        for p in pos:
            row = np.concatenate(([sims[a, p]], sims[a, neg]))
            m = row.max()
            acc += m + np.log(np.exp(row - m).sum()) - sims[a, p]
        total += acc / pos.size
    return total / counted if counted else 0.0


def loss_dcl_grad(batch, tau):
    """d loss / d embeddings, matching loss_dcl exactly."""
    emb, sims = _dcl_terms(batch, tau)
    ids = batch.class_ids
    n = len(ids)
    coef = np.zeros((n, n))
    counted = 0
    for a in range(n):
        pos = np.where((ids == ids[a]) & (np.arange(n) != a))[0]
        if pos.size == 0:
            continue
        neg = np.where(ids != ids[a])[0]
        counted += 1
        for p in pos:
            row = np.concatenate(([sims[a, p]], sims[a, neg]))
            m = row.max()
            ex = np.exp(row - m)
            z = ex.sum()
            coef[a, p] += (ex[0] / z - 1.0) / pos.size
            if neg.size:
                coef[a, neg] += ex[1:] / z / pos.size
    if counted == 0:
        return np.zeros_like(emb)
    grad = (coef @ emb + coef.T @ emb) / (tau * counted)
    return grad


def total_loss(l_new, l_dcl, l_old, l_all, lam):
    parts = (l_new, l_dcl, l_old, l_all)
    if not all(np.isfinite(parts)) or not np.isfinite(lam):
        raise NonFinite(f"non-finite loss component in {parts}")
    return l_new + lam * l_dcl + l_old + l_all


# ---------------------------------------------------------------------------
# checkpoint ("FMWT": magic, version u16, param count u64, float32 LE in
# param_items order)

TEACHER_MAGIC = b"FMWT"
TEACHER_VERSION = 1


def write_teacher_checkpoint(path, head):
    flat = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for _, a in head.param_items()])
    with open(path, "wb") as fh:
        fh.write(TEACHER_MAGIC)
        fh.write(struct.pack("<HQ", TEACHER_VERSION, flat.size))
        fh.write(flat.astype("<f4").tobytes())


def read_teacher_checkpoint(path, head):
    """Load parameters into a head built with matching dimensions."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != TEACHER_MAGIC:
        raise FormatError(f"bad teacher checkpoint magic {data[:4]!r}")
    version, count = struct.unpack_from("<HQ", data, 4)
    if version != TEACHER_VERSION:
        raise FormatError(f"unsupported teacher checkpoint version {version}")
    flat = np.frombuffer(data, dtype="<f4", offset=14)
    if flat.size != count:
        raise FormatError("teacher checkpoint truncated")
    off = 0
    for _, arr in head.param_items():
        n = arr.size
        if off + n > flat.size:
            raise FormatError("teacher checkpoint does not match head shape")
        arr[...] = flat[off : off + n].astype(np.float64).reshape(arr.shape)
        off += n
    if off != flat.size:
        raise FormatError("teacher checkpoint does not match head shape")
    return head
