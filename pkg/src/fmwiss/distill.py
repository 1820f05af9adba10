"""Student model, supervision synthesis, and the two-phase step trainer.

The desk-scale student is three conv blocks: two stride-2 3x3 convs (the
backbone) and a 1x1 head with one channel per seen class, background
first. An incremental step warms up the teacher alone for a few epochs,
then trains teacher and student jointly: the teacher keeps its own
losses, the student regresses a soft target mixed from the hard/soft
teacher outputs (new classes) and the frozen previous model (old classes
and background). Teacher and previous-model outputs feed the student as
constants; no gradient crosses those boundaries.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .coseg import downsample_nearest, upsample_nearest
from .errors import FormatError, MissingPseudoLabels, NoForeground, ShapeMismatch
from .kernels import (
    conv2d_backward_input,
    conv2d_backward_weights,
    conv2d_forward,
    out_size,
    relu,
    sigmoid,
)
from .label_space import channel_layout, classes_seen
from .memory_paste import copy_paste
from .seeding import substream
from .teacher import (
    _soft_bce,
    _soft_bce_grad,
    build_old_targets,
    init_teacher_head,
    loss_bce_new,
    loss_bce_old,
    loss_dcl,
    loss_dcl_grad,
    sample_contrast_points,
    teacher_backward,
    teacher_forward_train,
    total_loss,
)

STUDENT_MAGIC = b"FMWS"
STUDENT_VERSION = 1


@dataclass
class StudentModel:
    conv1_w: np.ndarray  # (3, 3, 3, c1), stride 2
    conv1_b: np.ndarray
    conv2_w: np.ndarray  # (3, 3, c1, c2), stride 2
    conv2_b: np.ndarray
    head_w: np.ndarray  # (1, 1, c2, out)
    head_b: np.ndarray

    @property
    def out_channels(self):
        return self.head_w.shape[3]

    @property
    def feat_channels(self):
        return self.conv2_w.shape[3]

    def param_items(self):
        yield "conv1_w", self.conv1_w
        yield "conv1_b", self.conv1_b
        yield "conv2_w", self.conv2_w
        yield "conv2_b", self.conv2_b
        yield "head_w", self.head_w
        yield "head_b", self.head_b

    def copy(self):
        return StudentModel(*(np.array(a, copy=True) for _, a in self.param_items()))


def init_student(channels, out_channels, rng):
    c1, c2 = channels
    w1 = rng.normal(0.0, np.sqrt(2.0 / 27.0), size=(3, 3, 3, c1))
    w2 = rng.normal(0.0, np.sqrt(2.0 / (9.0 * c1)), size=(3, 3, c1, c2))
    wh = rng.normal(0.0, np.sqrt(1.0 / c2), size=(1, 1, c2, out_channels))
    return StudentModel(w1, np.zeros(c1), w2, np.zeros(c2), wh, np.zeros(out_channels))


def extend_student(model, n_new):
    """Copy of `model` whose head gains `n_new` zero-initialized channels
    (logit 0, probability one half: a neutral start for unseen classes);
    existing channels keep their weights."""
    out = model.copy()
    c2 = model.feat_channels
    out.head_w = np.concatenate([out.head_w, np.zeros((1, 1, c2, n_new))], axis=3)
    out.head_b = np.concatenate([out.head_b, np.zeros(n_new)])
    return out


def grid_shape(height, width):
    h = out_size(out_size(height, 3, 2, 1, 1), 3, 2, 1, 1)
    w = out_size(out_size(width, 3, 2, 1, 1), 3, 2, 1, 1)
    return h, w


def student_forward(model, x):
    """x is (N, H, W, 3) in [0, 1]; returns logits, features, and the
    cache needed for a backward pass."""
    x = np.asarray(x, dtype=np.float64)
    z1 = conv2d_forward(x, model.conv1_w, model.conv1_b, stride=2, dilation=1, pad=1)
    a1 = relu(z1)
    z2 = conv2d_forward(a1, model.conv2_w, model.conv2_b, stride=2, dilation=1, pad=1)
    a2 = relu(z2)
    logits = conv2d_forward(a2, model.head_w, model.head_b, stride=1, dilation=1, pad=0)
    cache = {"x": x, "z1": z1, "a1": a1, "z2": z2, "a2": a2}
    return logits, a2, cache


def student_backward(model, cache, d_logits):
    grads = {}
    grads["head_w"], grads["head_b"] = conv2d_backward_weights(cache["a2"], d_logits, 1, 1)
    da2 = conv2d_backward_input(d_logits, model.head_w, cache["a2"].shape[1], cache["a2"].shape[2])
    dz2 = da2 * (cache["z2"] > 0)
    grads["conv2_w"], grads["conv2_b"] = conv2d_backward_weights(cache["a1"], dz2, 3, 3, stride=2, dilation=1, pad=1)
    da1 = conv2d_backward_input(dz2, model.conv2_w, cache["a1"].shape[1], cache["a1"].shape[2], stride=2, dilation=1, pad=1)
    dz1 = da1 * (cache["z1"] > 0)
    grads["conv1_w"], grads["conv1_b"] = conv2d_backward_weights(cache["x"], dz1, 3, 3, stride=2, dilation=1, pad=1)
    return grads


class SgdState:
    """Plain SGD with momentum and weight decay, velocity per parameter."""

    def __init__(self, lr, momentum, weight_decay):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {}

    def step(self, param_items, grads):
        for name, param in param_items:
            g = grads[name] + self.weight_decay * param
            v = self._velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self._velocity[name] = v
            param -= self.lr * v


# ---------------------------------------------------------------------------
# supervision synthesis


def one_hot_hard(probs):
    """Per pixel, 1 at the maximum channel and 0 elsewhere; on ties the
    lowest channel index wins."""
    p = np.asarray(probs)
    out = np.zeros_like(p, dtype=np.float64)
    idx = np.argmax(p, axis=-1)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def combine_supervision(teacher_probs, old_model_probs, taxonomy, step, alpha, beta):
    """Soft targets for the student: new classes mix the teacher's one-hot
    and soft outputs by alpha; old classes and background mix the frozen
    previous model with the teacher by beta."""
    t = np.asarray(teacher_probs, dtype=np.float64)
    o = np.asarray(old_model_probs, dtype=np.float64)
    n_all = len(channel_layout(taxonomy, step))
    n_old = len(channel_layout(taxonomy, step - 1))
    if t.shape[-1] != n_all:
        raise ShapeMismatch(f"teacher provides {t.shape[-1]} channels, step needs {n_all}")
    if o.shape[-1] != n_old or t.shape[:-1] != o.shape[:-1]:
        raise ShapeMismatch(f"old-model output {o.shape} incompatible with teacher {t.shape}")
    hard = one_hot_hard(t)
    q = np.empty_like(t)
    q[..., :n_old] = beta * o + (1.0 - beta) * t[..., :n_old]
    q[..., n_old:] = alpha * hard[..., n_old:] + (1.0 - alpha) * t[..., n_old:]
    return q


def loss_bce_all(student_probs, q):
    """Soft-target BCE over every seen class and pixel."""
    return _soft_bce(student_probs, q)


def loss_bce_all_grad(student_probs, q):
    return _soft_bce_grad(student_probs, q)


# ---------------------------------------------------------------------------
# training loops


def pseudo_planes(pls, new_class_ids, gh, gw):
    """Stack a pseudo-label set into (gh, gw, C) grid planes following
    `new_class_ids`; classes without a mask contribute zeros."""
    planes = np.zeros((gh, gw, len(new_class_ids)), dtype=np.float64)
    for c, cid in enumerate(new_class_ids):
        mask = pls.masks.get(int(cid))
        if mask is not None:
            planes[:, :, c] = downsample_nearest(mask, gh, gw)
    return planes


def _one_hot_targets(labels, layout, gh, gw):
    grid = downsample_nearest(np.asarray(labels), gh, gw)
    target = np.zeros((gh, gw, len(layout)), dtype=np.float64)
    for ch, cid in enumerate(layout):
        target[:, :, ch] = grid == cid
    return target


def train_base(taxonomy, ids, image_fn, labels_fn, cfg, seed):
    """Supervised base step: BCE against label-smoothed one-hot ground
    truth at grid resolution.

    Smoothing bounds the logits, which matters twice at the next step:
    the incremental student inherits these weights (saturated channels
    train too slowly) and the frozen copy's probabilities become soft
    distillation targets.
    """
    layout = channel_layout(taxonomy, 0)
    student = init_student(cfg.channels, len(layout), substream(seed, "init", "student", 0))
    opt = SgdState(cfg.lr, cfg.momentum, cfg.weight_decay)
    probe = np.asarray(image_fn(ids[0]))
    gh, gw = grid_shape(probe.shape[0], probe.shape[1])
    s = cfg.base_smooth
    targets = {i: _one_hot_targets(labels_fn(i), layout, gh, gw) * (1.0 - 2.0 * s) + s for i in ids}
    metrics = []
    for epoch in range(cfg.epochs):
        order = substream(seed, "sampling", "base-order", epoch).permutation(len(ids))
        losses = []
        for lo in range(0, len(ids), cfg.batch):
            chunk = [ids[k] for k in order[lo : lo + cfg.batch]]
            x = np.stack([np.asarray(image_fn(i), dtype=np.float64) / 255.0 for i in chunk])
            t = np.stack([targets[i] for i in chunk])
            logits, _, cache = student_forward(student, x)
            probs = sigmoid(logits)
            losses.append(_soft_bce(probs, t))
            d_logits = (probs - t) / probs.size
            opt.step(student.param_items(), student_backward(student, cache, d_logits))
        mean = float(np.mean(losses))
        metrics.append({"epoch": epoch, "l_new": 0.0, "l_dcl": 0.0, "l_old": 0.0, "l_all": mean, "total": mean})
    return student, metrics


def run_incremental_step(prev_model, taxonomy, step, ids, image_fn, pseudo_fn, bank, cfg, seed):
    """One weakly-supervised step: teacher warm-up, then joint training.

    `pseudo_fn` must return the cached pseudo-label set for every step
    image. Deterministic given (inputs, seed); the previous model is never
    written to.
    """
    if step < 1:
        raise ValueError("incremental steps start at 1")
    layout_all = channel_layout(taxonomy, step)
    layout_old = channel_layout(taxonomy, step - 1)
    n_old = len(layout_old)
    new_ids = [c for c in layout_all[n_old:]]
    if prev_model.out_channels != n_old:
        raise ShapeMismatch(f"previous model has {prev_model.out_channels} channels, expected {n_old}")

    student = extend_student(prev_model, len(new_ids))
    teacher = init_teacher_head(
        student.feat_channels, cfg.embed_channels, len(layout_all),
        substream(seed, "init", "teacher", step), proj_channels=cfg.embed_projection,
    )
    opt_s = SgdState(cfg.lr, cfg.momentum, cfg.weight_decay)
    opt_t = SgdState(cfg.lr, cfg.momentum, cfg.weight_decay)

    probe = np.asarray(image_fn(ids[0]))
    gh, gw = grid_shape(probe.shape[0], probe.shape[1])
    planes = {}
    for i in ids:
        pls = pseudo_fn(i)
        if pls is None:
            raise MissingPseudoLabels(f"no cached pseudo labels for image {i!r}")
        planes[i] = pseudo_planes(pls, new_ids, gh, gw)

    metrics = []
    for epoch in range(cfg.epochs):
        joint = epoch >= cfg.warmup_epochs
        order = substream(seed, "sampling", "order", step, epoch).permutation(len(ids))
        sums = np.zeros(5)
        n_batches = 0
        for bi, lo in enumerate(range(0, len(ids), cfg.batch)):
            chunk = [ids[k] for k in order[lo : lo + cfg.batch]]
            images, pastes = [], []
            for i in chunk:
                img, paste = copy_paste(np.asarray(image_fn(i)), bank, cfg.paste_prob, substream(seed, "paste", step, epoch, i))
                images.append(img)
                pastes.append(paste)
            x = np.stack([im.astype(np.float64) / 255.0 for im in images])

            prev_logits, _, _ = student_forward(prev_model, x)
            # distillation clamp: the frozen model is overconfident off its
            # training distribution, so its probabilities are bounded away
            # from 0/1 before serving as targets
            old_probs = np.clip(sigmoid(prev_logits), cfg.distill_clamp, 1.0 - cfg.distill_clamp)
            old_targets = np.empty_like(old_probs)
            for n, paste in enumerate(pastes):
                down = None if paste is None else (paste[0], downsample_nearest(paste[1], gh, gw))
                old_targets[n] = build_old_targets(old_probs[n], down, layout_old)

            # pasted pixels carry the pasted class's supervision, so they
            # stop counting as pseudo foreground for the new classes
            plane_batch = np.stack([planes[i] for i in chunk])
            for n, paste in enumerate(pastes):
                if paste is not None:
                    plane_batch[n][downsample_nearest(paste[1], gh, gw) == 1] = 0.0

            s_logits, feats, s_cache = student_forward(student, x)
            t_logits, t_embeds, t_cache = teacher_forward_train(teacher, feats)
            t_probs = sigmoid(t_logits)

            l_new = loss_bce_new(t_probs[..., n_old:], plane_batch)
            l_old = loss_bce_old(t_probs[..., :n_old], old_targets)
            d_t = np.empty_like(t_probs)
            d_t[..., n_old:] = (t_probs[..., n_old:] - plane_batch) / plane_batch.size
            d_t[..., :n_old] = (t_probs[..., :n_old] - old_targets) / old_targets.size

            l_dcl = 0.0
            d_embed_field = None
            if cfg.lambda_dcl != 0.0:
                try:
                    cbatch = sample_contrast_points(
                        plane_batch, t_embeds, new_ids, cfg.per_class_points,
                        substream(seed, "sampling", "contrast", step, epoch, bi),
                    )
                except NoForeground:
                    cbatch = None
                if cbatch is not None:
                    l_dcl = loss_dcl(cbatch, cfg.tau)
                    g = loss_dcl_grad(cbatch, cfg.tau) * cfg.lambda_dcl
                    d_embed_field = np.zeros_like(t_embeds)
                    for a, (n, i, j) in enumerate(cbatch.pixels):
                        d_embed_field[n, i, j] += g[a]

            t_grads = teacher_backward(teacher, t_cache, d_t, d_embed_field)

            l_all = 0.0
            if joint:
                q = combine_supervision(t_probs, old_probs, taxonomy, step, cfg.alpha, cfg.beta)
                s_probs = sigmoid(s_logits)
                l_all = loss_bce_all(s_probs, q)
                d_s = (s_probs - q) / q.size
                opt_s.step(student.param_items(), student_backward(student, s_cache, d_s))
            opt_t.step(teacher.param_items(), t_grads)

            sums += (l_new, l_dcl, l_old, l_all, total_loss(l_new, l_dcl, l_old, l_all, cfg.lambda_dcl))
            n_batches += 1
        avg = sums / max(n_batches, 1)
        metrics.append({"epoch": epoch, "l_new": avg[0], "l_dcl": avg[1], "l_old": avg[2], "l_all": avg[3], "total": avg[4]})
    return student, teacher, metrics


# ---------------------------------------------------------------------------
# inference and evaluation


def predict_labels(student, layout, image):
    """Per-pixel class ids at image resolution (argmax incl. background)."""
    x = np.asarray(image, dtype=np.float64)[None] / 255.0
    logits, _, _ = student_forward(student, x)
    pred_grid = np.argmax(logits[0], axis=-1)
    pred = upsample_nearest(pred_grid, image.shape[0], image.shape[1])
    lut = np.asarray(layout, dtype=np.int64)
    return lut[pred]


def default_groups(taxonomy, step):
    base = set(taxonomy.steps[0].new_classes)
    seen = classes_seen(taxonomy, step)
    groups = {"base": base, "all": seen}
    if step >= 1:
        groups["new"] = seen - base
    return groups


def evaluate_model(student, taxonomy, step, ids, image_fn, labels_fn, groups=None):
    """Grouped mIoU over a validation roster. Ground-truth ids of classes
    not yet seen at `step` count as background, mirroring how incremental
    protocols score early checkpoints on a shared val set."""
    from .eval_protocol import ConfusionMatrix, confusion_update, miou

    layout = channel_layout(taxonomy, step)
    known = set(layout)
    cm = ConfusionMatrix(layout[1:])
    for i in ids:
        pred = predict_labels(student, layout, np.asarray(image_fn(i)))
        gt = np.asarray(labels_fn(i))
        if not set(np.unique(gt)) <= known:
            gt = np.where(np.isin(gt, list(known)), gt, 0)
        confusion_update(cm, gt, pred)
    return miou(cm, groups or default_groups(taxonomy, step))


# ---------------------------------------------------------------------------
# checkpoint ("FMWS": magic, version u16, taxonomy digest u64, param count
# u64, float32 LE in param_items order)


def taxonomy_digest(taxonomy):
    text = "|".join(",".join(str(c) for c in sorted(s.new_classes)) for s in taxonomy.steps)
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def write_student_checkpoint(path, model, taxonomy):
    flat = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for _, a in model.param_items()])
    with open(path, "wb") as fh:
        fh.write(STUDENT_MAGIC)
        fh.write(struct.pack("<HQQ", STUDENT_VERSION, taxonomy_digest(taxonomy), flat.size))
        fh.write(flat.astype("<f4").tobytes())


def read_student_checkpoint(path, channels):
    """Rebuild a student from a checkpoint; the class count is recovered
    from the parameter count. Returns (model, taxonomy_digest)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != STUDENT_MAGIC:
        raise FormatError(f"bad student checkpoint magic {data[:4]!r}")
    version, digest, count = struct.unpack_from("<HQQ", data, 4)
    if version != STUDENT_VERSION:
        raise FormatError(f"unsupported student checkpoint version {version}")
    flat = np.frombuffer(data, dtype="<f4", offset=22)
    if flat.size != count:
        raise FormatError("student checkpoint truncated")
    c1, c2 = channels
    backbone = 27 * c1 + c1 + 9 * c1 * c2 + c2
    out, rem = divmod(int(count) - backbone, c2 + 1)
    if rem != 0 or out < 1:
        raise FormatError("student checkpoint does not match configured channels")
    model = init_student(channels, out, np.random.default_rng(0))
    off = 0
    for _, arr in model.param_items():
        arr[...] = flat[off : off + arr.size].astype(np.float64).reshape(arr.shape)
        off += arr.size
    return model, digest
