"""Per-class memory bank of old-class foreground crops and the copy-paste
augmentation that replays them into new-step images.

Archives are FIFO with capacity B per class: inserting into a full
archive evicts the oldest crop. Crops larger than the target image are
center-cropped to fit; paste positions are uniform over valid top-left
anchors. The bank serializes to the "FMWB" binary format.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import EmptyBank, FormatError, NotOldClass

BANK_MAGIC = b"FMWB"
BANK_VERSION = 1


@dataclass
class InstanceCrop:
    class_id: int
    patch: np.ndarray  # (Hc, Wc, 3) uint8
    mask: np.ndarray  # (Hc, Wc) uint8 in {0, 1}


@dataclass
class MemoryBank:
    capacity: int
    old_classes: frozenset
    archives: dict = field(default_factory=dict)

    def archive(self, class_id):
        return self.archives.get(int(class_id), [])

    def total(self):
        return sum(len(v) for v in self.archives.values())


def bank_insert(bank, crop):
    """Append a crop to its class archive, evicting FIFO past capacity."""
    cid = int(crop.class_id)
    if cid not in bank.old_classes:
        raise NotOldClass(f"class {cid} is not an old class")
    if crop.patch.shape[:2] != crop.mask.shape or not crop.mask.any():
        raise ValueError("crop needs matching shapes and nonempty mask")
    archive = bank.archives.setdefault(cid, [])
    archive.append(crop)
    while len(archive) > bank.capacity:
        archive.pop(0)
    return bank


def bank_sample(bank, rng):
    """Uniform class among nonempty archives, then uniform crop within."""
    nonempty = sorted(cid for cid, a in bank.archives.items() if a)
    if not nonempty:
        raise EmptyBank("no crops to sample")
    cid = nonempty[int(rng.integers(len(nonempty)))]
    archive = bank.archives[cid]
    return cid, archive[int(rng.integers(len(archive)))]


def _fit_crop(crop, h, w):
    ch, cw = crop.mask.shape
    if ch <= h and cw <= w:
        return crop
    i0 = max((ch - h) // 2, 0)
    j0 = max((cw - w) // 2, 0)
    return InstanceCrop(crop.class_id, crop.patch[i0 : i0 + h, j0 : j0 + w], crop.mask[i0 : i0 + h, j0 : j0 + w])


def copy_paste(image, bank, p, rng):
    """With probability p, paste a sampled old-class crop at a random
    position; returns (image, None) untouched otherwise or when the bank
    is empty. The returned plane marks exactly the overwritten pixels.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"paste probability must be in [0, 1], got {p}")
    if p == 0.0 or rng.random() >= p:
        return image, None
    try:
        cid, crop = bank_sample(bank, rng)
    except EmptyBank:
        return image, None
    h, w = image.shape[:2]
    crop = _fit_crop(crop, h, w)
    ch, cw = crop.mask.shape
    ti = int(rng.integers(0, h - ch + 1))
    tj = int(rng.integers(0, w - cw + 1))
    out = np.array(image, copy=True)
    region = out[ti : ti + ch, tj : tj + cw]
    sel = crop.mask == 1
    region[sel] = crop.patch[sel]
    plane = np.zeros((h, w), dtype=np.uint8)
    plane[ti : ti + ch, tj : tj + cw] = crop.mask
    return out, (cid, plane)


def harvest_crops(bank, image, labels, class_ids):
    """Insert every connected foreground component of the listed classes,
    cropped to its tight bounding box. Used while training the base step."""
    for cid in sorted(class_ids):
        comp, n = ndimage.label(labels == cid)
        for k in range(1, n + 1):
            sel = comp == k
            rows = np.any(sel, axis=1).nonzero()[0]
            cols = np.any(sel, axis=0).nonzero()[0]
            window = (slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1))
            crop = InstanceCrop(cid, np.array(image[window], copy=True), sel[window].astype(np.uint8))
            bank_insert(bank, crop)
    return bank


# ---------------------------------------------------------------------------
# bank file: magic, version u16, class count u16, then per class
# (id u16, crop count u16, per crop: Hc u32, Wc u32, rgb bytes, mask 0/255)


def write_bank(path, bank):
    out = bytearray(BANK_MAGIC)
    classes = sorted(bank.archives)
    out += struct.pack("<HH", BANK_VERSION, len(classes))
    for cid in classes:
        archive = bank.archives[cid]
        out += struct.pack("<HH", cid, len(archive))
        for crop in archive:
            ch, cw = crop.mask.shape
            out += struct.pack("<II", ch, cw)
            out += crop.patch.astype(np.uint8).tobytes()
            out += (crop.mask.astype(np.uint8) * 255).tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def scan_bank(path):
    """Summarize a bank file without materializing a MemoryBank: a list of
    (class_id, crop_count, [(Hc, Wc), ...])."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != BANK_MAGIC:
        raise FormatError(f"bad bank magic {data[:4]!r}")
    version, n_classes = struct.unpack_from("<HH", data, 4)
    if version != BANK_VERSION:
        raise FormatError(f"unsupported bank version {version}")
    off = 8
    summary = []
    try:
        for _ in range(n_classes):
            cid, n_crops = struct.unpack_from("<HH", data, off)
            off += 4
            shapes = []
            for _ in range(n_crops):
                ch, cw = struct.unpack_from("<II", data, off)
                off += 8 + 4 * ch * cw
                shapes.append((ch, cw))
            summary.append((int(cid), n_crops, shapes))
    except struct.error as exc:
        raise FormatError(f"invalid bank file: {exc}")
    if off != len(data):
        raise FormatError("trailing bytes in bank file")
    return summary


def read_bank(path, capacity, old_classes):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != BANK_MAGIC:
        raise FormatError(f"bad bank magic {data[:4]!r}")
    version, n_classes = struct.unpack_from("<HH", data, 4)
    if version != BANK_VERSION:
        raise FormatError(f"unsupported bank version {version}")
    bank = MemoryBank(capacity, frozenset(int(c) for c in old_classes))
    off = 8
    try:
        for _ in range(n_classes):
            cid, n_crops = struct.unpack_from("<HH", data, off)
            off += 4
            for _ in range(n_crops):
                ch, cw = struct.unpack_from("<II", data, off)
                off += 8
                patch = np.frombuffer(data, dtype=np.uint8, count=3 * ch * cw, offset=off).reshape(ch, cw, 3)
                off += 3 * ch * cw
                raw = np.frombuffer(data, dtype=np.uint8, count=ch * cw, offset=off).reshape(ch, cw)
                off += ch * cw
                if not np.isin(raw, (0, 255)).all():
                    raise FormatError("bank mask bytes must be 0 or 255")
                bank_insert(bank, InstanceCrop(int(cid), patch.copy(), (raw // 255).astype(np.uint8)))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"invalid bank file: {exc}")
    if off != len(data):
        raise FormatError("trailing bytes in bank file")
    return bank
