"""Incremental class taxonomy, step plans, and dataset split semantics.

Background is class id 0, implicit in every image; `present_classes`
metadata lists foreground ids only. Everything here is immutable value
data, safe to share between threads.
"""

import json
from dataclasses import dataclass

from .errors import DuplicateClass, EmptyStep, StepOutOfRange

BACKGROUND_ID = 0

PIXEL = "pixel"
IMAGE_LEVEL = "image_level"


@dataclass(frozen=True)
class StepSpec:
    step_index: int
    new_classes: frozenset
    supervision_kind: str


@dataclass(frozen=True)
class Taxonomy:
    background_id: int
    steps: tuple
    class_names: dict

    @property
    def num_steps(self):
        return len(self.steps)


@dataclass(frozen=True)
class IndexEntry:
    image_id: str
    present_classes: frozenset
    has_pixel_gt: bool


@dataclass(frozen=True)
class DatasetIndex:
    entries: tuple

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)


def build_taxonomy(base_classes, increments, class_names=None):
    """Build a step plan: step 0 holds `base_classes` with pixel labels,
    each later step adds one list from `increments` with image-level labels.
    """
    groups = [list(base_classes)] + [list(inc) for inc in increments]
    seen = set()
    for group in groups:
        if not group:
            raise EmptyStep("every step must introduce at least one class")
        for cid in group:
            cid = int(cid)
            if cid <= 0:
                raise DuplicateClass(f"class id {cid} is reserved or invalid")
            if cid in seen:
                raise DuplicateClass(f"class id {cid} appears in more than one step")
            seen.add(cid)
    steps = tuple(
        StepSpec(i, frozenset(int(c) for c in group), PIXEL if i == 0 else IMAGE_LEVEL)
        for i, group in enumerate(groups)
    )
    names = {int(c): f"class {c}" for c in seen}
    if class_names:
        names.update({int(k): str(v) for k, v in class_names.items()})
    return Taxonomy(BACKGROUND_ID, steps, names)


def _check_step(taxonomy, step):
    if not 0 <= step < taxonomy.num_steps:
        raise StepOutOfRange(f"step {step} not in [0, {taxonomy.num_steps})")


def classes_seen(taxonomy, step):
    """All foreground class ids introduced up to and including `step`."""
    _check_step(taxonomy, step)
    out = set()
    for s in taxonomy.steps[: step + 1]:
        out |= s.new_classes
    return out


def new_classes(taxonomy, step):
    _check_step(taxonomy, step)
    return set(taxonomy.steps[step].new_classes)


def channel_layout(taxonomy, step):
    """Model channel order at `step`: background, then each step's new
    classes ascending. Earlier-step channels are a prefix of later ones."""
    _check_step(taxonomy, step)
    layout = [taxonomy.background_id]
    for s in taxonomy.steps[: step + 1]:
        layout.extend(sorted(s.new_classes))
    return layout


def split_dataset(index, taxonomy, step, protocol):
    """Image ids participating in `step` under the given protocol.

    overlap keeps every image containing at least one of the step's new
    classes; disjoint additionally requires that all present classes were
    introduced by `step`. Decided from index metadata, never pixel scans.
    """
    if protocol not in ("disjoint", "overlap"):
        raise ValueError(f"unknown protocol {protocol!r}")
    fresh = new_classes(taxonomy, step)
    seen = classes_seen(taxonomy, step)
    out = []
    for entry in index:
        if not entry.present_classes & fresh:
            continue
        if protocol == "disjoint" and not entry.present_classes <= seen:
            continue
        out.append(entry.image_id)
    return out


def index_to_json(index):
    return {
        "entries": [
            {"id": e.image_id, "classes": sorted(e.present_classes), "pixel_gt": bool(e.has_pixel_gt)}
            for e in index
        ]
    }


def index_from_json(obj):
    entries = []
    for rec in obj["entries"]:
        classes = frozenset(int(c) for c in rec["classes"])
        if not classes:
            raise ValueError(f"index entry {rec.get('id')!r} lists no classes")
        entries.append(IndexEntry(str(rec["id"]), classes, bool(rec["pixel_gt"])))
    return DatasetIndex(tuple(entries))


def load_index(path):
    with open(path, "r", encoding="utf-8") as fh:
        return index_from_json(json.load(fh))


def save_index(index, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(index_to_json(index), fh, indent=2)
