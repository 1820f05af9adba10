"""Command-line entry point.

Commands: coseg, train-base, train-step, eval, bank-inspect. Every
command validates the full config before any side effect. Unknown
`--dotted.path value` pairs override config keys, e.g. `--train.lr 0.01`.

Exit codes: 0 ok, 1 validation, 2 backend or IO failure, 3 missing
prerequisite artifact.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import distill, label_space, memory_paste, synthetic
from .backends import DirSslBackend, DirVlpBackend, HttpSslBackend, HttpVlpBackend
from .config import load_run_config
from .coseg import generate_pseudo_labels, read_mask_cache, write_mask_cache
from .errors import (
    BackendFailure,
    ConfigError,
    FmwissError,
    FormatError,
    MissingPrerequisite,
    MissingPseudoLabels,
)
from .eval_protocol import format_report, save_report
from .seeding import substream
from .synthetic import SyntheticSslBackend, SyntheticVlpBackend
from .teacher import write_teacher_checkpoint


class DirDataset:
    """On-disk dataset: index.json, splits.json, images/<id>.npy and
    labels/<id>.npy (labels only where pixel ground truth exists)."""

    def __init__(self, root):
        self.root = root
        self.train_index = label_space.load_index(os.path.join(root, "index.json"))
        splits_path = os.path.join(root, "splits.json")
        if not os.path.isfile(splits_path):
            raise ConfigError(f"dir dataset needs {splits_path}")
        with open(splits_path, "r", encoding="utf-8") as fh:
            self.val_ids = list(json.load(fh).get("val", []))

    def image(self, image_id):
        return np.load(os.path.join(self.root, "images", f"{image_id}.npy"))

    def labels(self, image_id):
        return np.load(os.path.join(self.root, "labels", f"{image_id}.npy"))


def build_dataset(cfg, taxonomy):
    spec = cfg.dataset
    if spec["kind"] == "dir":
        return DirDataset(spec["path"])
    params = synthetic.WorldParams(
        image_size=int(spec.get("image_size", 64)),
        grid=int(spec.get("grid", 16)),
        feat_dim=int(spec.get("feat_dim", 32)),
        n_heads=int(spec.get("n_heads", 4)),
        feature_noise=float(spec.get("feature_noise", 0.12)),
        attn_noise=float(spec.get("attn_noise", 0.06)),
        dropout_band=float(spec.get("dropout_band", 0.35)),
    )
    return synthetic.build_synthetic_dataset(
        cfg.seed,
        taxonomy,
        n_base=int(spec.get("base_images", 80)),
        n_step=int(spec.get("step_images", 60)),
        n_val=int(spec.get("val_images", 30)),
        params=params,
        overlap_frac=float(spec.get("overlap_frac", 0.35)),
    )


def build_backends(cfg, taxonomy, dataset):
    names = {cid: taxonomy.class_names[cid] for cid in taxonomy.class_names}
    out = []
    for side in ("vlp", "ssl"):
        spec = cfg.backends.get(side, "synthetic")
        if spec == "synthetic":
            out.append(SyntheticVlpBackend(dataset.world) if side == "vlp" else SyntheticSslBackend(dataset.world))
        elif spec.startswith("dir:"):
            root = spec[4:]
            out.append(DirVlpBackend(root, names) if side == "vlp" else DirSslBackend(root))
        else:
            out.append(HttpVlpBackend(spec, names) if side == "vlp" else HttpSslBackend(spec))
    return out


def _write_metrics(path, metrics):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in metrics:
            fh.write(json.dumps(rec) + "\n")


def _mask_dir(cfg, step):
    return os.path.join(cfg.output_dir, "masks", f"step{step}")


def _ckpt_paths(cfg, step):
    if step == 0:
        d = os.path.join(cfg.output_dir, "base")
    else:
        d = os.path.join(cfg.output_dir, f"step{step}")
    return d, os.path.join(d, "student.fmws")


def cmd_coseg(cfg, force=False, only_step=None):
    taxonomy = cfg.taxonomy()
    dataset = build_dataset(cfg, taxonomy)
    vlp, ssl = build_backends(cfg, taxonomy, dataset)
    params = cfg.coseg_params()
    steps = [only_step] if only_step else list(range(1, taxonomy.num_steps))
    for step in steps:
        if not 1 <= step < taxonomy.num_steps:
            raise ConfigError(f"step {step} out of range for this taxonomy")
        fresh = label_space.new_classes(taxonomy, step)
        roster = label_space.split_dataset(dataset.train_index, taxonomy, step, cfg.protocol)
        entry_classes = {e.image_id: e.present_classes for e in dataset.train_index}
        outdir = _mask_dir(cfg, step)
        os.makedirs(outdir, exist_ok=True)
        written = skipped = 0
        manifest = {"step": step, "protocol": cfg.protocol, "fusion": params.fusion, "masks": {}}
        for image_id in roster:
            path = os.path.join(outdir, f"{image_id}.fmwm")
            if not force and os.path.isfile(path):
                try:
                    read_mask_cache(path)
                    manifest["masks"][image_id] = os.path.basename(path)
                    skipped += 1
                    continue
                except FormatError:
                    pass  # invalid cache entries are regenerated
            labels = sorted(entry_classes[image_id] & fresh)
            pls = generate_pseudo_labels(
                dataset.image(image_id), image_id, labels, vlp, ssl, params,
                lambda cid, _img=image_id: substream(cfg.seed, "coseg", _img, cid),
            )
            write_mask_cache(path, pls)
            manifest["masks"][image_id] = os.path.basename(path)
            written += 1
        with open(os.path.join(outdir, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        print(f"coseg step {step}: {written} written, {skipped} skipped, {len(roster)} total")
    return 0


def cmd_train_base(cfg):
    taxonomy = cfg.taxonomy()
    dataset = build_dataset(cfg, taxonomy)
    gt_ids = {e.image_id for e in dataset.train_index if e.has_pixel_gt}
    roster = [i for i in label_space.split_dataset(dataset.train_index, taxonomy, 0, cfg.protocol) if i in gt_ids]
    if not roster:
        raise ConfigError("no pixel-labelled base images in the dataset")
    student, metrics = distill.train_base(taxonomy, roster, dataset.image, dataset.labels, cfg.train, cfg.seed)

    bank = memory_paste.MemoryBank(cfg.train.bank_capacity, frozenset(label_space.classes_seen(taxonomy, 0)))
    if cfg.train.bank_capacity > 0:
        for image_id in roster:
            memory_paste.harvest_crops(bank, dataset.image(image_id), dataset.labels(image_id), bank.old_classes)

    outdir, ckpt = _ckpt_paths(cfg, 0)
    os.makedirs(outdir, exist_ok=True)
    distill.write_student_checkpoint(ckpt, student, taxonomy)
    memory_paste.write_bank(os.path.join(outdir, "bank.fmwb"), bank)
    _write_metrics(os.path.join(outdir, "metrics.jsonl"), metrics)
    print(f"train-base: {len(roster)} images, {cfg.train.epochs} epochs, bank crops {bank.total()}")
    return 0


def cmd_train_step(cfg, step):
    taxonomy = cfg.taxonomy()
    if not 1 <= step < taxonomy.num_steps:
        raise ConfigError(f"step {step} out of range for this taxonomy")
    dataset = build_dataset(cfg, taxonomy)

    _, prev_ckpt = _ckpt_paths(cfg, step - 1)
    if not os.path.isfile(prev_ckpt):
        raise MissingPrerequisite(f"missing previous checkpoint {prev_ckpt}", path=prev_ckpt)
    prev_model, digest = distill.read_student_checkpoint(prev_ckpt, cfg.train.channels)
    if digest != distill.taxonomy_digest(taxonomy):
        raise ConfigError(f"checkpoint {prev_ckpt} was trained under a different taxonomy")

    roster = label_space.split_dataset(dataset.train_index, taxonomy, step, cfg.protocol)
    if not roster:
        raise ConfigError(f"step {step} roster is empty under protocol {cfg.protocol}")
    maskdir = _mask_dir(cfg, step)
    cache = {}
    for image_id in roster:
        path = os.path.join(maskdir, f"{image_id}.fmwm")
        if not os.path.isfile(path):
            raise MissingPseudoLabels(f"missing pseudo labels {path} (run coseg first)", path=path)
        cache[image_id] = read_mask_cache(path)

    old_classes = frozenset(label_space.classes_seen(taxonomy, step - 1))
    bank_path = os.path.join(cfg.output_dir, "base", "bank.fmwb")
    if os.path.isfile(bank_path):
        bank = memory_paste.read_bank(bank_path, cfg.train.bank_capacity, old_classes)
    elif cfg.train.paste_prob > 0 and cfg.train.bank_capacity > 0:
        raise MissingPrerequisite(f"missing memory bank {bank_path} (run train-base first)", path=bank_path)
    else:
        bank = memory_paste.MemoryBank(cfg.train.bank_capacity, old_classes)

    student, teacher, metrics = distill.run_incremental_step(
        prev_model, taxonomy, step, roster, dataset.image, cache.get, bank, cfg.train, cfg.seed
    )
    outdir, ckpt = _ckpt_paths(cfg, step)
    os.makedirs(outdir, exist_ok=True)
    distill.write_student_checkpoint(ckpt, student, taxonomy)
    write_teacher_checkpoint(os.path.join(outdir, "teacher.fmwt"), teacher)
    _write_metrics(os.path.join(outdir, "metrics.jsonl"), metrics)
    print(f"train-step {step}: {len(roster)} images, epochs {cfg.train.epochs} (warmup {cfg.train.warmup_epochs})")
    return 0


def cmd_eval(cfg, checkpoint):
    taxonomy = cfg.taxonomy()
    dataset = build_dataset(cfg, taxonomy)
    if not os.path.isfile(checkpoint):
        raise MissingPrerequisite(f"missing checkpoint {checkpoint}", path=checkpoint)
    model, digest = distill.read_student_checkpoint(checkpoint, cfg.train.channels)
    if digest != distill.taxonomy_digest(taxonomy):
        raise ConfigError(f"checkpoint {checkpoint} was trained under a different taxonomy")
    step = next((t for t in range(taxonomy.num_steps) if len(label_space.channel_layout(taxonomy, t)) == model.out_channels), None)
    if step is None:
        raise ConfigError(f"checkpoint channel count {model.out_channels} matches no step of this taxonomy")
    if not dataset.val_ids:
        raise ConfigError("dataset has no validation ids")
    report = distill.evaluate_model(model, taxonomy, step, dataset.val_ids, dataset.image, dataset.labels)
    outdir = os.path.join(cfg.output_dir, "eval")
    os.makedirs(outdir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(checkpoint))[0]
    tag = os.path.basename(os.path.dirname(checkpoint)) or stem
    save_report(report, os.path.join(outdir, f"report_{tag}_{stem}.json"), os.path.join(outdir, f"report_{tag}_{stem}.txt"))
    print(format_report(report))
    return 0


def cmd_bank_inspect(path):
    if not os.path.isfile(path):
        raise MissingPrerequisite(f"missing bank file {path}", path=path)
    summary = memory_paste.scan_bank(path)
    total = sum(n for _, n, _ in summary)
    print(f"bank {path}: {len(summary)} classes, {total} crops")
    for cid, n, shapes in summary:
        dims = ", ".join(f"{h}x{w}" for h, w in shapes[:6])
        more = "" if n <= 6 else f", +{n - 6} more"
        print(f"  class {cid}: {n} crops ({dims}{more})")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(prog="fmwiss", description="Weakly incremental segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("coseg", help="generate and cache pseudo labels for incremental steps")
    p.add_argument("--config", required=True)
    p.add_argument("--step", type=int, default=None, help="only this step (default: all steps >= 1)")
    p.add_argument("--force", action="store_true", help="regenerate existing cache files")

    p = sub.add_parser("train-base", help="train the base-step model on pixel labels")
    p.add_argument("--config", required=True)

    p = sub.add_parser("train-step", help="run one weakly-supervised incremental step")
    p.add_argument("--config", required=True)
    p.add_argument("--step", type=int, default=1)

    p = sub.add_parser("eval", help="evaluate a student checkpoint on the validation split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("bank-inspect", help="summarize a memory bank file")
    p.add_argument("--bank", required=True)
    return parser


def _split_overrides(extra):
    if len(extra) % 2 != 0:
        raise ConfigError(f"dangling override token {extra[-1]!r}; use --dotted.path value")
    pairs = []
    for key, value in zip(extra[::2], extra[1::2]):
        if not key.startswith("--") or "." not in key:
            raise ConfigError(f"unrecognized argument {key!r}; overrides look like --train.lr 0.01")
        pairs.append((key[2:], value))
    return pairs


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        overrides = _split_overrides(extra)
        if args.command == "bank-inspect":
            return cmd_bank_inspect(args.bank)
        cfg = load_run_config(args.config, overrides)
        if args.command == "coseg":
            return cmd_coseg(cfg, force=args.force, only_step=args.step)
        if args.command == "train-base":
            return cmd_train_base(cfg)
        if args.command == "train-step":
            return cmd_train_step(cfg, args.step)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except MissingPrerequisite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (BackendFailure, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FmwissError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
