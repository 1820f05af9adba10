"""Run configuration: JSON schema, validation, and dotted-path overrides.

Every command validates the whole config before doing any work. The
config seed is the only entropy source of a run (no wall-clock seeding);
see `fmwiss.seeding` for how stages derive their streams from it.
"""

import copy
import json
import os
from dataclasses import dataclass, field

from .coseg import CosegParams, DEFAULT_TEMPLATES
from .errors import ConfigError, FmwissError
from .label_space import build_taxonomy


@dataclass
class TrainConfig:
    lambda_dcl: float = 0.1
    alpha: float = 0.5
    beta: float = 0.9
    tau: float = 0.1
    k: float = 70.0
    n_seeds: int = 9
    per_class_points: int = 10
    bank_capacity: int = 50
    paste_prob: float = 0.5
    warmup_epochs: int = 5
    epochs: int = 40
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch: int = 24
    seed: int = 0
    channels: tuple = (16, 24)
    embed_channels: int = 8
    embed_projection: int = 0  # >0: contrast a projected embedding of this width
    distill_clamp: float = 0.1
    base_smooth: float = 0.05


@dataclass
class RunConfig:
    seed: int
    output_dir: str
    taxonomy_spec: dict
    dataset: dict
    backends: dict
    protocol: str = "overlap"
    coseg: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)

    def taxonomy(self):
        return build_taxonomy(
            self.taxonomy_spec["base"],
            self.taxonomy_spec.get("increments", []),
            self.taxonomy_spec.get("names"),
        )

    def coseg_params(self):
        templates = DEFAULT_TEMPLATES
        tfile = self.coseg.get("templates_file")
        if tfile:
            templates = load_templates(tfile)
        return CosegParams(
            k=self.train.k,
            k_fg=float(self.coseg.get("k_fg", self.train.k)),
            k_init=self.coseg.get("k_init"),
            n_seeds=self.train.n_seeds,
            fusion=self.coseg.get("fusion", "union"),
            templates=tuple(templates),
        )


def load_templates(path):
    """Prompt template file: one template per line, each containing {}."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ConfigError(f"template file {path} is empty")
    for ln in lines:
        if "{}" not in ln:
            raise ConfigError(f"template {ln!r} lacks a {{}} placeholder")
    return lines


def apply_overrides(raw, overrides):
    """Apply dotted-path overrides like ('train.lr', '0.05') to the raw
    config dict. Values parse as JSON when possible, else stay strings."""
    out = copy.deepcopy(raw)
    for path, value in overrides:
        node = out
        keys = path.split(".")
        for key in keys[:-1]:
            if not isinstance(node.get(key), dict):
                node[key] = {}
            node = node[key]
        try:
            node[keys[-1]] = json.loads(value)
        except (json.JSONDecodeError, TypeError):
            node[keys[-1]] = value
    return out


def _require(cond, message):
    if not cond:
        raise ConfigError(message)


def _unit_interval(raw, key):
    v = raw.get(key)
    _require(isinstance(v, (int, float)) and 0.0 <= v <= 1.0, f"train.{key} must be in [0, 1]")


def parse_run_config(raw, base_dir="."):
    _require(isinstance(raw, dict), "config root must be a JSON object")
    _require("seed" in raw and isinstance(raw["seed"], int), "config needs an integer seed")
    _require(isinstance(raw.get("output_dir"), str) and raw["output_dir"], "config needs output_dir")

    tax = raw.get("taxonomy")
    _require(isinstance(tax, dict) and tax.get("base"), "config needs taxonomy.base class list")
    dataset = raw.get("dataset")
    _require(isinstance(dataset, dict) and dataset.get("kind") in ("synthetic", "dir"), "dataset.kind must be synthetic or dir")
    if dataset["kind"] == "dir":
        path = dataset.get("path")
        _require(isinstance(path, str), "dataset.path required for dir datasets")
        dataset = dict(dataset, path=os.path.join(base_dir, path) if not os.path.isabs(path) else path)
        _require(os.path.isdir(dataset["path"]), f"dataset path {dataset['path']} does not exist")

    backends = dict(raw.get("backends") or {})
    for side in ("vlp", "ssl"):
        spec = backends.get(side, "synthetic")
        _require(isinstance(spec, str), f"backends.{side} must be a string")
        if spec.startswith("dir:"):
            root = spec[4:]
            _require(os.path.isdir(root), f"backend directory {root} does not exist")
        elif spec != "synthetic" and not spec.startswith("http:") and not spec.startswith("https:"):
            raise ConfigError(f"backends.{side} must be synthetic, dir:<path>, or http(s)://<url>")
        backends[side] = spec
    if "synthetic" in backends.values():
        _require(dataset["kind"] == "synthetic", "synthetic backends require the synthetic dataset")

    train_raw = dict(raw.get("train") or {})
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(train_raw) - known
    _require(not unknown, f"unknown train keys: {sorted(unknown)}")
    train_raw.setdefault("seed", raw["seed"])
    if isinstance(train_raw.get("channels"), list):
        train_raw["channels"] = tuple(train_raw["channels"])
    train = TrainConfig(**train_raw)
    for key in ("alpha", "beta", "paste_prob", "momentum"):
        _unit_interval(train.__dict__, key)
    _require(train.tau > 0, "train.tau must be positive")
    _require(0 < train.k <= 100, "train.k must be in (0, 100]")
    _require(train.epochs >= train.warmup_epochs >= 0, "need epochs >= warmup_epochs >= 0")
    _require(train.batch >= 1 and train.n_seeds >= 1 and train.per_class_points >= 1, "counts must be >= 1")
    _require(train.bank_capacity >= 0, "train.bank_capacity must be >= 0")
    _require(len(train.channels) == 2, "train.channels must be (c1, c2)")

    coseg_raw = dict(raw.get("coseg") or {})
    fusion = coseg_raw.get("fusion", "union")
    _require(fusion in ("union", "intersection", "none"), "coseg.fusion must be union, intersection, or none")
    tfile = coseg_raw.get("templates_file")
    if tfile:
        tfile = os.path.join(base_dir, tfile) if not os.path.isabs(tfile) else tfile
        _require(os.path.isfile(tfile), f"templates file {tfile} does not exist")
        coseg_raw["templates_file"] = tfile

    protocol = raw.get("protocol", "overlap")
    _require(protocol in ("overlap", "disjoint"), "protocol must be overlap or disjoint")

    out_dir = raw["output_dir"]
    if not os.path.isabs(out_dir):
        out_dir = os.path.join(base_dir, out_dir)

    cfg = RunConfig(
        seed=raw["seed"],
        output_dir=out_dir,
        taxonomy_spec=tax,
        dataset=dataset,
        backends=backends,
        protocol=protocol,
        coseg=coseg_raw,
        train=train,
    )
    try:
        cfg.taxonomy()
    except FmwissError as exc:
        raise ConfigError(f"bad taxonomy: {exc}")
    return cfg


def load_run_config(path, overrides=()):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}")
    raw = apply_overrides(raw, overrides)
    try:
        return parse_run_config(raw, base_dir=os.path.dirname(os.path.abspath(path)))
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"malformed config: {exc}")
