"""Synthetic MIL bags, their text file format, and stratified splits.

Negative instances are N(0, I); positive instances are shifted by
``delta`` along a fixed random unit direction (``delta / 4`` for the "hard"
fraction).  A bag is positive iff it holds at least one positive instance.

On disk a dataset is ``manifest.csv`` (bag_id,label,n_instances,feature_path)
plus one feature file per bag: a ``"N D"`` header line followed by N rows of
D shortest-round-trip decimals.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rng as rngs
from .errors import MalformedHeader, NonNumericValue, RowCountMismatch, TooFewBags

MANIFEST = "manifest.csv"
MANIFEST_FIELDS = ["bag_id", "label", "n_instances", "feature_path"]


@dataclass
class SynthConfig:
    n_bags: int = 200
    n_min: int = 50
    n_max: int = 100
    d_in: int = 64
    pos_ratio: float = 0.3
    delta: float = 3.0
    hard_fraction: float = 0.0
    label_balance: float = 0.5
    seed: int = 0

    def validate(self):
        if self.n_bags < 2 or self.d_in < 1:
            raise ValueError("need n_bags >= 2 and d_in >= 1")
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError(f"bad instance range [{self.n_min}, {self.n_max}]")
        if not 0 < self.pos_ratio <= 1:
            raise ValueError(f"pos_ratio {self.pos_ratio} outside (0, 1]")
        if not 0 <= self.hard_fraction < 1:
            raise ValueError(f"hard_fraction {self.hard_fraction} outside [0, 1)")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if not 0 < self.label_balance < 1:
            raise ValueError(f"label_balance {self.label_balance} outside (0, 1)")


PRESETS = {
    "easy": dict(delta=3.0, pos_ratio=0.3, hard_fraction=0.0),
    "hard": dict(delta=1.0, pos_ratio=0.05, hard_fraction=0.5),
}


def preset(name: str, **overrides) -> SynthConfig:
    return replace(SynthConfig(**PRESETS[name]), **overrides)


@dataclass
class FeatureBag:
    bag_id: str
    features: np.ndarray
    label: int
    instance_labels: np.ndarray | None = None

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]


@dataclass
class BagRecord:
    bag_id: str
    label: int
    n_instances: int
    feature_path: str


@dataclass
class Dataset:
    root: Path | None
    records: list
    bags: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def labels(self) -> dict:
        return {r.bag_id: r.label for r in self.records}

    def subset(self, bag_ids) -> list:
        return [self.bags[b] for b in bag_ids]

    def size_range(self) -> tuple[int, int]:
        sizes = [r.n_instances for r in self.records]
        return min(sizes), max(sizes)


def sample_bags(cfg: SynthConfig) -> list[FeatureBag]:
    """Draw the bags of ``cfg`` in memory (fully determined by ``cfg.seed``)."""
    cfg.validate()
    rng = rngs.stream(cfg.seed, "data")
    direction = rng.standard_normal(cfg.d_in)
    direction /= np.linalg.norm(direction)
    n_pos_bags = int(round(cfg.label_balance * cfg.n_bags))
    labels = rng.permutation(np.array([1] * n_pos_bags + [0] * (cfg.n_bags - n_pos_bags)))
    bags = []
    for i, label in enumerate(labels):
        n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
        x = rng.standard_normal((n, cfg.d_in))
        inst = np.zeros(n, dtype=np.int64)
        if label:
            k = max(1, math.ceil(cfg.pos_ratio * n))
            n_hard = int(cfg.hard_fraction * k)
            x[:n_hard] += (cfg.delta / 4.0) * direction
            x[n_hard:k] += cfg.delta * direction
            inst[:k] = 1
        order = rng.permutation(n)
        bags.append(FeatureBag(f"bag_{i:04d}", x[order], int(label), inst[order]))
    return bags


def format_bag(features: np.ndarray) -> str:
    n, d = features.shape
    lines = [f"{n} {d}"]
    lines.extend(" ".join(repr(float(v)) for v in row) for row in features)
    return "\n".join(lines) + "\n"


def parse_bag(text: str, source: str = "<string>") -> np.ndarray:
    lines = text.splitlines()
    try:
        n, d = (int(v) for v in lines[0].split())
    except (IndexError, ValueError):
        raise MalformedHeader(f"{source}: expected 'N D' header") from None
    if n < 0 or d < 1:
        raise MalformedHeader(f"{source}: invalid header {n} {d}")
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != n:
        raise RowCountMismatch(f"{source}: header declares {n} rows, found {len(body)}")
    out = np.empty((n, d))
    for i, line in enumerate(body):
        fields = line.split()
        if len(fields) != d:
            raise RowCountMismatch(f"{source}: row {i} has {len(fields)} values, expected {d}")
        try:
            out[i] = [float(v) for v in fields]
        except ValueError:
            raise NonNumericValue(f"{source}: row {i} is not numeric") from None
    return out


def load_bag(feature_path) -> np.ndarray:
    path = Path(feature_path)
    return parse_bag(path.read_text(), str(path))


def write_bag(features: np.ndarray, feature_path) -> None:
    Path(feature_path).write_text(format_bag(features))


def generate_dataset(cfg: SynthConfig, out_dir) -> Dataset:
    out = Path(out_dir)
    (out / "bags").mkdir(parents=True, exist_ok=True)
    bags = sample_bags(cfg)
    records = []
    for bag in bags:
        rel = f"bags/{bag.bag_id}.txt"
        write_bag(bag.features, out / rel)
        records.append(BagRecord(bag.bag_id, bag.label, bag.n_instances, rel))
    write_manifest(records, out / MANIFEST)
    return Dataset(out, records, {b.bag_id: b for b in bags})


def write_manifest(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in records:
            w.writerow([r.bag_id, r.label, r.n_instances, r.feature_path])


def read_manifest(path) -> list[BagRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise MalformedHeader(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
        records = [BagRecord(row["bag_id"], int(row["label"]), int(row["n_instances"]),
                             row["feature_path"]) for row in reader]
    if len({r.bag_id for r in records}) != len(records):
        raise ValueError(f"{path}: duplicate bag_id")
    return records


def load_dataset(root) -> Dataset:
    root = Path(root)
    records = read_manifest(root / MANIFEST)
    bags = {}
    for r in records:
        x = load_bag(root / r.feature_path)
        if x.shape[0] != r.n_instances:
            raise RowCountMismatch(f"{r.feature_path}: manifest says {r.n_instances} rows")
        bags[r.bag_id] = FeatureBag(r.bag_id, x, r.label)
    return Dataset(root, records, bags)


# ---------------------------------------------------------------- splits

@dataclass
class Split:
    name: str
    train: list
    val: list
    test: list


def _by_class(records, rng) -> dict:
    out = {}
    for label in (0, 1):
        ids = [r.bag_id for r in records if r.label == label]
        out[label] = [ids[i] for i in rng.permutation(len(ids))]
    return out


def _holdout(records, ratios, rng) -> Split:
    r_train, r_val, _ = ratios
    parts = {"train": [], "val": [], "test": []}
    for label, ids in _by_class(records, rng).items():
        n_train = int(round(r_train * len(ids)))
        n_val = int(round(r_val * len(ids)))
        chunk = {"train": ids[:n_train], "val": ids[n_train:n_train + n_val],
                 "test": ids[n_train + n_val:]}
        for key, vals in chunk.items():
            if not vals:
                raise TooFewBags(f"class {label} has no bags in the {key} split")
            parts[key].extend(vals)
    return Split("holdout", sorted(parts["train"]), sorted(parts["val"]), sorted(parts["test"]))


def _kfold(records, k, repeats, val_fraction, seed) -> list[Split]:
    labels = {r.bag_id: r.label for r in records}
    for label in (0, 1):
        if sum(1 for r in records if r.label == label) < k:
            raise TooFewBags(f"class {label} has fewer than {k} bags")
    splits = []
    for rep in range(repeats):
        rng = rngs.stream(seed, "split", rep)
        folds = [[] for _ in range(k)]
        offset = 0
        for label, ids in _by_class(records, rng).items():
            for pos, bag_id in enumerate(ids):
                folds[(pos + offset) % k].append(bag_id)
            offset += len(ids)
        for f in range(k):
            rest = [b for g in range(k) if g != f for b in folds[g]]
            val = []
            for label in (0, 1):
                cls = [b for b in rest if labels[b] == label]
                n_val = max(1, int(round(val_fraction * len(cls))))
                if n_val >= len(cls):
                    raise TooFewBags(f"class {label} too small for a validation carve-out")
                val.extend(cls[:n_val])
            vs = set(val)
            train = [b for b in rest if b not in vs]
            splits.append(Split(f"r{rep}f{f}", sorted(train), sorted(val), sorted(folds[f])))
    return splits


def make_splits(records, scheme: str = "holdout", seed: int = 0, ratios=(0.65, 0.10, 0.25),
                k: int = 3, repeats: int = 1, val_fraction: float = 0.1) -> list[Split]:
    """Label-stratified splits.

    ``holdout`` returns one train/val/test split with the given ratios.
    ``kfold`` returns ``k * repeats`` splits; each fold is the test set once
    per repeat and a stratified ``val_fraction`` of the remaining folds is
    held out for early stopping.
    """
    records = list(records)
    if scheme == "holdout":
        if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
            raise ValueError(f"holdout ratios must be three non-negatives summing to 1: {ratios}")
        return [_holdout(records, ratios, rngs.stream(seed, "split", 0))]
    if scheme == "kfold":
        if k < 2 or repeats < 1:
            raise ValueError("kfold needs k >= 2 and repeats >= 1")
        return _kfold(records, k, repeats, val_fraction, seed)
    raise ValueError(f"unknown split scheme {scheme!r}")
