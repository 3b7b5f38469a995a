"""Deterministic synthetic classification data with stratified splits and CSV I/O."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import atomic_write_text

SPLITS = ("train", "val", "test")


class DataValidationError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray  # one-hot [N x K]
    split: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.features.ndim != 2 or self.labels.ndim != 2 or len(self.features) != len(self.labels):
            raise DataValidationError(
                f"features {self.features.shape} and labels {self.labels.shape} do not describe one dataset")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def x(self) -> np.ndarray:
        return self.features

    @property
    def y(self) -> np.ndarray:
        return self.labels

    @property
    def class_index(self) -> np.ndarray:
        return self.labels.argmax(axis=1)

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class DataSplits:
    train: Dataset
    val: Dataset
    test: Dataset
    manifest: dict
    ood: Dataset | None = None

    def __getitem__(self, split: str) -> Dataset:
        if split == "ood":
            if self.ood is None:
                raise KeyError("no ood split present")
            return self.ood
        if split not in SPLITS:
            raise KeyError(f"unknown split {split!r}")
        return getattr(self, split)

    @property
    def num_classes(self) -> int:
        return self.manifest["K"]

    @property
    def dim(self) -> int:
        return self.manifest["D"]


def one_hot(index: np.ndarray, K: int) -> np.ndarray:
    out = np.zeros((len(index), K))
    out[np.arange(len(index)), index] = 1.0
    return out


def _stratified_split(features, index, K, rng, meta):
    parts = {s: [] for s in SPLITS}
    for c in range(K):
        members = rng.permutation(np.flatnonzero(index == c))
        n = len(members)
        n_train, n_val = int(0.8 * n), int(0.1 * n)
        parts["train"].append(members[:n_train])
        parts["val"].append(members[n_train:n_train + n_val])
        parts["test"].append(members[n_train + n_val:])
    out = {}
    for s in SPLITS:
        rows = rng.permutation(np.concatenate(parts[s]))
        out[s] = Dataset(features[rows], one_hot(index[rows], K), s, dict(meta))
    return out


def _validate(K: int, n_per_class: int, D: int = 2):
    if K < 2:
        raise DataValidationError(f"K must be >= 2 (got {K})")
    if D < 2:
        raise DataValidationError(f"D must be >= 2 (got {D})")
    if n_per_class < 10:
        raise DataValidationError(f"n_per_class must be >= 10 for an 80/10/10 split (got {n_per_class})")


def _bundle(features, index, K, seed, generator, params, rng) -> DataSplits:
    meta = {"seed": seed, "K": K, "D": features.shape[1], "generator": generator, "params": params}
    parts = _stratified_split(features, index, K, rng, meta)
    manifest = {
        "K": K,
        "D": int(features.shape[1]),
        "seed": seed,
        "generator": generator,
        "params": params,
        "sizes": {s: len(parts[s]) for s in SPLITS},
        "class_counts": {s: parts[s].labels.sum(axis=0).astype(int).tolist() for s in SPLITS},
    }
    return DataSplits(parts["train"], parts["val"], parts["test"], manifest)


def blob_centers(K: int, D: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 1]).uniform(-2.0, 2.0, size=(K, D))


def gen_blobs(K: int, D: int, n_per_class: int, spread: float, seed: int,
              centers_seed: int | None = None) -> DataSplits:
    """``K`` isotropic Gaussian clusters with per-class std ``spread``.

    Cluster centres are drawn uniformly in ``[-2, 2]^D`` from ``centers_seed``
    (defaults to ``seed``).
    """
    _validate(K, n_per_class, D)
    if spread < 0:
        raise DataValidationError(f"spread must be nonnegative (got {spread})")
    rng = np.random.default_rng(seed)
    centers_seed = seed if centers_seed is None else centers_seed
    centers = blob_centers(K, D, centers_seed)
    index = np.repeat(np.arange(K), n_per_class)
    features = centers[index] + spread * rng.normal(size=(len(index), D))
    params = {"K": K, "D": D, "n_per_class": n_per_class, "spread": spread,
              "centers_seed": centers_seed}
    return _bundle(features, index, K, seed, "blobs", params, rng)


def spiral_arm(c: int, K: int, t: np.ndarray, turns: float, r_min: float, r_max: float) -> np.ndarray:
    """Points at parameter ``t`` in [0, 1] on arm ``c``."""
    radius = r_min + (r_max - r_min) * t
    angle = 2 * np.pi * c / K + 2 * np.pi * turns * t
    return np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=-1)


def gen_spirals(K: int, n_per_class: int, noise: float, seed: int,
                turns: float = 1.0, r_min: float = 0.06, r_max: float = 0.5) -> DataSplits:
    """``K`` interleaved 2-D spiral arms with isotropic Gaussian jitter ``noise``."""
    _validate(K, n_per_class)
    if noise < 0:
        raise DataValidationError(f"noise must be nonnegative (got {noise})")
    rng = np.random.default_rng(seed)
    index = np.repeat(np.arange(K), n_per_class)
    t = rng.uniform(0.0, 1.0, size=len(index))
    features = np.concatenate([
        spiral_arm(c, K, t[index == c], turns, r_min, r_max) for c in range(K)
    ])
    features = features + noise * rng.normal(size=features.shape)
    params = {"K": K, "n_per_class": n_per_class, "noise": noise, "turns": turns,
              "r_min": r_min, "r_max": r_max}
    return _bundle(features, index, K, seed, "spirals", params, rng)


def _regenerate(manifest: dict, seed: int) -> DataSplits:
    p = dict(manifest["params"])
    if manifest["generator"] == "spirals":
        return gen_spirals(p["K"], p["n_per_class"], p["noise"], seed,
                           turns=p["turns"], r_min=p["r_min"], r_max=p["r_max"])
    if manifest["generator"] == "blobs":
        return gen_blobs(p["K"], p["D"], p["n_per_class"], p["spread"], seed,
                         centers_seed=p["centers_seed"])
    raise DataValidationError(f"unknown generator {manifest['generator']!r}")


def gen_ood_shift(base: DataSplits, shift_magnitude: float, seed: int) -> Dataset:
    """Fresh draw from the base generator, translated by ``shift_magnitude``.

    The translation direction is random (seeded); points keep their labels
    but the split is tagged ``ood`` and labels are marked unused.
    """
    fresh = _regenerate(base.manifest, seed)
    rng = np.random.default_rng([seed, 2])
    direction = rng.normal(size=base.dim)
    direction /= np.linalg.norm(direction)
    x = np.concatenate([fresh.train.x, fresh.val.x, fresh.test.x])
    y = np.concatenate([fresh.train.y, fresh.val.y, fresh.test.y])
    meta = {"seed": seed, "base_seed": base.manifest["seed"], "generator": base.manifest["generator"],
            "shift_magnitude": shift_magnitude, "shift_direction": direction.tolist(),
            "labels_used": False}
    return Dataset(x + shift_magnitude * direction, y, "ood", meta)


# ---------------------------------------------------------------------------
# file I/O


def dataset_to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"f{i}" for i in range(ds.dim)] + ["label"])
    for row, c in zip(ds.features, ds.class_index):
        w.writerow([format(v, ".17g") for v in row] + [int(c)])
    return buf.getvalue()


def dataset_from_csv(text: str, K: int, split: str, meta: dict | None = None) -> Dataset:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    if header[-1] != "label":
        raise DataValidationError("dataset CSV must end with a 'label' column")
    D = len(header) - 1
    features = np.array([[float(v) for v in r[:D]] for r in body]).reshape(len(body), D)
    index = np.array([int(r[D]) for r in body], dtype=int)
    return Dataset(features, one_hot(index, K), split, dict(meta or {}))


def write_splits(splits: DataSplits, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in SPLITS:
        atomic_write_text(directory / f"{s}.csv", dataset_to_csv(splits[s]))
    manifest = dict(splits.manifest)
    if splits.ood is not None:
        atomic_write_text(directory / "ood.csv", dataset_to_csv(splits.ood))
        manifest["ood"] = splits.ood.meta
        manifest["sizes"] = {**manifest["sizes"], "ood": len(splits.ood)}
    atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def read_splits(directory) -> DataSplits:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    K = manifest["K"]
    parts = {s: dataset_from_csv((directory / f"{s}.csv").read_text(), K, s, manifest) for s in SPLITS}
    ood = None
    if (directory / "ood.csv").exists():
        ood = dataset_from_csv((directory / "ood.csv").read_text(), K, "ood", manifest.get("ood"))
    for s in SPLITS:
        if len(parts[s]) != manifest["sizes"][s]:
            raise DataValidationError(f"{s} split has {len(parts[s])} rows, manifest says {manifest['sizes'][s]}")
    return DataSplits(parts["train"], parts["val"], parts["test"], manifest, ood)
