"""Dataset manifests, stratified partition plans and batch iteration."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .imaging import IMAGE_SIZE, AugmentationConfig, augment, load_grayscale, normalize_mean, resize_bilinear

CLASS_NAMES = ("non_consolidation", "consolidation")
N_DIVISIONS = 5
N_SPLITS = 5
TEST_FRACTION = 0.30
VALIDATION_FRACTION = 0.20

_LABEL_TOKENS = {"0": 0, "1": 1, "non_consolidation": 0, "consolidation": 1}


class ManifestError(ValueError):
    pass


class ImageLoadError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetManifest:
    paths: tuple[str, ...]
    labels: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.paths) != len(self.labels):
            raise ManifestError("paths and labels differ in length")
        if len(set(self.paths)) != len(self.paths):
            raise ManifestError("duplicate image paths in manifest")
        if set(self.labels) - {0, 1}:
            raise ManifestError(f"labels must be 0 or 1, got {sorted(set(self.labels))}")
        for c in (0, 1):
            if c not in self.labels:
                raise ManifestError(f"class {c} ({CLASS_NAMES[c]}) has no images")

    def __len__(self) -> int:
        return len(self.paths)

    @property
    def label_array(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.int64)

    def class_counts(self) -> tuple[int, int]:
        arr = self.label_array
        return int((arr == 0).sum()), int((arr == 1).sum())


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Read a ``path,label`` CSV. Relative image paths resolve against the
    manifest's directory."""
    path = Path(path)
    base = path.parent
    paths, labels = [], []
    seen: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "label"]:
            raise ManifestError(f"{path}: header must be 'path,label', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise ManifestError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            p, tok = row[0].strip(), row[1].strip().lower()
            if tok not in _LABEL_TOKENS:
                raise ManifestError(f"{path}:{lineno}: unknown label {row[1]!r}")
            full = str(p if os.path.isabs(p) else base / p)
            if full in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate path {p!r} (first at line {seen[full]})")
            seen[full] = lineno
            paths.append(full)
            labels.append(_LABEL_TOKENS[tok])
    return DatasetManifest(tuple(paths), tuple(labels))


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike, relative_to: str | os.PathLike | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label"])
        for p, y in zip(manifest.paths, manifest.labels):
            w.writerow([os.path.relpath(p, relative_to) if relative_to else p, y])


# partitioning --------------------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _positive_count(size_a: int, n: int, n_pos: int, reference: float) -> int:
    """Number of positives to put in part A.

    Minimises the worse of the two parts' deviation from ``reference`` (the
    positive fraction to stratify against). With the local fraction as the
    reference this is plain nearest rounding of ``size_a * p``.
    """
    size_b = n - size_a
    lo = max(0, size_a - (n - n_pos))
    hi = min(n_pos, size_a)
    local_target = size_a * n_pos / n

    def cost(k: int) -> tuple[float, float, int]:
        dev = max(abs(k - size_a * reference), abs((n_pos - k) - size_b * reference))
        return (round(dev, 9), round(abs(k - local_target), 9), k)

    return min(range(lo, hi + 1), key=cost)


def stratified_split(
    indices: Sequence[int],
    labels: Sequence[int] | np.ndarray,
    fraction: float,
    seed: int | np.random.SeedSequence,
    reference_fraction: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Split ``indices`` into parts of ``fraction`` and ``1 - fraction``.

    ``labels`` is indexed by the entries of ``indices``. Each class is
    shuffled with a seeded generator and the leading members go to part A.
    ``reference_fraction`` is the positive rate the parts should match; by
    default the positive rate of ``indices`` itself. Both parts come back
    sorted.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    idx = np.asarray(indices, dtype=np.int64)
    lab = np.asarray(labels)[idx]
    pos = idx[lab == 1]
    neg = idx[lab == 0]
    for c, members in ((0, neg), (1, pos)):
        if len(members) < 2:
            raise ValueError(f"class {c} has {len(members)} member(s); stratification needs at least 2")
    n = len(idx)
    size_a = _round_half_up(fraction * n)
    ref = len(pos) / n if reference_fraction is None else reference_fraction
    k_pos = _positive_count(size_a, n, len(pos), ref)
    k_neg = size_a - k_pos
    rng = np.random.default_rng(seed)
    neg = rng.permutation(neg)
    pos = rng.permutation(pos)
    part_a = np.sort(np.concatenate([neg[:k_neg], pos[:k_pos]]))
    part_b = np.sort(np.concatenate([neg[k_neg:], pos[k_pos:]]))
    return part_a, part_b


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    validation: np.ndarray


@dataclass(frozen=True)
class Division:
    construction: np.ndarray
    test: np.ndarray
    splits: tuple[Split, ...]


@dataclass(frozen=True)
class PartitionPlan:
    seed: int
    n_items: int
    divisions: tuple[Division, ...]

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "n_items": self.n_items,
            "divisions": [
                {
                    "construction": d.construction.tolist(),
                    "test": d.test.tolist(),
                    "splits": [{"train": s.train.tolist(), "validation": s.validation.tolist()} for s in d.splits],
                }
                for d in self.divisions
            ],
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        doc = json.loads(text)
        arr = lambda xs: np.asarray(xs, dtype=np.int64)  # noqa: E731
        divisions = tuple(
            Division(
                arr(d["construction"]),
                arr(d["test"]),
                tuple(Split(arr(s["train"]), arr(s["validation"])) for s in d["splits"]),
            )
            for d in doc["divisions"]
        )
        return cls(int(doc["seed"]), int(doc["n_items"]), divisions)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PartitionPlan":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, PartitionPlan) and self.to_json() == other.to_json()

    def __hash__(self) -> int:
        return hash(self.to_json())


def build_partition_plan(
    manifest: DatasetManifest,
    seed: int,
    n_divisions: int = N_DIVISIONS,
    n_splits: int = N_SPLITS,
) -> PartitionPlan:
    """Construction/test divisions, each with train/validation splits sharing
    the division's test set."""
    labels = manifest.label_array
    n = len(labels)
    global_pos = float(labels.mean())
    all_idx = np.arange(n)
    root = np.random.SeedSequence(seed)
    divisions = []
    for div_seq in root.spawn(n_divisions):
        test_seq, *split_seqs = div_seq.spawn(1 + n_splits)
        test, construction = stratified_split(all_idx, labels, TEST_FRACTION, test_seq)
        splits = []
        for s_seq in split_seqs:
            val, train = stratified_split(
                construction, labels, VALIDATION_FRACTION, s_seq, reference_fraction=global_pos
            )
            splits.append(Split(train=train, validation=val))
        divisions.append(Division(construction=construction, test=test, splits=tuple(splits)))
    return PartitionPlan(seed=seed, n_items=n, divisions=tuple(divisions))


# batches -------------------------------------------------------------------


def one_hot(labels: Sequence[int] | np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), 2), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


class ImageStore:
    """Memoised ``load -> grayscale -> resize`` for manifest entries."""

    def __init__(self, manifest: DatasetManifest, size: int = IMAGE_SIZE):
        self.manifest = manifest
        self.size = size
        self._cache: dict[int, np.ndarray] = {}

    def resized(self, index: int) -> np.ndarray:
        img = self._cache.get(index)
        if img is None:
            path = self.manifest.paths[index]
            try:
                img = resize_bilinear(load_grayscale(path), self.size, self.size)
            except (OSError, ValueError) as exc:
                raise ImageLoadError(f"failed to load {path}: {exc}") from exc
            self._cache[index] = img
        return img

    def tensors(self, indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Preprocessed, un-augmented ``(images, one-hot labels)``."""
        images = np.stack([normalize_mean(self.resized(int(i))) for i in indices]) if len(indices) else \
            np.zeros((0, self.size, self.size, 1), dtype=np.float32)
        labels = one_hot([self.manifest.labels[int(i)] for i in indices])
        return images, labels


class BatchIterator:
    """Per-epoch shuffled, augmented mini-batches over a fixed index set.

    ``epoch(e)`` is a pure function of ``(seed, e)``; iterating the object
    directly walks epochs 0, 1, 2, ... forever.
    """

    def __init__(
        self,
        indices: Sequence[int],
        manifest: DatasetManifest,
        cfg: AugmentationConfig | None,
        batch_size: int = 32,
        seed: int = 0,
        store: ImageStore | None = None,
    ):
        if len(indices) == 0:
            raise ValueError("batch iterator needs at least one index")
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.indices = np.asarray(indices, dtype=np.int64)
        self.manifest = manifest
        self.cfg = cfg
        self.batch_size = batch_size
        self.seed = seed
        self.store = store or ImageStore(manifest)

    def __len__(self) -> int:
        return math.ceil(len(self.indices) / self.batch_size)

    def epoch(self, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        rng = np.random.default_rng([self.seed, epoch])
        order = rng.permutation(self.indices)
        for start in range(0, len(order), self.batch_size):
            chunk = order[start:start + self.batch_size]
            images = []
            for i in chunk:
                img = self.store.resized(int(i))
                if self.cfg is not None:
                    img = augment(img, self.cfg, rng)
                images.append(normalize_mean(img))
            yield np.stack(images), one_hot([self.manifest.labels[int(i)] for i in chunk])

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        e = 0
        while True:
            yield from self.epoch(e)
            e += 1


def batch_iterator(
    train_indices: Sequence[int],
    manifest: DatasetManifest,
    cfg: AugmentationConfig | None,
    batch_size: int = 32,
    seed: int = 0,
    store: ImageStore | None = None,
) -> BatchIterator:
    return BatchIterator(train_indices, manifest, cfg, batch_size, seed, store)
