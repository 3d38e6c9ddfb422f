"""Synthetic and on-disk datasets with mixed closed-set / open-set label noise.

Labels are 0-based throughout: observed labels live in ``[0, K)`` and true
labels of out-of-distribution samples live in ``[K, K + K_ood)``.
"""
import csv
import enum
import json
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from ._random import keyed_integers, keyed_uniform, stream_rng
from .exceptions import ConfigError, DataError

logger = logging.getLogger(__name__)

SPLIT_FRACTIONS = (0.7, 0.1, 0.2)
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class NoiseType(enum.IntEnum):
    CLEAN = 0
    CLOSED_NOISY = 1
    OPEN_NOISY = 2


class InstanceProfile(str, enum.Enum):
    PROBE_CONFUSION = "probe_confusion"
    TRUNCATED_GAUSSIAN = "truncated_gaussian"


@dataclass(frozen=True)
class Sample:
    id: int
    input: np.ndarray
    observed_label: int
    true_label: int
    true_type: NoiseType


@dataclass
class SampleSet:
    """Column-oriented collection of samples; indexing yields a :class:`Sample`."""

    ids: np.ndarray
    inputs: np.ndarray
    observed: np.ndarray
    true_label: np.ndarray
    true_type: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.observed = np.asarray(self.observed, dtype=np.int64)
        self.true_label = np.asarray(self.true_label, dtype=np.int64)
        self.true_type = np.asarray(self.true_type, dtype=np.int64)
        n = len(self.ids)
        for name in ("inputs", "observed", "true_label", "true_type"):
            if len(getattr(self, name)) != n:
                raise DataError(f"column {name!r} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i):
        return Sample(int(self.ids[i]), self.inputs[i], int(self.observed[i]),
                      int(self.true_label[i]), NoiseType(int(self.true_type[i])))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def input_shape(self):
        return tuple(self.inputs.shape[1:])

    def subset(self, index):
        return SampleSet(self.ids[index], self.inputs[index], self.observed[index],
                         self.true_label[index], self.true_type[index])

    def copy(self):
        return SampleSet(self.ids.copy(), self.inputs.copy(), self.observed.copy(),
                         self.true_label.copy(), self.true_type.copy())

    @classmethod
    def empty(cls, input_shape):
        return cls(np.zeros(0, np.int64), np.zeros((0,) + tuple(input_shape)),
                   np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64))

    @classmethod
    def concatenate(cls, parts):
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("ids", "inputs", "observed", "true_label", "true_type")))


@dataclass
class DatasetSplits:
    train: SampleSet
    val: SampleSet
    test: SampleSet
    num_classes: int
    num_ood_classes: int
    provenance: dict = field(default_factory=dict)


@dataclass(frozen=True)
class NoiseSpec:
    alpha: float
    beta: float
    seed: int = 0
    id_class_count: int = 5
    ood_class_count: int = 3
    instance_profile: InstanceProfile = InstanceProfile.PROBE_CONFUSION

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}", key=name)
        object.__setattr__(self, "instance_profile", InstanceProfile(self.instance_profile))


def _split_per_class(labels, rng):
    """Stratified 70/10/20 split; returns three index arrays."""
    parts = ([], [], [])
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(SPLIT_FRACTIONS[0] * len(idx)))
        n_val = int(round(SPLIT_FRACTIONS[1] * len(idx)))
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:])
    return tuple(np.sort(np.concatenate(p)) for p in parts)


def _cluster_centers(n_centers, dim, separation, rng):
    # start where the typical pairwise distance is about ``separation`` and
    # widen until the closest pair clears it
    scale = separation / np.sqrt(2.0 * dim)
    while True:
        centers = rng.normal(size=(n_centers, dim)) * scale
        d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        d[np.diag_indices(n_centers)] = np.inf
        if d.min() >= separation:
            return centers
        scale *= 1.05


def generate_blobs(n_per_class, K, K_ood, dim, separation, seed=0):
    """Isotropic unit-variance Gaussian clusters for K ID and K_ood OOD classes.

    Returns ``(splits, ood_pool)``. ID samples are split 70/10/20 per class;
    every OOD sample goes to the pool.
    """
    if K < 2:
        raise ConfigError(f"need at least 2 in-distribution classes, got K={K}", key="K")
    if n_per_class < 10:
        raise ConfigError(f"n_per_class must be >= 10, got {n_per_class}", key="n_per_class")
    if dim < 2:
        raise ConfigError(f"dim must be >= 2, got {dim}", key="dim")
    if not separation > 0:
        raise ConfigError(f"separation must be positive, got {separation}", key="separation")

    rng = stream_rng(seed, "blobs")
    centers = _cluster_centers(K + K_ood, dim, separation, rng)
    labels = np.repeat(np.arange(K + K_ood), n_per_class)
    x = centers[labels] + rng.normal(size=(len(labels), dim))

    is_id = labels < K
    n_id = int(is_id.sum())
    ids = np.arange(len(labels))
    id_set = SampleSet(ids[is_id], x[is_id], labels[is_id], labels[is_id], np.zeros(n_id, np.int64))
    pool = SampleSet(ids[~is_id], x[~is_id], np.full((~is_id).sum(), -1), labels[~is_id],
                     np.full((~is_id).sum(), int(NoiseType.OPEN_NOISY)))
    tr, va, te = _split_per_class(id_set.true_label, stream_rng(seed, "split"))
    splits = DatasetSplits(id_set.subset(tr), id_set.subset(va), id_set.subset(te), K, K_ood,
                           provenance={"source": "blobs", "seed": int(seed),
                                       "centers_min_distance": float(separation)})
    return splits, pool


def _read_image(path, image_size):
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB").resize(tuple(image_size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64).transpose(2, 0, 1) / 255.0


def _read_class_dir(root, name, image_size):
    path = os.path.join(root, name)
    if not os.path.isdir(path):
        raise DataError(f"class directory not found: {path}")
    files = sorted(f for f in os.listdir(path) if f.lower().endswith(IMAGE_EXTENSIONS))
    return [_read_image(os.path.join(path, f), image_size) for f in files]


def load_image_folder(root, id_classes, ood_classes, image_size=(32, 32), seed=0):
    """Directory-per-class image dataset; ``id_classes`` map to labels 0..K-1 in order."""
    if not os.path.isdir(root):
        raise DataError(f"dataset root not found: {root}")
    if len(id_classes) < 2:
        raise ConfigError("need at least 2 in-distribution classes", key="id_classes")
    images, labels = [], []
    for c, name in enumerate(list(id_classes) + list(ood_classes)):
        imgs = _read_class_dir(root, name, image_size)
        images.extend(imgs)
        labels.extend([c] * len(imgs))
    shape = (3, image_size[1], image_size[0])
    x = np.stack(images) if images else np.zeros((0,) + shape)
    labels = np.asarray(labels, dtype=np.int64)
    K = len(id_classes)
    ids = np.arange(len(labels))
    is_id = labels < K
    id_set = SampleSet(ids[is_id], x[is_id], labels[is_id], labels[is_id], np.zeros(is_id.sum(), np.int64))
    pool = SampleSet(ids[~is_id], x[~is_id], np.full((~is_id).sum(), -1), labels[~is_id],
                     np.full((~is_id).sum(), int(NoiseType.OPEN_NOISY)))
    tr, va, te = _split_per_class(id_set.true_label, stream_rng(seed, "split"))
    splits = DatasetSplits(id_set.subset(tr), id_set.subset(va), id_set.subset(te), K, len(ood_classes),
                           provenance={"source": "image_folder", "root": str(root), "seed": int(seed),
                                       "id_classes": list(id_classes), "ood_classes": list(ood_classes)})
    return splits, pool


def train_probe(x, y, num_classes, seed, epochs=5, lr=0.5, batch_size=32):
    """A weak softmax-regression probe; returns a function mapping inputs to class probabilities."""
    x = x.reshape(len(x), -1)
    mu, sd = x.mean(0), x.std(0) + 1e-8
    xs = (x - mu) / sd
    rng = stream_rng(seed, "probe")
    w = np.zeros((xs.shape[1], num_classes))
    b = np.zeros(num_classes)
    onehot = np.eye(num_classes)[y]
    for _ in range(epochs):
        order = rng.permutation(len(xs))
        for start in range(0, len(xs), batch_size):
            idx = order[start:start + batch_size]
            p = _softmax(xs[idx] @ w + b)
            g = (p - onehot[idx]) / len(idx)
            w -= lr * xs[idx].T @ g
            b -= lr * g.sum(0)

    def predict(inputs):
        z = (inputs.reshape(len(inputs), -1) - mu) / sd
        return _softmax(z @ w + b)

    return predict


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def corruption_probabilities(confusion, alpha):
    """Scale per-sample confusion mass so that ``mean(min(1, s * c)) == alpha``."""
    c = np.maximum(np.asarray(confusion, dtype=np.float64), 1e-6)
    if alpha <= 0:
        return np.zeros_like(c)
    if alpha >= 1:
        return np.ones_like(c)
    lo, hi = 0.0, 1.0 / c.min()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.minimum(1.0, mid * c).mean() < alpha:
            lo = mid
        else:
            hi = mid
    return np.minimum(1.0, hi * c)


def _truncated_gaussian_probabilities(seed, ids, alpha, sd=0.1):
    from scipy.stats import truncnorm

    if alpha <= 0 or alpha >= 1:
        return np.full(len(ids), float(alpha))
    a, b = (0.0 - alpha) / sd, (1.0 - alpha) / sd
    u = keyed_uniform(seed, "noise.tgauss", ids)
    return truncnorm.ppf(u, a, b, loc=alpha, scale=sd)


def _weighted_pick(seed, name, ids, probs, n):
    """Pick ``n`` ids without replacement, inclusion weighted by ``probs``.

    Uses exponential-race keys ``log(u) / p``, so the decision for each
    sample depends only on (seed, id, p) and not on the sample order.
    """
    if n <= 0:
        return np.zeros(len(ids), bool)
    u = keyed_uniform(seed, name, ids)
    with np.errstate(divide="ignore"):
        keys = np.where(probs > 0, np.log(u) / np.maximum(probs, 1e-300), -np.inf)
    order = np.lexsort((ids, -keys))
    chosen = np.zeros(len(ids), bool)
    chosen[order[:n]] = True
    return chosen


def _corrupt_split(split, split_name, pool, pool_index, spec, K, probe):
    out = split.copy()
    n = len(out)
    if n == 0 or spec.alpha == 0:
        return out, 0
    if spec.instance_profile is InstanceProfile.PROBE_CONFUSION:
        probs_model = probe(out.inputs)
        confusion = 1.0 - probs_model[np.arange(n), out.true_label]
        p = corruption_probabilities(confusion, spec.alpha)
    else:
        probs_model = None
        p = _truncated_gaussian_probabilities(spec.seed, out.ids, spec.alpha)

    n_corrupt = int(round(spec.alpha * n))
    corrupt = _weighted_pick(spec.seed, f"noise.corrupt.{split_name}", out.ids, p, n_corrupt)
    cidx = np.flatnonzero(corrupt)
    n_open = int(round(spec.beta * len(cidx)))
    rank = keyed_uniform(spec.seed, f"noise.open.{split_name}", out.ids[cidx])
    open_idx = cidx[np.lexsort((out.ids[cidx], rank))[:n_open]]
    closed_idx = np.setdiff1d(cidx, open_idx)

    if len(closed_idx):
        if probs_model is not None:
            confused = probs_model[closed_idx].copy()
            confused[np.arange(len(closed_idx)), out.true_label[closed_idx]] = -np.inf
            new = confused.argmax(axis=1)
        else:
            shift = 1 + keyed_integers(spec.seed, "noise.flip", out.ids[closed_idx], K - 1)
            new = (out.true_label[closed_idx] + shift) % K
        out.observed[closed_idx] = new
        out.true_type[closed_idx] = int(NoiseType.CLOSED_NOISY)

    if len(open_idx):
        donors = pool_index[:len(open_idx)]
        out.inputs[open_idx] = pool.inputs[donors]
        out.true_label[open_idx] = pool.true_label[donors]
        out.true_type[open_idx] = int(NoiseType.OPEN_NOISY)
        if spec.instance_profile is InstanceProfile.TRUNCATED_GAUSSIAN:
            out.observed[open_idx] = keyed_integers(spec.seed, "noise.open_label", out.ids[open_idx], K)
    return out, len(open_idx)


def inject_noise(splits, ood_pool, spec):
    """Corrupt train and val with instance-dependent mixed label noise.

    Exactly ``round(alpha * n)`` samples of each split are corrupted, chosen
    with sample-specific probabilities whose mean is ``alpha``. Of those,
    ``round(beta * n_corrupt)`` become open-set noise (input replaced by an
    OOD input, observed ID label kept) and the rest closed-set noise (label
    flipped to another ID class). The test split is returned untouched.
    """
    K = splits.num_classes
    n_open_needed = sum(int(round(spec.beta * int(round(spec.alpha * len(s)))))
                        for s in (splits.train, splits.val))
    if spec.alpha * spec.beta > 0 and len(ood_pool) == 0:
        raise ConfigError("open-set noise requested but the OOD pool is empty", key="beta")

    probe = None
    if spec.instance_profile is InstanceProfile.PROBE_CONFUSION and spec.alpha > 0:
        probe = train_probe(splits.train.inputs, splits.train.true_label, K, spec.seed)

    if len(ood_pool):
        pool_rank = np.lexsort((ood_pool.ids, keyed_uniform(spec.seed, "noise.pool", ood_pool.ids)))
        if n_open_needed > len(pool_rank):
            logger.warning("OOD pool (%d) smaller than open-set demand (%d); reusing OOD inputs",
                           len(pool_rank), n_open_needed)
            pool_rank = np.resize(pool_rank, n_open_needed)
    else:
        pool_rank = np.zeros(0, np.int64)

    train, n_open_train = _corrupt_split(splits.train, "train", ood_pool, pool_rank, spec, K, probe)
    val, _ = _corrupt_split(splits.val, "val", ood_pool, pool_rank[n_open_train:], spec, K, probe)

    provenance = dict(splits.provenance)
    provenance["noise"] = {
        "alpha": spec.alpha, "beta": spec.beta, "seed": spec.seed,
        "instance_profile": spec.instance_profile.value,
        "realized": {name: realized_noise(s) for name, s in (("train", train), ("val", val))},
    }
    return replace(splits, train=train, val=val, provenance=provenance)


def realized_noise(split):
    """Realized corruption fraction and open-set share of the corrupted samples."""
    n = len(split)
    noisy = int((split.true_type != NoiseType.CLEAN).sum())
    n_open = int((split.true_type == NoiseType.OPEN_NOISY).sum())
    return {"n": n, "corrupted": noisy, "open": n_open,
            "alpha": noisy / n if n else 0.0, "beta": n_open / noisy if noisy else 0.0}


# --- persistence ---------------------------------------------------------

def csv_header(dim):
    return ["id", "true_label", "observed_label", "true_type"] + [f"x{j}" for j in range(dim)]


def save_split_csv(path, split):
    flat = split.inputs.reshape(len(split), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(csv_header(flat.shape[1]))
        for i in range(len(split)):
            w.writerow([int(split.ids[i]), int(split.true_label[i]), int(split.observed[i]),
                        NoiseType(int(split.true_type[i])).name] + [repr(float(v)) for v in flat[i]])


def load_split_csv(path, input_shape=None):
    if not os.path.isfile(path):
        raise DataError(f"split file not found: {path}")
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None or header[:4] != ["id", "true_label", "observed_label", "true_type"]:
            raise DataError(f"{path}: unexpected header {header!r}")
        rows = list(r)
    dim = len(header) - 4
    if not rows:
        return SampleSet.empty(input_shape or (dim,))
    try:
        ids = [int(row[0]) for row in rows]
        true_label = [int(row[1]) for row in rows]
        observed = [int(row[2]) for row in rows]
        true_type = [int(NoiseType[row[3]]) for row in rows]
        x = np.array([[float(v) for v in row[4:]] for row in rows])
    except (KeyError, ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed row ({exc})") from exc
    if input_shape is not None:
        x = x.reshape((len(rows),) + tuple(input_shape))
    return SampleSet(ids, x, observed, true_label, true_type)


def save_splits(directory, splits, ood_pool=None):
    os.makedirs(directory, exist_ok=True)
    for name in ("train", "val", "test"):
        save_split_csv(os.path.join(directory, f"{name}.csv"), getattr(splits, name))
    if ood_pool is not None:
        save_split_csv(os.path.join(directory, "ood_pool.csv"), ood_pool)
    meta = {"num_classes": splits.num_classes, "num_ood_classes": splits.num_ood_classes,
            "input_shape": list(splits.train.input_shape), "provenance": splits.provenance}
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_splits(directory):
    """Inverse of :func:`save_splits`; returns ``(splits, ood_pool or None)``."""
    meta_path = os.path.join(directory, "meta.json")
    if not os.path.isfile(meta_path):
        raise DataError(f"dataset metadata not found: {meta_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    shape = tuple(meta["input_shape"])
    parts = {name: load_split_csv(os.path.join(directory, f"{name}.csv"), shape)
             for name in ("train", "val", "test")}
    pool_path = os.path.join(directory, "ood_pool.csv")
    pool = load_split_csv(pool_path, shape) if os.path.isfile(pool_path) else None
    splits = DatasetSplits(parts["train"], parts["val"], parts["test"], meta["num_classes"],
                           meta["num_ood_classes"], provenance=meta.get("provenance", {}))
    return splits, pool
