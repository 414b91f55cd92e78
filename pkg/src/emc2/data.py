"""Contrastive datasets: items, positive pairs and per-anchor negative sets.

Items are grouped by ``base_id``. Every group is one anchor slot ``i`` in
``[m]`` (one Markov chain per group). Positive pairs are the ordered pairs of
distinct items within a group, or the single self pair for a group of one.
Under the default all-but-self rule the negative set of group ``i`` is every
item whose base differs from ``i``.
"""
from __future__ import annotations

import csv
from itertools import permutations

import numpy as np

from .config import DatasetSpec
from .errors import ConfigError, ParseError
from .rng import AUGMENT, DATASET, RandomStream


def _unit_rows(x):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norm, 1e-12)


class Augmenter:
    """Regenerates views of base vectors on the fly (infinite augmentation)."""

    def __init__(self, base_vectors, noise_sigma, seed, views_per_base=2):
        self.base_vectors = np.asarray(base_vectors, dtype=np.float64)
        self.noise_sigma = float(noise_sigma)
        self.stream = RandomStream(seed)
        self.views_per_base = views_per_base

    def views(self, item_ids, iteration):
        item_ids = np.asarray(item_ids, dtype=np.int64).reshape(-1)
        out = np.empty((item_ids.size, self.base_vectors.shape[1]))
        for n, item in enumerate(item_ids):
            g = self.stream.generator(AUGMENT, iteration, int(item))
            base = self.base_vectors[item // self.views_per_base]
            out[n] = base + self.noise_sigma * g.standard_normal(base.size)
        return _unit_rows(out)


class Dataset:
    def __init__(self, features, base_ids, neg_lists=None, pairs=None, augmenter=None):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 1:
            features = features[:, None]
        base_ids = np.asarray(base_ids).reshape(-1)
        if features.shape[0] != base_ids.size:
            raise ConfigError("features and base_ids disagree on the item count")
        if base_ids.size == 0:
            raise ConfigError("dataset has no items")
        self.features = features
        self.base_labels, self.base_of = _dense_labels(base_ids)
        self.m = len(self.base_labels)
        self.groups = [np.flatnonzero(self.base_of == i) for i in range(self.m)]
        self.explicit = neg_lists is not None
        self.neg = self._negatives(neg_lists)
        self.pairs = self._pairs(pairs)
        self.group_pairs = [self.pairs[self.pairs[:, 0] == i] for i in range(self.m)]
        self.augmenter = augmenter

    @property
    def n_items(self) -> int:
        return self.features.shape[0]

    @property
    def m_neg(self) -> int:
        return self.neg.shape[1]

    @property
    def n_pairs(self) -> int:
        return self.pairs.shape[0]

    @property
    def infinite(self) -> bool:
        return self.augmenter is not None

    def _negatives(self, neg_lists):
        if neg_lists is None:
            rows = [np.flatnonzero(self.base_of != i) for i in range(self.m)]
        else:
            rows = []
            for i, label in enumerate(self.base_labels):
                key = label if label in neg_lists else i
                if key not in neg_lists:
                    raise ConfigError(f"no negative list for base {label}")
                row = np.asarray(neg_lists[key], dtype=np.int64).reshape(-1)
                if row.size and (row.min() < 0 or row.max() >= self.n_items):
                    raise ConfigError(f"negative list for base {label} names an unknown item")
                rows.append(row)
        sizes = {r.size for r in rows}
        if 0 in sizes:
            raise ConfigError("every anchor needs at least one negative")
        if len(sizes) != 1:
            raise ConfigError(f"negative sets must all have the same size, got sizes {sorted(sizes)}")
        return np.stack(rows).astype(np.int64)

    def _pairs(self, pairs):
        if pairs is not None:
            pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
            bases = self.base_of[pairs[:, 0]]
            return np.column_stack([bases, pairs])
        rows = []
        for i, g in enumerate(self.groups):
            if g.size == 1:
                rows.append((i, g[0], g[0]))
            else:
                rows.extend((i, a, b) for a, b in permutations(g.tolist(), 2))
        return np.asarray(rows, dtype=np.int64)

    def payloads(self, item_ids, encoder, iteration=None):
        """Encoder inputs for the given items.

        ``iteration=None`` returns the stored (evaluation) views; in infinite
        augmentation mode an integer iteration regenerates fresh views.
        """
        item_ids = np.asarray(item_ids, dtype=np.int64)
        if encoder.spec.kind == "embedding-table":
            if encoder.spec.n_items != self.n_items:
                raise ConfigError(
                    f"embedding table has {encoder.spec.n_items} rows, dataset has {self.n_items} items")
            return item_ids.reshape(-1)
        if self.infinite and iteration is not None:
            return self.augmenter.views(item_ids, iteration)
        return self.features[item_ids.reshape(-1)]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            np.array_equal(self.features, other.features)
            and np.array_equal(self.base_of, other.base_of)
            and np.array_equal(self.neg, other.neg)
            and np.array_equal(self.pairs, other.pairs)
        )

    def __repr__(self):
        return f"Dataset(m={self.m}, n_items={self.n_items}, m_neg={self.m_neg}, n_pairs={self.n_pairs})"


def _dense_labels(base_ids):
    labels, seen = [], {}
    dense = np.empty(base_ids.size, dtype=np.int64)
    for n, b in enumerate(base_ids.tolist()):
        if b not in seen:
            seen[b] = len(labels)
            labels.append(b)
        dense[n] = seen[b]
    return labels, dense


def synth_dataset(spec: DatasetSpec) -> Dataset:
    """Gaussian clusters on the unit sphere with noisy, renormalized views.

    Item ``i * A + v`` is view ``v`` of base item ``i``. In infinite mode the
    stored two views only serve exact evaluation; training regenerates views
    every iteration.
    """
    if spec.mode != "synthetic-clusters":
        return load_dataset_csv(spec.path)
    stream = RandomStream(spec.seed)
    g = stream.generator(DATASET)
    centers = _unit_rows(g.standard_normal((spec.clusters, spec.input_dim)))
    assign = g.integers(0, spec.clusters, size=spec.m)
    bases = centers[assign] + spec.cluster_sigma * g.standard_normal((spec.m, spec.input_dim))
    infinite = spec.augmentations_per_item == "infinite"
    A = 2 if infinite else spec.augmentations_per_item
    # evaluation views for infinite mode come from a distinct iteration slot
    views = bases[:, None, :] + spec.noise_sigma * g.standard_normal((spec.m, A, spec.input_dim))
    views = _unit_rows(views).reshape(spec.m * A, spec.input_dim)
    base_ids = np.repeat(np.arange(spec.m), A)
    augmenter = Augmenter(bases, spec.noise_sigma, spec.seed, A) if infinite else None
    return Dataset(views, base_ids, augmenter=augmenter)


def write_dataset_csv(data: Dataset, path) -> None:
    k = data.features.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "base_id"] + [f"f{j}" for j in range(k)])
        for item in range(data.n_items):
            label = data.base_labels[data.base_of[item]]
            w.writerow([item, label] + [repr(float(v)) for v in data.features[item]])


def load_dataset_csv(path) -> Dataset:
    """Read ``id, base_id, f0..f{k-1}`` rows; negatives follow all-but-self."""
    ids, bases, rows = [], [], []
    seen = set()
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot open {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty file", line=1)
        header = [h.strip() for h in header]
        k = len(header) - 2
        expected = ["id", "base_id"] + [f"f{j}" for j in range(k)]
        if header != expected:
            raise ParseError(f"header must be {','.join(expected[:3])},..., got {','.join(header)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} columns, got {len(row)}", line=lineno)
            try:
                item = int(row[0])
                base = int(row[1])
                feats = [float(c) for c in row[2:]]
            except ValueError as exc:
                raise ParseError(f"non-numeric cell ({exc})", line=lineno) from None
            if item in seen:
                raise ParseError(f"duplicate id {item}", line=lineno)
            seen.add(item)
            ids.append(item)
            bases.append(base)
            rows.append(feats)
    if not ids:
        raise ParseError("no data rows", line=2)
    if sorted(ids) != list(range(len(ids))):
        # ids double as embedding-table rows, so they must be 0..n-1 in file order
        raise ParseError("ids must be 0..n-1")
    order = np.argsort(ids)
    feats = np.asarray(rows, dtype=np.float64).reshape(len(ids), k)[order]
    return Dataset(feats, np.asarray(bases)[order])
