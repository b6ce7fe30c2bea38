"""Synthetic hierarchical Gaussian mixtures and CSV ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .relations import RelationMatrix


@dataclass
class Dataset:
    features: np.ndarray
    coarse_labels: np.ndarray
    num_coarse: int
    fine_labels: np.ndarray | None = None
    num_fine: int | None = None
    index: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.coarse_labels = np.asarray(self.coarse_labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        n = self.features.shape[0]
        if self.coarse_labels.shape != (n,):
            raise ValueError(f"{self.coarse_labels.size} coarse labels for {n} samples")
        if n and (self.coarse_labels.min() < 0 or self.coarse_labels.max() >= self.num_coarse):
            raise ValueError(f"coarse labels must lie in [0, {self.num_coarse})")
        if self.fine_labels is not None:
            self.fine_labels = np.asarray(self.fine_labels, dtype=np.int64)
            if self.fine_labels.shape != (n,):
                raise ValueError(f"{self.fine_labels.size} fine labels for {n} samples")
            if self.num_fine is None:
                self.num_fine = int(self.fine_labels.max()) + 1 if n else 0
            if n and (self.fine_labels.min() < 0 or self.fine_labels.max() >= self.num_fine):
                raise ValueError(f"fine labels must lie in [0, {self.num_fine})")
            self.fine_to_coarse()  # single-parent check

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def fine_to_coarse(self) -> np.ndarray:
        """Parent of every fine class seen in the data (-1 for unseen classes)."""
        if self.fine_labels is None:
            raise ValueError("dataset has no fine labels")
        parent = np.full(self.num_fine, -1, dtype=np.int64)
        for f, c in zip(self.fine_labels, self.coarse_labels):
            if parent[f] == -1:
                parent[f] = c
            elif parent[f] != c:
                raise ValueError(f"fine class {f} appears under coarse classes {parent[f]} and {c}")
        return parent

    def true_relation(self) -> RelationMatrix:
        return RelationMatrix(self.fine_to_coarse(), self.num_coarse)


@dataclass
class TaxonomySpec:
    """Fine-to-coarse grouping plus the geometry of the generated mixture.

    ``weights`` are per-fine-class sample proportions (uniform when None).
    Coarse centres sit at distance ``separation`` from the origin along random
    directions, fine centres at distance ``within_separation`` from their parent.
    """

    assignment: Sequence[int]
    num_coarse: int | None = None
    weights: Sequence[float] | None = None
    separation: float = 3.0
    within_separation: float = 2.0
    noise: float = 0.25

    def __post_init__(self):
        self.assignment = [int(a) for a in self.assignment]
        if self.num_coarse is None:
            self.num_coarse = max(self.assignment) + 1
        RelationMatrix(np.array(self.assignment), self.num_coarse)  # surjectivity
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (self.num_fine,) or (w < 0).any() or w.sum() <= 0:
                raise ValueError("weights must be K_F nonnegative numbers with a positive sum")
            self.weights = list(w / w.sum())
        if self.separation < 0 or self.within_separation < 0 or self.noise <= 0:
            raise ValueError("separations must be nonnegative and noise positive")

    @property
    def num_fine(self) -> int:
        return len(self.assignment)

    @classmethod
    def balanced(cls, num_coarse: int, num_fine: int, **kw) -> "TaxonomySpec":
        """Fine class i goes to coarse class i mod K_C."""
        if num_fine < num_coarse:
            raise ValueError(f"K_F={num_fine} < K_C={num_coarse}: some coarse class would be empty")
        return cls([i % num_coarse for i in range(num_fine)], num_coarse, **kw)

    def relation(self) -> RelationMatrix:
        return RelationMatrix(np.array(self.assignment), self.num_coarse)


def geometric_weights(num_fine: int, ratio: float) -> list[float]:
    """Imbalance profile where the largest class is ``ratio`` times the smallest."""
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    w = ratio ** (-np.arange(num_fine) / max(num_fine - 1, 1))
    return list(w / w.sum())


def class_counts(weights: Sequence[float], n: int) -> np.ndarray:
    """Largest-remainder apportionment of n samples; uniform weights give counts within 1."""
    w = np.asarray(weights, dtype=np.float64)
    raw = n * w / w.sum()
    counts = np.floor(raw).astype(np.int64)
    short = n - counts.sum()
    order = np.lexsort((np.arange(w.size), -(raw - counts)))
    counts[order[:short]] += 1
    return counts


def _unit_vectors(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((count, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate(spec: TaxonomySpec, n: int, dim: int, seed: int) -> Dataset:
    if n < spec.num_fine:
        raise ValueError(f"need at least one sample per fine class (N={n} < K_F={spec.num_fine})")
    if dim < 2:
        raise ValueError("dim must be >= 2")
    rng = np.random.default_rng(seed)
    parent = np.asarray(spec.assignment)
    coarse_centres = spec.separation * _unit_vectors(rng, spec.num_coarse, dim)
    fine_centres = coarse_centres[parent] + spec.within_separation * _unit_vectors(rng, spec.num_fine, dim)
    weights = spec.weights if spec.weights is not None else np.full(spec.num_fine, 1.0 / spec.num_fine)
    counts = class_counts(weights, n)
    fine = np.repeat(np.arange(spec.num_fine), counts)
    fine = fine[rng.permutation(n)]
    features = fine_centres[fine] + spec.noise * rng.standard_normal((n, dim))
    return Dataset(features, parent[fine], spec.num_coarse, fine, spec.num_fine)


def relabel(dataset: Dataset, alternative: TaxonomySpec) -> Dataset:
    """Same features and fine labels, coarse labels taken from another grouping."""
    if dataset.fine_labels is None:
        raise ValueError("relabelling needs fine labels")
    if dataset.num_fine != alternative.num_fine:
        raise ValueError(f"alternative taxonomy covers {alternative.num_fine} fine classes, "
                         f"dataset has {dataset.num_fine}")
    parent = np.asarray(alternative.assignment)
    return Dataset(dataset.features, parent[dataset.fine_labels], alternative.num_coarse,
                   dataset.fine_labels, dataset.num_fine, dataset.index)


def subset(dataset: Dataset, rows: np.ndarray, index: int | None = None) -> Dataset:
    return Dataset(dataset.features[rows], dataset.coarse_labels[rows], dataset.num_coarse,
                   None if dataset.fine_labels is None else dataset.fine_labels[rows],
                   dataset.num_fine, dataset.index if index is None else index)


# -- CSV ------------------------------------------------------------------------

def save_csv(dataset: Dataset, path: str | Path) -> None:
    header = [f"f{k}" for k in range(dataset.dim)] + ["coarse"]
    if dataset.fine_labels is not None:
        header.append("fine")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for n in range(len(dataset)):
            row = [format(float(v), ".17g") for v in dataset.features[n]]
            row.append(str(int(dataset.coarse_labels[n])))
            if dataset.fine_labels is not None:
                row.append(str(int(dataset.fine_labels[n])))
            w.writerow(row)


def load_csv(path: str | Path, num_coarse: int | None = None, num_fine: int | None = None,
             index: int = 0) -> Dataset:
    """Read ``f0..f{d-1},coarse[,fine]``. Class counts default to max label + 1."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        has_fine = bool(header) and header[-1] == "fine"
        dim = len(header) - (2 if has_fine else 1)
        expected = [f"f{k}" for k in range(dim)] + ["coarse"] + (["fine"] if has_fine else [])
        if dim < 1 or header != expected:
            raise ValueError(f"{path}: line 1: header must be f0..f{{dim-1}},coarse[,fine]")
        feats, coarse, fine = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            values = []
            for col, cell in zip(header[:dim], row[:dim]):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ValueError(f"{path}: line {lineno}, column {col}: "
                                     f"not a number: {cell!r}") from None
            feats.append(values)
            for col, cell, out in zip(header[dim:], row[dim:], (coarse, fine)):
                try:
                    out.append(int(cell))
                except ValueError:
                    raise ValueError(f"{path}: line {lineno}, column {col}: "
                                     f"not an integer label: {cell!r}") from None
    features = np.array(feats, dtype=np.float64).reshape(len(feats), dim)
    coarse_arr = np.array(coarse, dtype=np.int64)
    if num_coarse is None:
        num_coarse = int(coarse_arr.max()) + 1 if coarse_arr.size else 1
    fine_arr = np.array(fine, dtype=np.int64) if has_fine else None
    return Dataset(features, coarse_arr, num_coarse, fine_arr, num_fine, index)
