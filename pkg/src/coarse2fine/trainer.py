"""Alternating optimisation: SGD on the classifier, periodic exact re-solve of
the relation matrices (one per dataset)."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .datagen import Dataset
from .losses import LossWeights, total_loss
from .metrics import evaluate
from .nncore import (ClassifierState, OptimizerConfig, backward, default_sizes, ema_update,
                     forward_logits, sgd_step, softmax_rows)
from .relations import (RelationMatrix, build_cost_matrix, initial_relation, is_feasible,
                        solve_relations_exact)

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainRunConfig:
    num_fine: int
    epochs: int = 100
    batch_size: int = 256
    gather_multiplier: int = 20
    seed: int = 0
    depth: int = 4
    hidden: int = 64
    use_coarse: bool = True
    use_fine: bool = True
    use_reg: bool = True
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.num_fine < 1:
            raise ValueError("num_fine must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or self.gather_multiplier < 1:
            raise ValueError("batch_size and gather_multiplier must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"]["milestones"] = list(d["optimizer"]["milestones"])
        return d


@dataclass
class TrainReport:
    config: TrainRunConfig
    state: ClassifierState
    relations: list[RelationMatrix]
    traces: dict[str, list[float]]
    epoch_traces: dict[str, list[float]]
    relation_history: list[dict]
    iterations_per_epoch: int
    clamped: int = 0

    @property
    def relation(self) -> RelationMatrix:
        if len(self.relations) != 1:
            raise AttributeError("report holds several relation matrices; use .relations")
        return self.relations[0]

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "iterations_per_epoch": self.iterations_per_epoch,
            "steps": self.state.step,
            "clamped_logs": self.clamped,
            "traces": self.traces,
            "epoch_traces": self.epoch_traces,
            "relation_history": self.relation_history,
            "relations": [r.assignment.tolist() for r in self.relations],
            "num_coarse": [r.num_coarse for r in self.relations],
        }


# -- neighbours -------------------------------------------------------------------

def build_neighbor_index(features: np.ndarray, coarse_labels: np.ndarray, num_neighbors: int,
                         groups: np.ndarray | None = None, block: int = 256) -> np.ndarray:
    """Exact Euclidean ``num_neighbors``-NN of every sample among samples with the same label.

    Returns an (N, L) array of row indices. Self matches are excluded and equal
    distances resolve to the lower index. ``groups`` overrides the grouping key
    (the multi-dataset trainer groups by (dataset, coarse label)).
    """
    features = np.asarray(features, dtype=np.float64)
    key = np.asarray(coarse_labels if groups is None else groups)
    n = features.shape[0]
    if key.shape != (n,):
        raise ValueError("one coarse label per sample required")
    if num_neighbors < 1:
        raise ValueError("num_neighbors must be >= 1")
    out = np.empty((n, num_neighbors), dtype=np.int64)
    for g in np.unique(key):
        members = np.flatnonzero(key == g)
        if members.size <= num_neighbors:
            raise ValueError(f"coarse class {g} has {members.size} samples; "
                             f"need more than {num_neighbors} for {num_neighbors} neighbours")
        pts = features[members]
        for lo in range(0, members.size, block):
            rows = np.arange(lo, min(lo + block, members.size))
            diff = pts[rows, None, :] - pts[None, :, :]
            dist = np.einsum("ijk,ijk->ij", diff, diff)
            dist[np.arange(rows.size), rows] = np.inf
            nearest = np.argsort(dist, axis=1, kind="stable")[:, :num_neighbors]
            out[members[rows]] = members[nearest]
    return out


def max_neighbors(coarse_labels: np.ndarray, groups: np.ndarray | None = None) -> int:
    """Largest L for which every group still has more than L members."""
    key = np.asarray(coarse_labels if groups is None else groups)
    return int(np.unique(key, return_counts=True)[1].min()) - 1


# -- training ---------------------------------------------------------------------

def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("relation_init", "shuffle", "gather")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(c) for name, c in zip(names, children)}


def predict_fine(state: ClassifierState, features: np.ndarray, which: str = "current") -> np.ndarray:
    return np.argmax(forward_logits(state, features, which), axis=1)


def gather_relation(state: ClassifierState, dataset: Dataset, rows: np.ndarray, lambda_m: float) -> RelationMatrix:
    probs = softmax_rows(forward_logits(state, dataset.features[rows]))
    cost = build_cost_matrix(probs, dataset.coarse_labels[rows], dataset.num_coarse)
    return solve_relations_exact(cost, lambda_m)[0]


def _snapshot(iteration: int, relations: Sequence[RelationMatrix]) -> dict:
    for r in relations:
        if not is_feasible(r.matrix):
            raise AssertionError(f"infeasible relation emitted at iteration {iteration}")
    return {"iteration": iteration, "relations": [r.assignment.tolist() for r in relations]}


def train_multi(datasets: Sequence[Dataset], config: TrainRunConfig) -> TrainReport:
    """Joint training over datasets that share the fine classes but not the coarse labels."""
    if not datasets:
        raise ValueError("no datasets given")
    dims = {ds.dim for ds in datasets}
    if len(dims) != 1:
        raise ValueError(f"datasets disagree on feature dimension: {sorted(dims)}")
    k_f = config.num_fine
    for ds in datasets:
        if k_f < ds.num_coarse:
            raise ValueError(f"K_F={k_f} is smaller than K_C={ds.num_coarse}")
    w = config.weights
    rng = _streams(config.seed)

    features = np.concatenate([ds.features for ds in datasets])
    coarse = np.concatenate([ds.coarse_labels for ds in datasets])
    origin = np.concatenate([np.full(len(ds), l, dtype=np.int64) for l, ds in enumerate(datasets)])
    n_total = features.shape[0]
    group = origin * (max(ds.num_coarse for ds in datasets) + 1) + coarse
    neighbors = build_neighbor_index(features, coarse, w.num_neighbors, groups=group)

    state = ClassifierState.create(default_sizes(features.shape[1], k_f, config.depth, config.hidden),
                                   config.seed)
    relations = [initial_relation(k_f, ds.num_coarse, w.lambda_m, rng["relation_init"]) for ds in datasets]
    history = [_snapshot(0, relations)]
    names = ("coarse", "neighbor", "confidence", "fine", "reg", "total")
    traces: dict[str, list[float]] = {k: [] for k in names}
    epoch_traces: dict[str, list[float]] = {k: [] for k in names}
    iters_per_epoch = -(-n_total // config.batch_size)
    clamped = 0
    it = 0

    for epoch in range(config.epochs):
        order = rng["shuffle"].permutation(n_total)
        for start in range(0, n_total, config.batch_size):
            idx = order[start:start + config.batch_size]
            x = features[idx]
            siblings = np.empty((idx.size, k_f), dtype=bool)
            for l, rel in enumerate(relations):
                sel = origin[idx] == l
                if sel.any():
                    siblings[sel] = rel.matrix[:, coarse[idx][sel]].T.astype(bool)
            logits = forward_logits(state, x)
            ema_logits = forward_logits(state, x, "ema")
            nb_rows = neighbors[idx].reshape(-1)
            nb_probs = softmax_rows(forward_logits(state, features[nb_rows], "ema"))
            nb_probs = nb_probs.reshape(idx.size, w.num_neighbors, k_f)
            loss = total_loss(logits, siblings, nb_probs, ema_logits, w, use_coarse=config.use_coarse,
                              use_fine=config.use_fine, use_reg=config.use_reg)
            if not np.isfinite(loss.value) or not np.all(np.isfinite(loss.grad_logits)):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, iteration {it + 1}: parts={loss.parts}")
            clamped += loss.clamped
            sgd_step(state, backward(state, x, loss.grad_logits), config.optimizer, epoch)
            ema_update(state, w.gamma)
            it += 1
            for k in names:
                traces[k].append(loss.parts[k])

            if it % w.update_period == 0:
                new = []
                for l, ds in enumerate(datasets):
                    take = min(len(ds), config.gather_multiplier * config.batch_size)
                    rows = rng["gather"].permutation(len(ds))[:take]
                    new.append(gather_relation(state, ds, rows, w.lambda_m))
                relations = new
                history.append(_snapshot(it, relations))
        for k in names:
            epoch_traces[k].append(float(np.mean(traces[k][-iters_per_epoch:])))
        log.debug("epoch %d: total %.5f", epoch, epoch_traces["total"][-1])

    return TrainReport(config=config, state=state, relations=relations, traces=traces,
                       epoch_traces=epoch_traces, relation_history=history,
                       iterations_per_epoch=iters_per_epoch, clamped=clamped)


def train_single(dataset: Dataset, config: TrainRunConfig) -> TrainReport:
    return train_multi([dataset], config)


def evaluate_state(state: ClassifierState, dataset: Dataset, num_fine: int,
                   learned: RelationMatrix | None = None, which: str = "current"):
    if dataset.fine_labels is None:
        raise ValueError("evaluation needs fine labels")
    pred = predict_fine(state, dataset.features, which)
    reference = dataset.true_relation() if learned is not None else None
    return evaluate(pred, dataset.fine_labels, num_fine, learned, reference)
