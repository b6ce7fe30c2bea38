"""Coarse-fine relation matrices and the discrete problem that infers them.

The relation matrix M (K_F x K_C, binary, one 1 per row, every column used)
is chosen to minimise

    -(1/N) sum_{i,j} C[j, i] M[i, j]  +  lambda_m * ((1/K_C) sum_j n_j^2 - K_F^2 / K_C^2)

where C = Y_oh^T P is the coarse-by-fine cost matrix and n_j the column sums.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BudgetExceededError, DimensionError, InfeasibleRelationError

BRUTEFORCE_BUDGET = 10**7


@dataclass(frozen=True)
class RelationMatrix:
    """Fine-to-coarse parent map; ``assignment[i]`` is the coarse parent of fine class i."""

    assignment: np.ndarray
    num_coarse: int

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64).copy()
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)
        if a.ndim != 1 or a.size == 0:
            raise DimensionError("assignment must be a non-empty vector")
        if a.min() < 0 or a.max() >= self.num_coarse:
            raise InfeasibleRelationError(f"coarse parents must lie in [0, {self.num_coarse})")
        empty = np.flatnonzero(self.column_sums == 0)
        if empty.size:
            raise InfeasibleRelationError(f"coarse classes {empty.tolist()} have no fine class")

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "RelationMatrix":
        m = np.asarray(matrix)
        if m.ndim != 2:
            raise DimensionError("relation matrix must be 2-D")
        if not np.isin(m, (0, 1)).all() or not (m.sum(axis=1) == 1).all():
            raise InfeasibleRelationError("every row must contain exactly one 1")
        return cls(np.argmax(m, axis=1), m.shape[1])

    @property
    def num_fine(self) -> int:
        return int(self.assignment.size)

    @property
    def matrix(self) -> np.ndarray:
        m = np.zeros((self.num_fine, self.num_coarse), dtype=np.int64)
        m[np.arange(self.num_fine), self.assignment] = 1
        return m

    @property
    def column_sums(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.num_coarse)

    def permute_fine(self, perm: np.ndarray) -> "RelationMatrix":
        """Relabel fine class k as ``perm[k]``."""
        out = np.empty_like(self.assignment)
        out[np.asarray(perm)] = self.assignment
        return RelationMatrix(out, self.num_coarse)

    def __eq__(self, other):
        return (isinstance(other, RelationMatrix) and self.num_coarse == other.num_coarse
                and np.array_equal(self.assignment, other.assignment))

    def __hash__(self):
        return hash((self.num_coarse, self.assignment.tobytes()))


def is_feasible(matrix: np.ndarray) -> bool:
    m = np.asarray(matrix)
    return bool(m.ndim == 2 and np.isin(m, (0, 1)).all()
                and (m.sum(axis=1) == 1).all() and (m.sum(axis=0) >= 1).all())


def _as_matrix(relation) -> np.ndarray:
    if isinstance(relation, RelationMatrix):
        return relation.matrix
    return np.asarray(relation)


@dataclass
class CostMatrix:
    """C[j, i] = total predicted probability of fine class i over samples with coarse label j."""

    entries: np.ndarray
    sample_count: float

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2:
            raise DimensionError("cost matrix must be 2-D")
        if self.sample_count <= 0:
            raise ValueError("sample_count must be positive")

    @property
    def num_coarse(self) -> int:
        return self.entries.shape[0]

    @property
    def num_fine(self) -> int:
        return self.entries.shape[1]


@dataclass
class RelationObjectiveValue:
    linear_term: float
    balance_term: float
    lambda_m: float
    total: float


def build_cost_matrix(probs: np.ndarray, coarse_labels: np.ndarray, num_coarse: int) -> CostMatrix:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(coarse_labels, dtype=np.int64)
    if labels.shape != (probs.shape[0],):
        raise DimensionError(f"{labels.shape[0]} labels for {probs.shape[0]} prediction rows")
    if labels.size and (labels.min() < 0 or labels.max() >= num_coarse):
        raise ValueError(f"coarse labels must lie in [0, {num_coarse})")
    entries = np.zeros((num_coarse, probs.shape[1]))
    np.add.at(entries, labels, probs)
    return CostMatrix(entries, float(probs.shape[0]))


def linear_objective(relation, cost: CostMatrix) -> float:
    m = _as_matrix(relation)
    if m.shape != (cost.num_fine, cost.num_coarse):
        raise DimensionError(f"relation {m.shape} vs cost {cost.entries.shape}")
    return float(-np.sum(cost.entries.T * m) / cost.sample_count)


def balance_penalty(relation) -> float:
    m = _as_matrix(relation)
    k_f, k_c = m.shape
    n = m.sum(axis=0).astype(np.float64)
    return float(np.sum(n * n) / k_c - (k_f / k_c) ** 2)


def relation_objective(relation, cost: CostMatrix, lambda_m: float) -> RelationObjectiveValue:
    lin = linear_objective(relation, cost)
    bal = balance_penalty(relation)
    return RelationObjectiveValue(lin, bal, lambda_m, lin + lambda_m * bal)


def _check_shapes(cost: CostMatrix, lambda_m: float) -> None:
    if lambda_m < 0:
        raise ValueError("lambda_m must be nonnegative")
    if cost.num_fine < cost.num_coarse:
        raise InfeasibleRelationError(
            f"cannot give each of {cost.num_coarse} coarse classes a child with only {cost.num_fine} fine classes")


def solve_relations_bruteforce(cost: CostMatrix, lambda_m: float, budget: int = BRUTEFORCE_BUDGET,
                               chunk: int = 1 << 16) -> tuple[RelationMatrix, RelationObjectiveValue]:
    """Enumerate every assignment vector in lexicographic order; ties keep the first one found."""
    _check_shapes(cost, lambda_m)
    k_c, k_f = cost.entries.shape
    total_states = k_c ** k_f
    if total_states > budget:
        raise BudgetExceededError(f"{k_c}^{k_f} = {total_states} assignments exceed budget {budget}")
    gain = -cost.entries.T / cost.sample_count  # (K_F, K_C)
    place = k_c ** np.arange(k_f - 1, -1, -1, dtype=np.int64)
    rows = np.arange(k_f)
    best_val, best_code = np.inf, -1
    tol = 1e-12
    for start in range(0, total_states, chunk):
        codes = np.arange(start, min(start + chunk, total_states), dtype=np.int64)
        digits = (codes[:, None] // place) % k_c
        counts = np.zeros((codes.size, k_c), dtype=np.int64)
        for j in range(k_c):
            counts[:, j] = np.count_nonzero(digits == j, axis=1)
        vals = gain[rows, digits].sum(axis=1)
        vals = vals + lambda_m * ((counts * counts).sum(axis=1) / k_c - (k_f / k_c) ** 2)
        vals[counts.min(axis=1) < 1] = np.inf
        low = vals.min()
        if low < best_val - tol:
            best_val = low
            best_code = int(codes[np.flatnonzero(vals <= low + tol)[0]])
    relation = RelationMatrix((best_code // place) % k_c, k_c)
    return relation, relation_objective(relation, cost, lambda_m)


def solve_relations_exact(cost: CostMatrix, lambda_m: float) -> tuple[RelationMatrix, RelationObjectiveValue]:
    """Exact minimiser via successive shortest paths on the assignment flow network.

    Network: source -> fine i (capacity 1) -> coarse j (cost -C[j,i]/N) -> sink,
    where coarse j reaches the sink through unit arcs of marginal cost
    lambda_m/K_C * (2n+1) for its (n+1)-th child. The marginals increase, so the
    convex column cost is represented exactly. The first arc of every coarse
    node also carries a lexicographic priority that forces every column to be
    used when K_F >= K_C.

    Each augmentation adds one fine class; the path may reassign already placed
    fine classes, so the search runs Bellman-Ford over the K_C coarse nodes with
    arc j -> j' costing the cheapest move of a child of j to j'.
    """
    _check_shapes(cost, lambda_m)
    k_c, k_f = cost.entries.shape
    gain = -cost.entries.T / cost.sample_count  # (K_F, K_C)
    scale = 1.0 + np.abs(gain).max() + lambda_m * 2.0 * k_f / k_c
    tol = 1e-14 * scale
    assign = np.full(k_f, -1, dtype=np.int64)
    counts = np.zeros(k_c, dtype=np.int64)
    cols = np.arange(k_c)

    for _ in range(k_f):
        free = np.flatnonzero(assign < 0)
        entry_cost = gain[free].min(axis=0)
        entry_fine = free[np.argmin(gain[free], axis=0)]

        move_cost = np.full((k_c, k_c), np.inf)
        mover = np.full((k_c, k_c), -1, dtype=np.int64)
        for j in np.flatnonzero(counts):
            kids = np.flatnonzero(assign == j)
            delta = gain[kids] - gain[kids, j][:, None]
            pick = np.argmin(delta, axis=0)
            move_cost[j] = delta[pick, cols]
            mover[j] = kids[pick]
            move_cost[j, j] = np.inf

        dist = entry_cost.copy()
        pred = np.full(k_c, -1, dtype=np.int64)
        for _round in range(k_c - 1):
            cand = dist[:, None] + move_cost
            via = np.argmin(cand, axis=0)
            best = cand[via, cols]
            better = best < dist - tol
            if not better.any():
                break
            dist[better] = best[better]
            pred[better] = via[better]

        exit_cost = dist + lambda_m / k_c * (2 * counts + 1)
        empty = counts == 0
        pool = np.flatnonzero(empty) if empty.any() else cols
        end = int(pool[np.argmin(exit_cost[pool])])

        # walk the path back, collecting reassignments
        moves = []
        node, seen = end, {end}
        while pred[node] >= 0:
            prev = int(pred[node])
            if prev in seen:
                raise RuntimeError("negative cycle in residual network (numerical breakdown)")
            seen.add(prev)
            moves.append((int(mover[prev, node]), node))
            node = prev
        for fine, target in moves:
            assign[fine] = target
        assign[entry_fine[node]] = node
        counts[end] += 1

    relation = RelationMatrix(assign, k_c)
    return relation, relation_objective(relation, cost, lambda_m)


def random_feasible_relation(num_fine: int, num_coarse: int, rng: np.random.Generator) -> RelationMatrix:
    """Uniformly random parent map conditioned on every coarse class being used."""
    if num_fine < num_coarse:
        raise InfeasibleRelationError("need at least as many fine as coarse classes")
    while True:
        a = rng.integers(0, num_coarse, size=num_fine)
        if np.bincount(a, minlength=num_coarse).min() >= 1:
            return RelationMatrix(a, num_coarse)


def initial_relation(num_fine: int, num_coarse: int, lambda_m: float,
                     rng: np.random.Generator) -> RelationMatrix:
    """Solve the relation problem for a cost matrix with i.i.d. U[0, 1) entries (N = 1)."""
    cost = CostMatrix(rng.random((num_coarse, num_fine)), 1.0)
    return solve_relations_exact(cost, lambda_m)[0]


def graph_edit_distance(a, b) -> int:
    """Edge insertions plus deletions between two bipartite graphs on the same nodes."""
    ma, mb = _as_matrix(a), _as_matrix(b)
    if ma.shape != mb.shape:
        raise DimensionError(f"relation shapes differ: {ma.shape} vs {mb.shape}")
    return int(np.count_nonzero(ma != mb))


# -- file formats --------------------------------------------------------------

def write_relation(path: str | Path, relation: RelationMatrix) -> None:
    lines = [f"{relation.num_fine} {relation.num_coarse}"]
    lines += [str(int(j)) for j in relation.assignment]
    Path(path).write_text("\n".join(lines) + "\n")


def format_relation(relation: RelationMatrix) -> str:
    return "\n".join([f"{relation.num_fine} {relation.num_coarse}"]
                     + [str(int(j)) for j in relation.assignment]) + "\n"


def read_relation(path: str | Path) -> RelationMatrix:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty relation file")
    try:
        k_f, k_c = (int(x) for x in lines[0].split())
        assignment = [int(x) for x in lines[1:]]
    except ValueError as exc:
        raise ValueError(f"{path}: malformed relation file ({exc})") from None
    if len(assignment) != k_f:
        raise ValueError(f"{path}: header announces {k_f} fine classes, found {len(assignment)}")
    return RelationMatrix(np.array(assignment), k_c)


def write_cost_csv(path: str | Path, cost: CostMatrix) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"fine{i}" for i in range(cost.num_fine)])
        for row in cost.entries:
            w.writerow([format(float(v), ".17g") for v in row])


def read_cost_csv(path: str | Path, sample_count: float | None = None) -> CostMatrix:
    """Rows are coarse classes, columns fine classes. N defaults to the grand total."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows and rows[0] and not _is_number(rows[0][0]):
        rows = rows[1:]
    try:
        entries = np.array([[float(v) for v in row] for row in rows if row], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric cost entry ({exc})") from None
    if entries.ndim != 2 or entries.size == 0:
        raise ValueError(f"{path}: cost matrix must be a non-empty rectangle")
    if not np.all(np.isfinite(entries)) or (entries < 0).any():
        raise ValueError(f"{path}: cost entries must be finite and nonnegative")
    return CostMatrix(entries, float(sample_count) if sample_count else float(entries.sum()))


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True
