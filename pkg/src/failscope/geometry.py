"""Box geometry, pairwise matching costs, and optimal assignment.

Annotated objects (designer expectations) and predicted objects (detector
output) are matched by solving a minimum-cost bipartite assignment over a
pairwise cost that combines a 0/1 class mismatch term with a box term built
from an l1 distance and the generalized IoU.

All coordinates are normalized image fractions in [0, 1]; pixel inputs must
be converted at ingestion (see :mod:`failscope.backends`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

# Tolerance used to recognize equally-cheap assignments when tie-breaking.
_COST_TIE_TOL = 1e-9


def normalize_label(label: str) -> str:
    """Normalize a class label: trim whitespace, Unicode-aware lowercase."""
    return label.strip().lower()


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized coordinates, corners strictly ordered."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.x_min < self.x_max <= 1.0):
            raise ValueError(
                f"invalid x extent: [{self.x_min}, {self.x_max}] must satisfy 0 <= x_min < x_max <= 1"
            )
        if not (0.0 <= self.y_min < self.y_max <= 1.0):
            raise ValueError(
                f"invalid y extent: [{self.y_min}, {self.y_max}] must satisfy 0 <= y_min < y_max <= 1"
            )

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class LabeledBox:
    """A bounding box carrying a normalized class label."""

    label: str
    box: BoundingBox

    def __post_init__(self) -> None:
        normalized = normalize_label(self.label)
        if not normalized:
            raise ValueError("label is empty after normalization")
        object.__setattr__(self, "label", normalized)


@dataclass(frozen=True)
class MatchWeights:
    """Weights of the matching cost terms; all default to 0.5."""

    gamma_class: float = 0.5
    gamma_box: float = 0.5
    lambda_l1: float = 0.5
    lambda_iou: float = 0.5

    def __post_init__(self) -> None:
        for name in ("gamma_class", "gamma_box", "lambda_l1", "lambda_iou"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {value}")


@dataclass(frozen=True)
class CostMatrix:
    """Row-major M x N matrix of pairwise matching costs.

    Rows index annotations, columns index predictions. Every entry must be
    finite and nonnegative.
    """

    rows: int
    cols: int
    entries: tuple[tuple[float, ...], ...]

    def __post_init__(self) -> None:
        if self.rows < 0 or self.cols < 0:
            raise ValueError("matrix dimensions must be nonnegative")
        if len(self.entries) != self.rows:
            raise ValueError(f"expected {self.rows} rows, got {len(self.entries)}")
        for row in self.entries:
            if len(row) != self.cols:
                raise ValueError(f"expected {self.cols} columns, got {len(row)}")
            for value in row:
                if not np.isfinite(value) or value < 0.0:
                    raise ValueError(f"cost entries must be finite and >= 0, got {value}")

    @classmethod
    def from_rows(cls, rows: list[list[float]] | tuple[tuple[float, ...], ...]) -> "CostMatrix":
        entries = tuple(tuple(float(v) for v in row) for row in rows)
        n_cols = len(entries[0]) if entries else 0
        return cls(rows=len(entries), cols=n_cols, entries=entries)

    def as_array(self) -> np.ndarray:
        return np.array(self.entries, dtype=float).reshape(self.rows, self.cols)


@dataclass(frozen=True)
class Assignment:
    """Optimal matching: disjoint (annotation, prediction) index pairs."""

    pairs: frozenset[tuple[int, int]]
    total_cost: float = 0.0

    def __post_init__(self) -> None:
        ann_indices = [a for a, _ in self.pairs]
        pred_indices = [p for _, p in self.pairs]
        if len(set(ann_indices)) != len(ann_indices) or len(set(pred_indices)) != len(pred_indices):
            raise ValueError("assignment reuses an annotation or prediction index")
        if self.total_cost < 0.0:
            raise ValueError("total cost must be nonnegative")

    def sorted_pairs(self) -> list[tuple[int, int]]:
        return sorted(self.pairs)

    def matched_annotations(self) -> set[int]:
        return {a for a, _ in self.pairs}

    def matched_predictions(self) -> set[int]:
        return {p for _, p in self.pairs}


def class_cost(a: str, b: str) -> float:
    """0/1 label mismatch cost: 0 iff the normalized labels are equal."""
    return 0.0 if normalize_label(a) == normalize_label(b) else 1.0


def l1_box_cost(a: BoundingBox, b: BoundingBox) -> float:
    """Sum of absolute differences over the four box coordinates; in [0, 4]."""
    return (
        abs(a.x_min - b.x_min)
        + abs(a.y_min - b.y_min)
        + abs(a.x_max - b.x_max)
        + abs(a.y_max - b.y_max)
    )


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Plain intersection-over-union of two boxes; in [0, 1]."""
    inter = _intersection_area(a, b)
    union = a.area + b.area - inter
    return inter / union


def giou(a: BoundingBox, b: BoundingBox) -> float:
    """Generalized IoU: IoU minus the enclosing-box slack; in (-1, 1].

    The slack term (|C| - |A union B|) / |C|, with C the smallest axis-aligned
    box enclosing both inputs, penalizes disjoint boxes by how far apart they
    are, which keeps the value scale invariant.
    """
    inter = _intersection_area(a, b)
    union = a.area + b.area - inter
    enclosing = (max(a.x_max, b.x_max) - min(a.x_min, b.x_min)) * (
        max(a.y_max, b.y_max) - min(a.y_min, b.y_min)
    )
    # The enclosing box contains the union; clamp the one-ulp float artifact
    # so the slack term never goes negative.
    slack = max(0.0, (enclosing - union) / enclosing)
    return inter / union - slack


def giou_loss(a: BoundingBox, b: BoundingBox) -> float:
    """1 - giou; in [0, 2). Zero iff the boxes are identical."""
    return 1.0 - giou(a, b)


def _intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    width = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    height = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if width <= 0.0 or height <= 0.0:
        return 0.0
    return width * height


def match_cost(ann: LabeledBox, pred: LabeledBox, w: MatchWeights | None = None) -> float:
    """Pairwise matching cost between an annotation and a prediction.

    gamma_class * class_cost + gamma_box * (lambda_l1 * l1 + lambda_iou * (1 - giou)).
    Zero iff the labels are equal and the boxes identical (for positive weights).
    """
    if w is None:
        w = MatchWeights()
    box_term = w.lambda_l1 * l1_box_cost(ann.box, pred.box) + w.lambda_iou * giou_loss(
        ann.box, pred.box
    )
    return w.gamma_class * class_cost(ann.label, pred.label) + w.gamma_box * box_term


def build_cost_matrix(
    anns: list[LabeledBox], preds: list[LabeledBox], w: MatchWeights | None = None
) -> CostMatrix:
    """Pairwise cost matrix: entry (i, j) = match_cost(anns[i], preds[j])."""
    if w is None:
        w = MatchWeights()
    entries = tuple(tuple(match_cost(a, p, w) for p in preds) for a in anns)
    return CostMatrix(rows=len(anns), cols=len(preds), entries=entries)


def optimal_assignment(m: CostMatrix) -> Assignment:
    """Minimum-cost assignment of exactly min(M, N) disjoint pairs.

    Among equally-cheap assignments, returns the one whose pair set, sorted by
    annotation then prediction index, is lexicographically smallest. The
    rectangular case leaves the surplus side unmatched.
    """
    if m.rows == 0 or m.cols == 0:
        return Assignment(pairs=frozenset(), total_cost=0.0)

    costs = m.as_array()
    row_ind, col_ind = linear_sum_assignment(costs)
    best_total = float(costs[row_ind, col_ind].sum())

    pairs = _lexicographic_optimal_pairs(costs, best_total)
    total = float(sum(costs[i, j] for i, j in pairs))
    return Assignment(pairs=frozenset(pairs), total_cost=total)


def _lexicographic_optimal_pairs(costs: np.ndarray, best_total: float) -> list[tuple[int, int]]:
    """Greedily fix pairs in sorted order, keeping an optimal completion.

    At each step the candidate (i, j) is accepted iff the fixed pairs plus the
    cheapest completion over annotations > i and unused predictions still sum
    to the optimal total. Accepted pairs therefore form the lexicographically
    smallest optimal pair set.
    """
    n_rows, n_cols = costs.shape
    k = min(n_rows, n_cols)
    chosen: list[tuple[int, int]] = []
    fixed_cost = 0.0
    used_cols: set[int] = set()
    prev_row = -1

    for position in range(k):
        remaining = k - position - 1
        accepted = False
        for i in range(prev_row + 1, n_rows):
            if n_rows - 1 - i < remaining:
                break  # not enough annotations left below i to complete
            for j in range(n_cols):
                if j in used_cols:
                    continue
                completion = _completion_cost(costs, i, used_cols | {j}, remaining)
                if fixed_cost + costs[i, j] + completion <= best_total + _COST_TIE_TOL:
                    chosen.append((i, j))
                    fixed_cost += float(costs[i, j])
                    used_cols.add(j)
                    prev_row = i
                    accepted = True
                    break
            if accepted:
                break
        if not accepted:  # pragma: no cover - optimality guarantees acceptance
            raise RuntimeError("failed to extend assignment to the optimal total")
    return chosen


def _completion_cost(
    costs: np.ndarray, last_row: int, used_cols: set[int], remaining: int
) -> float:
    """Cheapest cost of `remaining` disjoint pairs over rows > last_row."""
    if remaining == 0:
        return 0.0
    rows = np.arange(last_row + 1, costs.shape[0])
    cols = np.array([j for j in range(costs.shape[1]) if j not in used_cols])
    sub = costs[np.ix_(rows, cols)]
    if min(sub.shape) < remaining:
        return float("inf")
    row_ind, col_ind = linear_sum_assignment(sub)
    return float(sub[row_ind, col_ind].sum())


