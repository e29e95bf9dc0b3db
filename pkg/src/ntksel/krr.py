"""Kernel ridge regression on empirical kernel matrices.

Closed form: with an n x n kernel K, regularizer lambda, and one-hot label
matrix Y, the coefficients solve (K + n lambda I) alpha = Y. Prediction
scores for t test points are K_test @ alpha (t x n times n x c) and the
label is the argmax class, ties to the earlier class.

The solve is factorization-based (Cholesky with a symmetric-solver
fallback) plus iterative refinement, never an explicit inverse. Multi-class
labels are handled by one-hot columns; the regression itself is per-column.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np
import scipy.linalg

from .domain import SampleId
from .errors import AsymmetricKernel, DimMismatch, SingularSystem

__all__ = [
    "KrrModel",
    "SweepResult",
    "DEFAULT_LAMBDA_GRID",
    "krr_fit",
    "krr_predict",
    "lambda_sweep",
]

DEFAULT_LAMBDA_GRID = (1e-5, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 1e-1)

_RESIDUAL_TOL = 1e-8


@dataclass
class KrrModel:
    """Solved coefficients: alpha is n x c, one column per class."""

    alpha: np.ndarray
    lam: float
    classes: list
    train_ids: list[SampleId] | None = None
    residual: float = 0.0


def _one_hot(labels: Sequence[Hashable], classes: list) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    y = np.zeros((len(labels), len(classes)))
    for row, lab in enumerate(labels):
        y[row, index[lab]] = 1.0
    return y


def krr_fit(
    K: np.ndarray,
    labels: Sequence[Hashable],
    lam: float,
    train_ids: list[SampleId] | None = None,
) -> KrrModel:
    """Solve (K + n*lam*I) alpha = one_hot(labels).

    The kernel must be symmetric up to round-off. With lam = 0 the kernel
    itself must be numerically invertible, otherwise SingularSystem.
    """
    K = np.asarray(K, dtype=np.float64)
    n = K.shape[0]
    if K.ndim != 2 or K.shape[1] != n:
        raise DimMismatch(f"kernel must be square, got {K.shape}")
    if len(labels) != n:
        raise DimMismatch(f"{len(labels)} labels for an order-{n} kernel")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    scale = max(1.0, float(np.max(np.abs(K)))) if n else 1.0
    if float(np.max(np.abs(K - K.T), initial=0.0)) > 1e-8 * scale:
        raise AsymmetricKernel("kernel matrix is not symmetric")
    K = (K + K.T) / 2.0

    classes = sorted(set(labels))
    y = _one_hot(labels, classes)
    a_mat = K + (n * lam) * np.eye(n)

    def _solve(rhs: np.ndarray) -> np.ndarray:
        try:
            cho = scipy.linalg.cho_factor(a_mat, lower=True, check_finite=False)
            return scipy.linalg.cho_solve(cho, rhs, check_finite=False)
        except np.linalg.LinAlgError:
            pass
        except scipy.linalg.LinAlgError:
            pass
        try:
            return scipy.linalg.solve(a_mat, rhs, assume_a="sym", check_finite=False)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as e:
            raise SingularSystem(f"shifted kernel system is singular: {e}") from e

    alpha = _solve(y)
    # one round of iterative refinement keeps the residual near round-off
    # even for ill-conditioned shifts
    for _ in range(2):
        resid = y - a_mat @ alpha
        if np.linalg.norm(resid) <= 1e-14 * np.linalg.norm(y):
            break
        alpha = alpha + _solve(resid)

    rel_resid = float(
        np.linalg.norm(a_mat @ alpha - y) / max(np.linalg.norm(y), 1e-300)
    )
    if not np.isfinite(alpha).all() or rel_resid > _RESIDUAL_TOL:
        raise SingularSystem(
            f"solve residual {rel_resid:.3e} exceeds {_RESIDUAL_TOL} "
            f"(lambda={lam}, n={n})"
        )
    return KrrModel(alpha=alpha, lam=float(lam), classes=classes,
                    train_ids=train_ids, residual=rel_resid)


def krr_predict(model: KrrModel, K_test: np.ndarray) -> list:
    """Predicted labels for test rows of kernel values against the train set."""
    K_test = np.asarray(K_test, dtype=np.float64)
    if K_test.ndim != 2 or K_test.shape[1] != model.alpha.shape[0]:
        raise DimMismatch(
            f"K_test has {K_test.shape} columns, expected {model.alpha.shape[0]}"
        )
    scores = K_test @ model.alpha
    idx = np.argmax(scores, axis=1)  # first max wins: class-order tie-break
    return [model.classes[i] for i in idx]


@dataclass
class SweepResult:
    lam: float
    accuracy: float
    table: list[tuple[float, float]]
    train_table: list[tuple[float, float]] = None

    def to_json(self) -> str:
        rows = []
        for i, (lam, val_acc) in enumerate(self.table):
            row = {"lambda": lam, "val_accuracy": val_acc}
            if self.train_table:
                row["train_accuracy"] = self.train_table[i][1]
            rows.append(row)
        return json.dumps(
            {"best_lambda": self.lam, "best_accuracy": self.accuracy, "grid": rows},
            sort_keys=True,
            indent=2,
        ) + "\n"


def lambda_sweep(
    K_train: np.ndarray,
    labels: Sequence[Hashable],
    K_val: np.ndarray,
    val_labels: Sequence[Hashable],
    grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
) -> SweepResult:
    """Fit once per grid value, evaluate on validation, keep the best.

    Accuracy ties break toward the smaller lambda; the report also carries
    training accuracy per grid point.
    """
    if len(grid) == 0:
        raise ValueError("lambda grid is empty")
    table, train_table = [], []
    for lam in grid:
        model = krr_fit(K_train, labels, lam)
        preds = krr_predict(model, K_val)
        acc = float(np.mean([p == t for p, t in zip(preds, val_labels)]))
        table.append((float(lam), acc))
        train_preds = krr_predict(model, K_train)
        train_table.append(
            (float(lam), float(np.mean([p == t for p, t in zip(train_preds, labels)])))
        )
    best_lam, best_acc = min(table, key=lambda la: (-la[1], la[0]))
    return SweepResult(best_lam, best_acc, table, train_table)
