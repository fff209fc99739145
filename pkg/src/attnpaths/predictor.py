"""Bayesian predictor statistics from a kernel and its order parameter.

Given the training kernel K, cross kernel rows k and test diagonal, the
posterior over the scalar output has

    mean      = k (K + T I)^-1 Y
    variance  = K_test - k (K + T I)^-1 k^T   (diagonal entries)

Classification accuracy is the fraction of test examples whose predicted sign
matches the label, with sign(0) counted as +1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .kernel import PathFeatureMatrix, kernel_blocks
from .solver import SolverConfig, SolverFailure, solve_saddle

# Grid from the temperature selection protocol: {a 10^-b} for a in
# {1, 2.5, 5, 7.5}, b in {1, 2}, plus 1.0 and 1.5.
DEFAULT_TEMPERATURE_GRID = (0.01, 0.025, 0.05, 0.075, 0.1, 0.25, 0.5, 0.75, 1.0, 1.5)


def _train_solve(k_train: np.ndarray, temperature: float):
    p = k_train.shape[0]
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    return np.linalg.cholesky(k_train + temperature * np.eye(p))


def predictor_mean(k_train: np.ndarray, k_cross: np.ndarray, y: np.ndarray,
                   temperature: float) -> np.ndarray:
    """Posterior mean outputs; k_cross has shape (n_eval, P)."""
    y = np.asarray(y, dtype=float)
    c = _train_solve(np.asarray(k_train, dtype=float), temperature)
    return np.asarray(k_cross, dtype=float) @ sla.cho_solve((c, True), y, check_finite=False)


def predictor_variance(k_train: np.ndarray, k_cross: np.ndarray, k_eval_diag: np.ndarray,
                       temperature: float) -> np.ndarray:
    """Posterior variances K_test - k (K + T I)^-1 k^T, elementwise over eval points."""
    k_cross = np.asarray(k_cross, dtype=float)
    c = _train_solve(np.asarray(k_train, dtype=float), temperature)
    solved = sla.cho_solve((c, True), k_cross.T, check_finite=False)
    return np.asarray(k_eval_diag, dtype=float) - np.einsum("pm,pm->m", k_cross.T, solved)


def classification_accuracy(means: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of sign agreements; sign(0) counts as +1."""
    means = np.asarray(means, dtype=float)
    labels = np.asarray(labels)
    if means.size == 0:
        raise ValueError("cannot score an empty evaluation set")
    if means.shape != labels.shape:
        raise ValueError(f"shape mismatch: {means.shape} vs {labels.shape}")
    if not np.all(np.isin(labels, (-1, 1))):
        raise ValueError("labels must be +1 or -1")
    pred = np.where(means >= 0.0, 1, -1)
    return float(np.mean(pred == labels))


@dataclass
class PredictorReport:
    means: np.ndarray
    variances: np.ndarray
    accuracy: float
    temperature: float
    n_train: int
    eval_labels: np.ndarray
    metadata: dict = field(default_factory=dict)


def evaluate_predictor(u1: np.ndarray, features: PathFeatureMatrix, y_train: np.ndarray,
                       eval_idx: np.ndarray, eval_labels: np.ndarray, temperature: float,
                       metadata: dict | None = None) -> PredictorReport:
    """Assemble kernel blocks under u1 and score the evaluation examples."""
    y_train = np.asarray(y_train, dtype=float)
    eval_labels = np.asarray(eval_labels)
    k_train, k_cross, k_diag = kernel_blocks(u1, features, eval_idx)
    if y_train.shape != (k_train.shape[0],):
        raise ValueError(f"y_train must have shape ({k_train.shape[0]},), got {y_train.shape}")
    means = predictor_mean(k_train, k_cross, y_train, temperature)
    variances = predictor_variance(k_train, k_cross, k_diag, temperature)
    acc = classification_accuracy(means, eval_labels)
    return PredictorReport(
        means=means, variances=variances, accuracy=acc, temperature=temperature,
        n_train=k_train.shape[0], eval_labels=eval_labels.copy(),
        metadata=dict(metadata or {}),
    )


@dataclass
class SweepResult:
    best_temperature: float
    best_accuracy: float
    rows: list


def temperature_sweep(features: PathFeatureMatrix, y_train: np.ndarray,
                      val_idx: np.ndarray, val_labels: np.ndarray,
                      config: SolverConfig,
                      grid: tuple = DEFAULT_TEMPERATURE_GRID) -> SweepResult:
    """Solve the saddle at every temperature on the grid and score validation accuracy.

    Ties break toward the larger temperature.  Grid points where the solver
    fails are recorded with the error and skipped.  At alpha = 0 the GP closed
    form is used and no solver runs.
    """
    from dataclasses import replace as _replace

    from .solver import OrderParameterSet

    if len(grid) == 0:
        raise ValueError("temperature grid is empty")
    rows = []
    best_t = None
    best_acc = -1.0
    for t in grid:
        try:
            if config.alpha == 0.0:
                params = OrderParameterSet.gp_solution(features.n_heads, features.depth, config.sigma2)
                converged = True
            else:
                params, trace = solve_saddle(features, y_train, _replace(config, temperature=float(t)))
                converged = trace.converged
            report = evaluate_predictor(params.u1, features, y_train, val_idx, val_labels, float(t))
        except (SolverFailure, np.linalg.LinAlgError) as err:
            rows.append({"temperature": float(t), "accuracy": None, "converged": False,
                         "error": str(err)})
            continue
        rows.append({"temperature": float(t), "accuracy": report.accuracy,
                     "converged": converged, "error": ""})
        if report.accuracy > best_acc or (report.accuracy == best_acc and t > best_t):
            best_acc = report.accuracy
            best_t = float(t)
    if best_t is None:
        raise SolverFailure("the solver failed at every temperature on the grid")
    return SweepResult(best_temperature=best_t, best_accuracy=best_acc, rows=rows)
