"""Order-parameter diagnostics: head scores, pruning, GP-vs-renormalized tables.

The layer-l head score sums |U^(1)| over ordered path pairs that both pass
through the head,

    s_{l,h} = sum_{pi, pi' in Pi_{l,h}} |U1[pi, pi']|

which is the mass the posterior kernel assigns to that head's paths.  Pruning
removes heads, restricts the order parameter and features to the surviving
paths, and re-evaluates the predictor without retraining; the kernel keeps the
original 1/H^L normalization so pruned predictions estimate the full model
with dropped terms, unless the caller renormalizes to build a genuinely
smaller model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import PathFeatureMatrix, kernel_blocks, kernel_task_alignment, total_kernel
from .paths import enumerate_paths, flat_index, paths_through_head
from .predictor import PredictorReport, evaluate_predictor
from .solver import OrderParameterSet, SolverConfig, solve_saddle


@dataclass
class HeadScoreTable:
    """Scores per (layer, head); layers one-based, heads zero-based internally."""

    layers: np.ndarray
    heads: np.ndarray
    scores: np.ndarray
    normalized: np.ndarray

    def score(self, layer: int, head: int) -> float:
        mask = (self.layers == layer) & (self.heads == head)
        if not mask.any():
            raise KeyError(f"no score for layer {layer}, head {head}")
        return float(self.scores[mask][0])


def head_scores(u1: np.ndarray, n_heads: int, depth: int) -> HeadScoreTable:
    """Per-head absolute order-parameter mass, normalized per layer."""
    u1 = np.asarray(u1, dtype=float)
    n_paths = n_heads**depth
    if u1.shape != (n_paths, n_paths):
        raise ValueError(f"u1 shape {u1.shape} does not match H^L = {n_paths}")
    paths = enumerate_paths(n_heads, depth)
    layers, heads, scores = [], [], []
    for layer in range(1, depth + 1):
        for head in range(n_heads):
            flats = [flat_index(p, n_heads) for p in paths_through_head(layer, head, paths)]
            block = np.abs(u1[np.ix_(flats, flats)])
            layers.append(layer)
            heads.append(head)
            scores.append(float(block.sum()))
    layers = np.array(layers)
    heads = np.array(heads)
    scores = np.array(scores)
    normalized = np.zeros_like(scores)
    for layer in range(1, depth + 1):
        mask = layers == layer
        tot = scores[mask].sum()
        normalized[mask] = scores[mask] / tot if tot > 0 else 0.0
    return HeadScoreTable(layers=layers, heads=heads, scores=scores, normalized=normalized)


def surviving_paths(n_heads: int, depth: int, heads_to_remove: list) -> np.ndarray:
    """Flat indices of paths avoiding every removed (layer, head); layer one-based."""
    removed = set()
    for layer, head in heads_to_remove:
        if not 1 <= layer <= depth or not 0 <= head < n_heads:
            raise ValueError(f"no head (layer={layer}, head={head}) in an H={n_heads}, L={depth} network")
        removed.add((int(layer), int(head)))
    keep = []
    for p in enumerate_paths(n_heads, depth):
        if all((layer + 1, h) not in removed for layer, h in enumerate(p)):
            keep.append(flat_index(p, n_heads))
    if not keep:
        raise ValueError("pruning removed every path; at least one head must survive per layer")
    return np.array(keep, dtype=np.int64)


def prune_heads(u1: np.ndarray, features: PathFeatureMatrix, y_train: np.ndarray,
                heads_to_remove: list, eval_idx: np.ndarray, eval_labels: np.ndarray,
                temperature: float, renormalize: bool = False,
                metadata: dict | None = None) -> PredictorReport:
    """Re-evaluate the predictor with the given heads removed, without retraining."""
    keep = surviving_paths(features.n_heads, features.depth, heads_to_remove)
    sub_features = features.restrict_paths(keep, renormalize=renormalize)
    rows = [int(np.where(features.path_flats == f)[0][0]) for f in keep]
    sub_u1 = np.asarray(u1, dtype=float)[np.ix_(rows, rows)]
    meta = dict(metadata or {})
    meta.update({
        "removed_heads": sorted((int(l), int(h)) for l, h in heads_to_remove),
        "surviving_paths": [int(f) for f in keep],
        "renormalized": bool(renormalize),
    })
    return evaluate_predictor(sub_u1, sub_features, y_train, eval_idx, eval_labels,
                              temperature, metadata=meta)


def gp_vs_renormalized(features: PathFeatureMatrix, y_train: np.ndarray,
                       eval_idx: np.ndarray, eval_labels: np.ndarray,
                       config: SolverConfig, alphas: list) -> list:
    """Accuracy and kernel-task alignment per alpha; alpha = 0 is closed form.

    Each row records whether the optimizer actually ran, so the GP row can be
    audited as solver-free.
    """
    from dataclasses import replace as _replace

    if 0.0 not in [float(a) for a in alphas]:
        raise ValueError("the alpha grid must include 0 (the GP limit)")
    rows = []
    y_arr = np.asarray(y_train, dtype=float)
    for a in alphas:
        a = float(a)
        if a == 0.0:
            params = OrderParameterSet.gp_solution(features.n_heads, features.depth, config.sigma2)
            solver_used = False
            trace = None
        else:
            params, trace = solve_saddle(features, y_arr, _replace(config, alpha=a))
            solver_used = True
        report = evaluate_predictor(params.u1, features, y_arr, eval_idx, eval_labels,
                                    config.temperature)
        k_train = total_kernel(params.u1, features.train()).values
        evals, overlaps = kernel_task_alignment(k_train, y_arr)
        rows.append({
            "alpha": a,
            "u1": params.u1,
            "accuracy": report.accuracy,
            "eigenvalues": evals,
            "overlaps": overlaps,
            "solver_used": solver_used,
            "converged": None if trace is None else trace.converged,
        })
    return rows
