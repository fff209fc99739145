"""Path features and path-pair kernels.

The feature of example mu on path pi is phi = xi_pi / sqrt(width).  Stacking
features as Phi with shape (n_paths, width, n_examples), the kernel read by
the Bayesian predictor under a path-pair order parameter U is

    K = (1/H^L) sum_{pi, pi'} U[pi, pi'] Phi[pi].T @ Phi[pi']

assembled by einsum from the stacked features.  The H^(2L) individual pair
kernels are never materialized; memory stays O(H^L * width * P).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import AttentionSpec, Readout, attention_stack_batch
from .paths import enumerate_paths, path_from_flat


@dataclass
class PathFeatureMatrix:
    """Stacked path features for a set of examples.

    values has shape (n_paths, width, n_examples); the first n_train example
    columns are the training block.  path_flats records which paths (as flat
    indices into the full H^L enumeration) the rows correspond to, so pruned
    feature matrices keep their identity.  norm_paths is the kernel
    normalization denominator; it stays H^L under pruning unless the caller
    explicitly renormalizes.
    """

    values: np.ndarray
    n_train: int
    n_heads: int
    depth: int
    path_flats: np.ndarray = field(default=None)
    norm_paths: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3:
            raise ValueError(f"feature values must be (n_paths, width, P), got {self.values.shape}")
        if not 0 <= self.n_train <= self.values.shape[2]:
            raise ValueError(f"n_train={self.n_train} out of range for {self.values.shape[2]} examples")
        if self.path_flats is None:
            self.path_flats = np.arange(self.n_heads**self.depth, dtype=np.int64)
        self.path_flats = np.asarray(self.path_flats, dtype=np.int64)
        if len(self.path_flats) != self.values.shape[0]:
            raise ValueError("path_flats length must match the number of feature rows")
        if self.norm_paths == 0:
            self.norm_paths = self.n_heads**self.depth

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def n_examples(self) -> int:
        return self.values.shape[2]

    def paths(self) -> list[tuple[int, ...]]:
        return [path_from_flat(int(i), self.n_heads, self.depth) for i in self.path_flats]

    def train(self) -> "PathFeatureMatrix":
        """The training block as its own feature matrix (a view)."""
        return replace(self, values=self.values[:, :, : self.n_train], n_train=self.n_train)

    def select_examples(self, idx: np.ndarray, n_train: int = 0) -> "PathFeatureMatrix":
        return replace(self, values=self.values[:, :, idx], n_train=n_train)

    def restrict_paths(self, keep_flats: np.ndarray, renormalize: bool = False) -> "PathFeatureMatrix":
        """Keep only the given paths.  The kernel denominator is preserved unless
        renormalize is set, in which case it becomes the surviving path count."""
        keep_flats = np.asarray(keep_flats, dtype=np.int64)
        pos = {int(f): i for i, f in enumerate(self.path_flats)}
        missing = [int(f) for f in keep_flats if int(f) not in pos]
        if missing:
            raise ValueError(f"paths {missing} not present in this feature matrix")
        rows = np.array([pos[int(f)] for f in keep_flats], dtype=np.int64)
        norm = len(keep_flats) if renormalize else self.norm_paths
        return replace(self, values=self.values[rows], path_flats=keep_flats, norm_paths=norm)


@dataclass
class KernelMatrix:
    """A kernel over examples, with the order parameter that produced it."""

    values: np.ndarray
    provenance: dict

    @property
    def n(self) -> int:
        return self.values.shape[0]


def compute_features(tokens: np.ndarray, specs: list[list[AttentionSpec]], readout: Readout,
                     n_train: int, chunk: int = 256) -> PathFeatureMatrix:
    """Path features for every example; tokens has shape (P, width, T).

    Per-path attention chains share prefix products: layer by layer, each
    partial product spawns H children, which lands the rows in canonical flat
    order.  Examples are processed in chunks to bound the intermediate
    (H^l, chunk, width, T) storage.  Features are independent of all value
    weights and of N by construction.
    """
    tokens = np.asarray(tokens, dtype=float)
    if tokens.ndim != 3:
        raise ValueError(f"tokens must be (P, width, T), got {tokens.shape}")
    n_ex, width, n_tokens = tokens.shape
    depth = len(specs)
    n_heads = len(specs[0])
    n_paths = n_heads**depth
    col_w = readout.column_weights(n_tokens)

    values = np.empty((n_paths, width, n_ex))
    for start in range(0, n_ex, chunk):
        block = tokens[start : start + chunk]
        omegas = attention_stack_batch(block, specs)
        mats = [block]
        for layer in range(depth - 1):
            mats = [np.matmul(m, omegas[:, layer, h]) for m in mats for h in range(n_heads)]
        for i, m in enumerate(mats):
            for h in range(n_heads):
                final = np.matmul(m, omegas[:, depth - 1, h])
                # (chunk, width, T) @ (T,) readout -> (chunk, width)
                values[i * n_heads + h, :, start : start + block.shape[0]] = (final @ col_w).T
    values /= np.sqrt(width)
    return PathFeatureMatrix(values=values, n_train=n_train, n_heads=n_heads, depth=depth)


def path_pair_kernel(features: PathFeatureMatrix, row_a: int, row_b: int) -> np.ndarray:
    """C_{pi pi'}[mu, nu] = phi_pi^mu . phi_pi'^nu for one pair of feature rows."""
    return features.values[row_a].T @ features.values[row_b]


def total_kernel(u1: np.ndarray, features: PathFeatureMatrix) -> KernelMatrix:
    """K = (1/norm_paths) sum_{ab} U[a, b] Phi[a].T @ Phi[b] over all examples."""
    u1 = np.asarray(u1, dtype=float)
    if u1.shape != (features.n_paths, features.n_paths):
        raise ValueError(f"order parameter shape {u1.shape} does not match {features.n_paths} paths")
    lifted = np.tensordot(u1, features.values, axes=(1, 0))
    k = np.einsum("aim,ain->mn", features.values, lifted, optimize=True) / features.norm_paths
    k = 0.5 * (k + k.T)
    return KernelMatrix(values=k, provenance={"u1": u1.copy(), "norm_paths": features.norm_paths})


def kernel_blocks(u1: np.ndarray, features: PathFeatureMatrix,
                  eval_idx: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(train x train, eval x train, eval diagonal) blocks of the total kernel."""
    eval_idx = np.asarray(eval_idx, dtype=np.int64)
    k_all = total_kernel(u1, features).values
    p = features.n_train
    if p == 0:
        raise ValueError("feature matrix has an empty training block")
    return k_all[:p, :p], k_all[np.ix_(eval_idx, np.arange(p))], k_all[eval_idx, eval_idx]


def kernel_task_alignment(k: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and |cosine| overlaps of eigenvectors with the labels.

    The overlaps against the full eigenbasis satisfy sum of squares = 1.
    """
    k = np.asarray(k, dtype=float)
    y = np.asarray(y, dtype=float)
    if k.shape != (len(y), len(y)):
        raise ValueError(f"kernel shape {k.shape} does not match {len(y)} labels")
    evals, evecs = np.linalg.eigh(k)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    y_norm = np.linalg.norm(y)
    if y_norm == 0:
        raise ValueError("label vector is zero")
    overlaps = np.abs(evecs.T @ y) / y_norm
    return evals, overlaps
