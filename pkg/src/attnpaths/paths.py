"""Bookkeeping for attention paths.

A path through an L-layer, H-head network picks one head per layer,
pi = (h_1, ..., h_L) with 0 <= h_l < H.  All path-indexed arrays use the
canonical flat order in which h_1 is the most significant digit:

    flat(pi) = h_1 H^(L-1) + h_2 H^(L-2) + ... + h_L

Under this order the extension of a depth-(L-l) order parameter to depth
(L-l+1) is a Kronecker product with the identity, because the leading digit
h_l only relabels blocks.  Head indices are zero-based everywhere in code;
renderings for humans (CSV labels, reports) are one-based.
"""

from __future__ import annotations

import numpy as np

# Guard against accidental H**L blowups; arrays of this size would not fit anyway.
MAX_PATHS = 2**31


def _check_sizes(n_heads: int, depth: int) -> None:
    if n_heads < 1 or depth < 1:
        raise ValueError(f"need n_heads >= 1 and depth >= 1, got {n_heads}, {depth}")
    if n_heads**depth > MAX_PATHS:
        raise ValueError(f"path count {n_heads}**{depth} exceeds limit {MAX_PATHS}")


def enumerate_paths(n_heads: int, depth: int) -> list[tuple[int, ...]]:
    """All H^L paths as tuples (h_1, ..., h_L), in canonical flat order."""
    _check_sizes(n_heads, depth)
    paths = [()]
    for _ in range(depth):
        paths = [p + (h,) for p in paths for h in range(n_heads)]
    return paths


def flat_index(path: tuple[int, ...], n_heads: int) -> int:
    """Canonical flat index of a path; h_1 is the most significant digit."""
    idx = 0
    for h in path:
        if not 0 <= h < n_heads:
            raise ValueError(f"head index {h} out of range for H={n_heads}")
        idx = idx * n_heads + h
    return idx


def path_from_flat(index: int, n_heads: int, depth: int) -> tuple[int, ...]:
    """Inverse of flat_index."""
    _check_sizes(n_heads, depth)
    if not 0 <= index < n_heads**depth:
        raise ValueError(f"flat index {index} out of range for H={n_heads}, L={depth}")
    digits = []
    for _ in range(depth):
        digits.append(index % n_heads)
        index //= n_heads
    return tuple(reversed(digits))


def extend_order_parameter(u_next: np.ndarray, n_heads: int) -> np.ndarray:
    """Lift an order parameter over partial paths pi_{l+1} to partial paths pi_l.

    U_ext[(h, j), (h', j')] = delta_{h h'} U_next[j, j'], which under the
    canonical order is exactly kron(I_H, U_next).
    """
    u_next = np.asarray(u_next, dtype=float)
    if u_next.ndim != 2 or u_next.shape[0] != u_next.shape[1]:
        raise ValueError(f"order parameter must be square, got shape {u_next.shape}")
    if n_heads < 1:
        raise ValueError(f"need n_heads >= 1, got {n_heads}")
    return np.kron(np.eye(n_heads), u_next)


def paths_through_head(layer: int, head: int, paths: list[tuple[int, ...]]) -> list[tuple[int, ...]]:
    """Paths whose layer-l head equals `head`.  `layer` is one-based (1 <= l <= L)."""
    if not paths:
        return []
    depth = len(paths[0])
    if not 1 <= layer <= depth:
        raise ValueError(f"layer {layer} out of range for depth {depth}")
    if head < 0:
        raise ValueError(f"head index must be nonnegative, got {head}")
    return [p for p in paths if p[layer - 1] == head]


def path_label(path: tuple[int, ...]) -> str:
    """Human-facing label with one-based head indices, e.g. (1,2)."""
    return "(" + ",".join(str(h + 1) for h in path) + ")"
