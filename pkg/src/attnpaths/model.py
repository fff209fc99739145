"""Deep multi-head linear-value self-attention networks.

Tokens live in columns: a sequence is an array x0 of shape (width, T).
Attention logits are always computed from the bare input sequence,

    logit[s, t] = scale * x0[:, s] @ M @ x0[:, t]

with the softmax normalized over the attended index s, so every column of an
attention matrix sums to one.  Values are linear: layer l maps

    x_{l+1}[:, t] = (NH)^(-1/2) sum_h V_lh @ x_l @ Omega_lh[:, t]

from the width-N hidden sequence, after the input projection
x_1 = V_0 @ x0 / sqrt(width).  The scalar output reads one token (or the
token average) through the readout vector a:  f = a @ x_{L+1}[:, t*] / sqrt(N).

The same output decomposes over attention paths pi = (h_1, ..., h_L):

    f = (H^L N width)^(-1/2) sum_pi  Veff_pi @ V_0 @ xi_pi

with effective weights Veff_pi = N^(-L/2) a @ V_{L,h_L} @ ... @ V_{1,h_1} and
attentioned inputs xi_pi = x0 @ Omega_{1,h_1} @ ... @ Omega_{L,h_L} read out
at t*.  Both routes are implemented; they agree to floating-point accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .paths import enumerate_paths


@dataclass(frozen=True)
class AttentionSpec:
    """Attention logits for one head, in exactly one of two forms.

    qk form:     logit scale 1/(width * sqrt(G)) with M = K^T Q, where Q and K
                 are (G, width) and width is the dimension of the tokens the
                 logits are computed from.
    direct form: M = W (width, width) with explicit scale beta.
    """

    q: np.ndarray | None = None
    k: np.ndarray | None = None
    w: np.ndarray | None = None
    beta: float | None = None

    def __post_init__(self):
        qk = self.q is not None or self.k is not None
        direct = self.w is not None or self.beta is not None
        if qk and direct:
            raise ValueError("attention spec must use exactly one form, got both")
        if qk:
            if self.q is None or self.k is None:
                raise ValueError("qk form needs both q and k")
            if self.q.shape != self.k.shape or self.q.ndim != 2:
                raise ValueError(f"q and k must share shape (G, width), got {self.q.shape} and {self.k.shape}")
        elif direct:
            if self.w is None or self.beta is None:
                raise ValueError("direct form needs both w and beta")
            if self.w.ndim != 2 or self.w.shape[0] != self.w.shape[1]:
                raise ValueError(f"w must be square, got shape {self.w.shape}")
            if not np.isfinite(self.beta):
                raise ValueError(f"beta must be finite, got {self.beta}")
        else:
            raise ValueError("attention spec must populate the qk form or the direct form")

    @classmethod
    def from_qk(cls, q: np.ndarray, k: np.ndarray) -> "AttentionSpec":
        return cls(q=np.asarray(q, dtype=float), k=np.asarray(k, dtype=float))

    @classmethod
    def direct(cls, w: np.ndarray, beta: float) -> "AttentionSpec":
        return cls(w=np.asarray(w, dtype=float), beta=float(beta))

    @property
    def width(self) -> int:
        return self.w.shape[0] if self.w is not None else self.q.shape[1]

    def logit_matrix(self) -> np.ndarray:
        """The scaled matrix M such that logit[s, t] = x_s @ M @ x_t."""
        if self.w is not None:
            return self.beta * self.w
        g = self.q.shape[0]
        return (self.k.T @ self.q) / (self.width * np.sqrt(g))


@dataclass(frozen=True)
class Readout:
    """Which token the scalar output reads: a single position or the average."""

    kind: str
    t_star: int = 0

    def __post_init__(self):
        if self.kind not in ("token", "average"):
            raise ValueError(f"readout kind must be 'token' or 'average', got {self.kind!r}")
        if self.kind == "token" and self.t_star < 0:
            raise ValueError(f"t_star must be nonnegative, got {self.t_star}")

    @classmethod
    def token(cls, t_star: int) -> "Readout":
        return cls(kind="token", t_star=t_star)

    @classmethod
    def average(cls) -> "Readout":
        return cls(kind="average")

    def column_weights(self, n_tokens: int) -> np.ndarray:
        """Weights w_t with sum 1 such that the readout column is x @ w."""
        if self.kind == "token":
            if self.t_star >= n_tokens:
                raise ValueError(f"t_star={self.t_star} out of range for {n_tokens} tokens")
            w = np.zeros(n_tokens)
            w[self.t_star] = 1.0
            return w
        return np.full(n_tokens, 1.0 / n_tokens)


@dataclass
class NetworkWeights:
    """All trainable weights: input projection, per-(layer, head) values, readout."""

    v0: np.ndarray        # (N, width)
    values: np.ndarray    # (L, H, N, N)
    readout: np.ndarray   # (N,)

    def __post_init__(self):
        self.v0 = np.asarray(self.v0, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.readout = np.asarray(self.readout, dtype=float)
        n = self.v0.shape[0]
        if self.values.ndim != 4 or self.values.shape[2:] != (n, n):
            raise ValueError(f"values must have shape (L, H, {n}, {n}), got {self.values.shape}")
        if self.readout.shape != (n,):
            raise ValueError(f"readout must have shape ({n},), got {self.readout.shape}")

    @property
    def n_hidden(self) -> int:
        return self.v0.shape[0]

    @property
    def width(self) -> int:
        return self.v0.shape[1]

    @property
    def depth(self) -> int:
        return self.values.shape[0]

    @property
    def n_heads(self) -> int:
        return self.values.shape[1]

    @classmethod
    def sample_prior(cls, n_hidden: int, width: int, depth: int, n_heads: int,
                     sigma2: float = 1.0, rng: np.random.Generator | int | None = None) -> "NetworkWeights":
        """Draw all weight entries iid N(0, sigma2)."""
        rng = np.random.default_rng(rng)
        s = np.sqrt(sigma2)
        return cls(
            v0=s * rng.standard_normal((n_hidden, width)),
            values=s * rng.standard_normal((depth, n_heads, n_hidden, n_hidden)),
            readout=s * rng.standard_normal(n_hidden),
        )

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.v0.ravel(), self.values.ravel(), self.readout.ravel()])

    @classmethod
    def unflatten(cls, vec: np.ndarray, n_hidden: int, width: int, depth: int, n_heads: int) -> "NetworkWeights":
        n0 = n_hidden * width
        nv = depth * n_heads * n_hidden * n_hidden
        if vec.shape != (n0 + nv + n_hidden,):
            raise ValueError(f"flat vector has wrong length {vec.shape}")
        return cls(
            v0=vec[:n0].reshape(n_hidden, width),
            values=vec[n0:n0 + nv].reshape(depth, n_heads, n_hidden, n_hidden),
            readout=vec[n0 + nv:],
        )


def _softmax_columns(logits: np.ndarray) -> np.ndarray:
    """Softmax over the first (attended) index; columns sum to one."""
    z = logits - logits.max(axis=-2, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-2, keepdims=True)


def attention_matrix(x0: np.ndarray, spec: AttentionSpec) -> np.ndarray:
    """Omega[s, t] for one head on one sequence x0 of shape (width, T)."""
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim != 2:
        raise ValueError(f"sequence must be (width, T), got shape {x0.shape}")
    if x0.shape[0] != spec.width:
        raise ValueError(f"token width {x0.shape[0]} does not match spec width {spec.width}")
    logits = x0.T @ spec.logit_matrix() @ x0
    return _softmax_columns(logits)


def attention_stack(x0: np.ndarray, specs: list[list[AttentionSpec]]) -> np.ndarray:
    """All attention matrices for one sequence, shape (L, H, T, T)."""
    n_tokens = x0.shape[1]
    depth = len(specs)
    n_heads = len(specs[0])
    omegas = np.empty((depth, n_heads, n_tokens, n_tokens))
    for layer, row in enumerate(specs):
        if len(row) != n_heads:
            raise ValueError("every layer must have the same number of heads")
        for head, spec in enumerate(row):
            omegas[layer, head] = attention_matrix(x0, spec)
    return omegas


def attention_stack_batch(tokens: np.ndarray, specs: list[list[AttentionSpec]]) -> np.ndarray:
    """Attention matrices for a batch, tokens (P, width, T) -> (P, L, H, T, T).

    Logits are batched as x^T M x per example; heads are independent.
    """
    tokens = np.asarray(tokens, dtype=float)
    n_ex, _, n_tokens = tokens.shape
    depth = len(specs)
    n_heads = len(specs[0])
    omegas = np.empty((n_ex, depth, n_heads, n_tokens, n_tokens))
    for layer, row in enumerate(specs):
        for head, spec in enumerate(row):
            m = spec.logit_matrix()
            logits = np.einsum("pws,wv,pvt->pst", tokens, m, tokens, optimize=True)
            omegas[:, layer, head] = _softmax_columns(logits)
    return omegas


def attentioned_input(x0: np.ndarray, omegas: np.ndarray, path: tuple[int, ...],
                      readout: Readout) -> np.ndarray:
    """xi_pi: the input sequence propagated through one path's attention chain.

    Equals x0 @ Omega_{1,h1} @ ... @ Omega_{L,hL} read out at the readout
    column; shape (width,).
    """
    mat = np.asarray(x0, dtype=float)
    for layer, head in enumerate(path):
        mat = mat @ omegas[layer, head]
    return mat @ readout.column_weights(mat.shape[1])


def effective_weights(weights: NetworkWeights, path: tuple[int, ...]) -> np.ndarray:
    """Veff_pi = N^(-L/2) a @ V_{L,hL} @ ... @ V_{1,h1}; shape (N,)."""
    n = weights.n_hidden
    vec = weights.readout
    for layer in reversed(range(weights.depth)):
        vec = vec @ weights.values[layer, path[layer]]
    return vec / n ** (weights.depth / 2.0)


def network_output(x0: np.ndarray, weights: NetworkWeights, omegas: np.ndarray,
                   readout: Readout) -> float:
    """Scalar output via the path decomposition."""
    n_heads = weights.n_heads
    depth = weights.depth
    width = weights.width
    n = weights.n_hidden
    total = 0.0
    for path in enumerate_paths(n_heads, depth):
        xi = attentioned_input(x0, omegas, path, readout)
        total += effective_weights(weights, path) @ (weights.v0 @ xi)
    return total / np.sqrt(n_heads**depth * n * width)


def forward_layerwise(x0: np.ndarray, weights: NetworkWeights, omegas: np.ndarray,
                      readout: Readout) -> float:
    """Scalar output via the layer-by-layer recursion; same value as network_output."""
    n = weights.n_hidden
    n_heads = weights.n_heads
    x = weights.v0 @ x0 / np.sqrt(weights.width)
    for layer in range(weights.depth):
        nxt = np.zeros_like(x)
        for head in range(n_heads):
            nxt += weights.values[layer, head] @ (x @ omegas[layer, head])
        x = nxt / np.sqrt(n * n_heads)
    z = x @ readout.column_weights(x.shape[1])
    return float(weights.readout @ z / np.sqrt(n))
