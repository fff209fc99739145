"""Saddle-point solver for the path-pair order parameters.

The posterior order parameters U^(1), ..., U^(L+1) (sizes H^L down to 1)
minimize the action

    S = Lterm(U^(L+1)) + sum_{l=1..L} Lterm(U^(l) @ Uext^(l+1)^-1) + alpha * E(U^(1))

with Lterm(M) = sigma^-2 tr(M) - ln det M, Uext the Kronecker lift of the next
level's order parameter, alpha = P/N, and the energy

    E(U) = (1/P) ln det(K + T I) + (1/P) Y^T (K + T I)^-1 Y

built from the training-block total kernel K.  At alpha = 0 the unique minimum
is the Gaussian-process point U^(l) = sigma^(2(L+2-l)) I.

Minimization runs Adam on Cholesky factors U = F F^T with a softplus
reparameterized diagonal, which keeps every iterate strictly positive
definite.  Gradients are analytic; ln det and solves go through Cholesky
factorizations, and no explicit inverse appears outside the small per-level
matrices.  The learning rate is picked by a short warmup sweep over a fixed
grid, keeping the rate with the lowest energy averaged over the warmup steps
(lowest action when alpha = 0, where the energy is decoupled).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .kernel import PathFeatureMatrix, total_kernel

DEFAULT_LEARNING_RATES = (
    1e-4, 1e-3, 5e-3, 8e-3, 1e-2, 5e-2, 8e-2, 1e-1, 5e-1, 8e-1, 1.0, 5.0, 8.0,
)


class SolverFailure(RuntimeError):
    """Raised when no learning rate yields a finite run or the action diverges."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class OrderParameterSet:
    """The solved hierarchy: matrices[i] is U^(i+1) of size H^(L-i), down to 1x1."""

    matrices: list
    n_heads: int
    depth: int

    def __post_init__(self):
        self.matrices = [np.asarray(m, dtype=float) for m in self.matrices]
        if len(self.matrices) != self.depth + 1:
            raise ValueError(f"need {self.depth + 1} levels, got {len(self.matrices)}")
        for i, m in enumerate(self.matrices):
            want = self.n_heads ** (self.depth - i)
            if m.shape != (want, want):
                raise ValueError(f"level {i + 1} must be {want}x{want}, got {m.shape}")

    @property
    def u1(self) -> np.ndarray:
        return self.matrices[0]

    @classmethod
    def gp_solution(cls, n_heads: int, depth: int, sigma2: float = 1.0) -> "OrderParameterSet":
        """The alpha = 0 fixed point U^(l) = sigma^(2(L+2-l)) I."""
        mats = [sigma2 ** (depth + 1 - i) * np.eye(n_heads ** (depth - i)) for i in range(depth + 1)]
        return cls(matrices=mats, n_heads=n_heads, depth=depth)


@dataclass
class SolverConfig:
    alpha: float
    temperature: float
    sigma2: float = 1.0
    max_iter: int = 20000
    tolerance: float = 1e-7
    learning_rates: tuple = DEFAULT_LEARNING_RATES
    warmup_iters: int = 10
    jitter: float = 1e-3
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.sigma2 <= 0:
            raise ValueError(f"sigma2 must be > 0, got {self.sigma2}")
        if self.restarts < 1 or self.max_iter < 1 or self.warmup_iters < 0:
            raise ValueError("restarts >= 1, max_iter >= 1, warmup_iters >= 0 required")
        if not self.learning_rates or any(r <= 0 for r in self.learning_rates):
            raise ValueError("learning_rates must be a nonempty sequence of positive rates")


@dataclass
class SolveTrace:
    actions: np.ndarray
    entropies: np.ndarray
    energies: np.ndarray
    grad_norms: np.ndarray
    learning_rate: float
    converged: bool
    n_iter: int
    restart: int = 0
    sweep: list = field(default_factory=list)


def _chol(m: np.ndarray) -> np.ndarray:
    # raises np.linalg.LinAlgError on non-PD input; that is the domain error
    return np.linalg.cholesky(m)


def _chol_logdet(c: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(c))))


def _chol_inv(c: np.ndarray) -> np.ndarray:
    inv = sla.cho_solve((c, True), np.eye(c.shape[0]), check_finite=False)
    return 0.5 * (inv + inv.T)


def entropy_term(m: np.ndarray, sigma2: float) -> float:
    """Lterm(M) = sigma^-2 tr(M) - ln det M for positive definite M.

    Symmetric arguments go through Cholesky; products of two SPD matrices are
    similar to an SPD matrix but need not be symmetric, so those fall back to
    slogdet with a positivity check.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"entropy term needs a square matrix, got shape {m.shape}")
    if sigma2 <= 0:
        raise ValueError(f"sigma2 must be > 0, got {sigma2}")
    if np.allclose(m, m.T, rtol=1e-10, atol=1e-12):
        logdet = _chol_logdet(_chol(0.5 * (m + m.T)))
    else:
        sign, logdet = np.linalg.slogdet(m)
        if sign <= 0:
            raise np.linalg.LinAlgError("matrix has non-positive determinant")
    return float(np.trace(m)) / sigma2 - logdet


def energy_term(u1: np.ndarray, features: PathFeatureMatrix, y: np.ndarray,
                temperature: float) -> float:
    """(1/P)[ln det(K + T I) + Y^T (K + T I)^-1 Y] over the examples in `features`."""
    y = np.asarray(y, dtype=float)
    p = features.n_examples
    if p < 1:
        raise ValueError("need at least one example")
    if y.shape != (p,):
        raise ValueError(f"labels must have shape ({p},), got {y.shape}")
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    k = total_kernel(u1, features).values
    c = _chol(k + temperature * np.eye(p))
    alpha_vec = sla.cho_solve((c, True), y, check_finite=False)
    return (_chol_logdet(c) + float(y @ alpha_vec)) / p


def _block_trace(m: np.ndarray, n_blocks: int) -> np.ndarray:
    """Sum of the n_blocks diagonal blocks of a (n_blocks*b, n_blocks*b) matrix."""
    b = m.shape[0] // n_blocks
    out = np.zeros((b, b))
    for h in range(n_blocks):
        out += m[h * b : (h + 1) * b, h * b : (h + 1) * b]
    return out


def _action_pieces(mats: list, features: PathFeatureMatrix, y: np.ndarray,
                   config: SolverConfig, want_grad: bool):
    """Action, entropy, energy and (optionally) per-level gradients.

    Each level is read through its symmetric part, so the action is invariant
    under U -> (U + U^T)/2 and the gradients (symmetric by construction) match
    entry-wise central finite differences of the action at any point.
    """
    s2inv = 1.0 / config.sigma2
    depth = len(mats) - 1
    mats = [0.5 * (m + m.T) for m in mats]
    grads = [np.zeros_like(m) for m in mats] if want_grad else None

    top = mats[-1]
    c_top = _chol(top)
    entropy = s2inv * float(np.trace(top)) - _chol_logdet(c_top)
    if want_grad:
        grads[-1] += s2inv * np.eye(top.shape[0]) - _chol_inv(c_top)

    for i in range(depth):
        u = mats[i]
        u_next = mats[i + 1]
        n_heads_lift = u.shape[0] // u_next.shape[0]
        c_u = _chol(u)
        c_next = _chol(u_next)
        w_next = _chol_inv(c_next)
        e_inv = np.kron(np.eye(n_heads_lift), w_next)
        entropy += s2inv * float(np.sum(u * e_inv)) - _chol_logdet(c_u) + n_heads_lift * _chol_logdet(c_next)
        if want_grad:
            grads[i] += s2inv * e_inv - _chol_inv(c_u)
            full = -s2inv * (e_inv @ u @ e_inv) + e_inv
            grads[i + 1] += _block_trace(full, n_heads_lift)

    p = features.n_examples
    k = total_kernel(mats[0], features).values
    c_m = _chol(k + config.temperature * np.eye(p))
    alpha_vec = sla.cho_solve((c_m, True), y, check_finite=False)
    energy = (_chol_logdet(c_m) + float(y @ alpha_vec)) / p
    if want_grad and config.alpha != 0.0:
        m_inv = sla.cho_solve((c_m, True), np.eye(p), check_finite=False)
        g_k = (0.5 * (m_inv + m_inv.T) - np.outer(alpha_vec, alpha_vec)) / p
        lifted = np.einsum("mn,bin->bim", g_k, features.values, optimize=True)
        g_u = np.einsum("aim,bim->ab", features.values, lifted, optimize=True) / features.norm_paths
        grads[0] += config.alpha * g_u

    act = entropy + config.alpha * energy
    return act, entropy, energy, grads


def action(params: OrderParameterSet, features: PathFeatureMatrix, y: np.ndarray,
           config: SolverConfig) -> float:
    """The order-parameter action over the examples in `features`."""
    y = np.asarray(y, dtype=float)
    act, _, _, _ = _action_pieces(params.matrices, features, y, config, want_grad=False)
    return act


def action_gradient(params: OrderParameterSet, features: PathFeatureMatrix, y: np.ndarray,
                    config: SolverConfig) -> list:
    """Entry-wise gradient of the action at each level, same shapes as params."""
    y = np.asarray(y, dtype=float)
    _, _, _, grads = _action_pieces(params.matrices, features, y, config, want_grad=True)
    return grads


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _inv_softplus(y: float) -> float:
    if y > 30.0:
        return float(y)
    return float(np.log(np.expm1(y)))


def _factors_from_raw(raws: list) -> list:
    out = []
    for raw in raws:
        f = np.tril(raw, -1)
        np.fill_diagonal(f, _softplus(np.diag(raw)))
        out.append(f)
    return out


def _raw_gradients(u_grads: list, raws: list, factors: list) -> list:
    """Chain rule from dS/dU through U = F F^T and the softplus diagonal."""
    out = []
    for g, raw, f in zip(u_grads, raws, factors):
        gf = (g + g.T) @ f
        gr = np.tril(gf, -1)
        diag = np.diag(gf) / (1.0 + np.exp(-np.diag(raw)))
        np.fill_diagonal(gr, diag)
        out.append(gr)
    return out


def _init_raws(n_heads: int, depth: int, config: SolverConfig,
               rng: np.random.Generator) -> list:
    raws = []
    for i in range(depth + 1):
        size = n_heads ** (depth - i)
        target = config.sigma2 ** ((depth + 1 - i) / 2.0)
        raw = np.full((size, size), 0.0)
        np.fill_diagonal(raw, _inv_softplus(target))
        raw += config.jitter * rng.standard_normal((size, size))
        raws.append(raw)
    return raws


class _Adam:
    """Plain Adam on a list of matrices; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, shapes, lr):
        self.lr = lr
        self.t = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    def step(self, params, grads):
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + eps)


def _grad_inf_norm(grads: list) -> float:
    return max(float(np.max(np.abs(g))) for g in grads)


def _run_adam(raws_init: list, features: PathFeatureMatrix, y: np.ndarray,
              config: SolverConfig, lr: float, n_iter: int, record: bool):
    """Adam from the given raw factors; returns (raws, trace rows, converged)."""
    raws = [r.copy() for r in raws_init]
    adam = _Adam([r.shape for r in raws], lr)
    rows = [] if record else None
    crits = []
    converged = False
    n_done = 0
    for _ in range(n_iter):
        factors = _factors_from_raw(raws)
        mats = [f @ f.T for f in factors]
        try:
            act, ent, ene, grads = _action_pieces(mats, features, y, config, want_grad=True)
        except np.linalg.LinAlgError:
            # factors blew up or collapsed past float precision: that is divergence
            return raws, rows, crits, False, n_done, True
        gmax = _grad_inf_norm(grads)
        if not np.isfinite(act) or not np.isfinite(gmax):
            return raws, rows, crits, False, n_done, True
        if record:
            rows.append((act, ent, ene, gmax))
        crits.append(ene if config.alpha != 0.0 else act)
        n_done += 1
        if gmax <= config.tolerance * (1.0 + abs(act)):
            converged = True
            break
        adam.step(raws, _raw_gradients(grads, raws, factors))
    return raws, rows, crits, converged, n_done, False


def solve_saddle(features: PathFeatureMatrix, y: np.ndarray,
                 config: SolverConfig) -> tuple[OrderParameterSet, SolveTrace]:
    """Minimize the action; returns the order parameters and the full trace.

    Starts at the GP fixed point plus a small seeded jitter on the raw factors,
    sweeps the learning-rate grid for `warmup_iters` steps each, restarts from
    the initialization with the winning rate, and stops when the action
    gradient infinity norm falls below tolerance * (1 + |action|).  With
    restarts > 1 the whole procedure repeats from fresh jitters and the lowest
    final action wins.  Identical (features, y, config) reruns are bit-identical.
    """
    y = np.asarray(y, dtype=float)
    feats = features.train()
    if feats.n_examples < 1:
        raise ValueError("need at least one training example")
    if y.shape != (feats.n_examples,):
        raise ValueError(f"labels must have shape ({feats.n_examples},), got {y.shape}")

    rng = np.random.default_rng(config.seed)
    best = None
    for restart in range(config.restarts):
        raws_init = _init_raws(features.n_heads, features.depth, config, rng)

        sweep = []
        best_lr = None
        best_crit = np.inf
        for lr in config.learning_rates:
            if config.warmup_iters == 0:
                sweep.append((lr, np.nan))
                best_lr = lr if best_lr is None else best_lr
                continue
            _, _, crits, _, _, diverged = _run_adam(
                raws_init, feats, y, config, lr, config.warmup_iters, record=False)
            crit = float(np.mean(crits)) if crits and not diverged else np.inf
            sweep.append((lr, crit))
            if crit < best_crit:
                best_crit = crit
                best_lr = lr
        if best_lr is None or (config.warmup_iters > 0 and not np.isfinite(best_crit)):
            raise SolverFailure("every learning rate in the grid diverged during warmup")

        raws, rows, _, converged, n_done, diverged = _run_adam(
            raws_init, feats, y, config, best_lr, config.max_iter, record=True)
        if diverged or not rows:
            raise SolverFailure(f"action became non-finite at learning rate {best_lr}")

        factors = _factors_from_raw(raws)
        mats = [f @ f.T for f in factors]
        arr = np.array(rows)
        trace = SolveTrace(
            actions=arr[:, 0], entropies=arr[:, 1], energies=arr[:, 2],
            grad_norms=arr[:, 3], learning_rate=float(best_lr),
            converged=converged, n_iter=n_done, restart=restart, sweep=sweep,
        )
        final_action = float(arr[-1, 0])
        if best is None or final_action < best[0]:
            params = OrderParameterSet(matrices=mats, n_heads=features.n_heads, depth=features.depth)
            best = (final_action, params, trace)
    return best[1], best[2]
