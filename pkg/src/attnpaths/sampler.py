"""Posterior sampling over network weights with Hamiltonian Monte Carlo.

The Gibbs posterior over all weights Theta = (V0, {V_lh}, a) is

    log p(Theta) = -(1/2T) sum_mu (f(x_mu; Theta) - y_mu)^2 - (1/2 sigma^2) |Theta|^2

up to a constant; attention matrices are fixed by the (frozen) logit specs, so
only the linear-value path is sampled.  Gradients are analytic via layer-wise
backpropagation.  The sampler is plain fixed-length leapfrog HMC with identity
mass and dual-averaging step-size adaptation during warmup (target acceptance
0.8); a proposal whose energy error exceeds the divergence threshold is
rejected and counted.  Chains run independently from spawned seed substreams,
initialized at prior draws.

The sampled order parameter is the empirical second moment of the per-path
effective weights, U_est[pi, pi'] = (1/N) < Veff_pi . Veff_pi' >_samples,
which converges to sigma^(2(L+1)) delta_{pi pi'} under the prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import AttentionSpec, NetworkWeights, Readout, attention_stack_batch


@dataclass(frozen=True)
class HmcConfig:
    n_hidden: int
    temperature: float = 0.01
    sigma2: float = 1.0
    n_chains: int = 10
    n_warmup: int = 1000
    n_samples: int = 1000
    thin: int = 10
    n_leapfrog: int = 32
    step_size: float = 0.01
    target_accept: float = 0.8
    max_energy_error: float = 1000.0
    prior_only: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_hidden < 1:
            raise ValueError(f"n_hidden must be >= 1, got {self.n_hidden}")
        if self.temperature <= 0 and not self.prior_only:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.sigma2 <= 0:
            raise ValueError(f"sigma2 must be > 0, got {self.sigma2}")
        if min(self.n_chains, self.n_samples, self.thin, self.n_leapfrog) < 1 or self.n_warmup < 0:
            raise ValueError("invalid sampler sizes")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if not 0 < self.target_accept < 1:
            raise ValueError(f"target_accept must lie in (0, 1), got {self.target_accept}")


def _forward_batch(weights: NetworkWeights, tokens: np.ndarray, omegas: np.ndarray,
                   readout: Readout):
    """Outputs f (P,) plus the per-layer activations needed for backprop."""
    n = weights.n_hidden
    n_heads = weights.n_heads
    scale = 1.0 / np.sqrt(n * n_heads)
    x = np.einsum("nw,pwt->pnt", weights.v0, tokens, optimize=True) / np.sqrt(weights.width)
    attended = []
    for layer in range(weights.depth):
        xo = np.einsum("pns,phst->phnt", x, omegas[:, layer], optimize=True)
        attended.append(xo)
        x = scale * np.einsum("hmn,phnt->pmt", weights.values[layer], xo, optimize=True)
    col_w = readout.column_weights(tokens.shape[2])
    z = x @ col_w
    f = z @ weights.readout / np.sqrt(n)
    return f, z, attended, col_w


def _backward_batch(weights: NetworkWeights, tokens: np.ndarray, omegas: np.ndarray,
                    r: np.ndarray, z: np.ndarray, attended: list,
                    col_w: np.ndarray) -> NetworkWeights:
    """Gradient of sum_mu r_mu f_mu with respect to every weight."""
    n = weights.n_hidden
    n_heads = weights.n_heads
    scale = 1.0 / np.sqrt(n * n_heads)
    grad_a = (r @ z) / np.sqrt(n)
    g = (r[:, None, None] * weights.readout[None, :, None] * col_w[None, None, :]) / np.sqrt(n)
    grad_values = np.empty_like(weights.values)
    for layer in reversed(range(weights.depth)):
        grad_values[layer] = scale * np.einsum(
            "pmt,phnt->hmn", g, attended[layer], optimize=True)
        g = scale * np.einsum(
            "hmn,pmt,phst->pns", weights.values[layer], g, omegas[:, layer], optimize=True)
    grad_v0 = np.einsum("pnt,pwt->nw", g, tokens, optimize=True) / np.sqrt(weights.width)
    return NetworkWeights(v0=grad_v0, values=grad_values, readout=grad_a)


def log_posterior(weights: NetworkWeights, tokens: np.ndarray, omegas: np.ndarray,
                  labels: np.ndarray, readout: Readout, temperature: float,
                  sigma2: float = 1.0, prior_only: bool = False):
    """Gibbs log posterior (up to a constant) and its gradient in weight space."""
    logp = 0.0
    if prior_only:
        grad = NetworkWeights(
            v0=np.zeros_like(weights.v0),
            values=np.zeros_like(weights.values),
            readout=np.zeros_like(weights.readout),
        )
    else:
        labels = np.asarray(labels, dtype=float)
        f, z, attended, col_w = _forward_batch(weights, tokens, omegas, readout)
        resid = f - labels
        logp += -0.5 * float(resid @ resid) / temperature
        grad = _backward_batch(weights, tokens, omegas, -resid / temperature, z, attended, col_w)
    logp += -0.5 * (
        float(np.sum(weights.v0**2)) + float(np.sum(weights.values**2))
        + float(np.sum(weights.readout**2))
    ) / sigma2
    grad.v0 -= weights.v0 / sigma2
    grad.values -= weights.values / sigma2
    grad.readout -= weights.readout / sigma2
    return logp, grad


def leapfrog(grad_neg_logp, q: np.ndarray, p: np.ndarray, step_size: float,
             n_steps: int):
    """Standard leapfrog for H = -logp(q) + |p|^2/2; time-reversible.

    grad_neg_logp(q) returns the gradient of the potential (minus log density).
    """
    q = q.copy()
    p = p - 0.5 * step_size * grad_neg_logp(q)
    for i in range(n_steps):
        q += step_size * p
        g = grad_neg_logp(q)
        if i < n_steps - 1:
            p -= step_size * g
        else:
            p -= 0.5 * step_size * g
    return q, p


@dataclass
class _ChainResult:
    samples: np.ndarray
    potentials: np.ndarray
    acceptance: float
    divergences: int
    step_size: float


def _run_chain(logp_and_grad, q0: np.ndarray, config: HmcConfig,
               rng: np.random.Generator) -> _ChainResult:
    def potential(q):
        lp, _ = logp_and_grad(q)
        return -lp

    def grad_potential(q):
        _, g = logp_and_grad(q)
        return -g

    q = q0.copy()
    u_q = potential(q)

    # dual averaging constants (gamma, t0, kappa as in the standard scheme)
    gamma, t0, kappa = 0.05, 10.0, 0.75
    mu = np.log(10.0 * config.step_size)
    log_eps = np.log(config.step_size)
    log_eps_bar = log_eps
    h_bar = 0.0

    kept = []
    potentials = []
    n_accept = 0
    n_diverge = 0
    total = config.n_warmup + config.n_samples
    for it in range(1, total + 1):
        warming = it <= config.n_warmup
        eps = float(np.exp(log_eps)) if warming else float(np.exp(log_eps_bar))
        p0 = rng.standard_normal(q.shape)
        h0 = u_q + 0.5 * float(p0 @ p0)
        # overflow in an exploding trajectory is caught by the divergence check
        with np.errstate(over="ignore", invalid="ignore"):
            q_new, p_new = leapfrog(grad_potential, q, p0, eps, config.n_leapfrog)
            u_new = potential(q_new)
            h_new = u_new + 0.5 * float(p_new @ p_new)
        delta = h_new - h0
        diverged = not np.isfinite(delta) or delta > config.max_energy_error
        accept_prob = 0.0 if diverged else min(1.0, float(np.exp(-delta)))
        if diverged:
            n_diverge += 1
        elif rng.random() < accept_prob:
            q = q_new
            u_q = u_new
            if not warming:
                n_accept += 1
        if warming:
            m = it
            h_bar = (1.0 - 1.0 / (m + t0)) * h_bar + (config.target_accept - accept_prob) / (m + t0)
            log_eps = mu - np.sqrt(m) / gamma * h_bar
            eta = m**-kappa
            log_eps_bar = eta * log_eps + (1.0 - eta) * log_eps_bar
        else:
            if (it - config.n_warmup) % config.thin == 0:
                kept.append(q.copy())
                potentials.append(u_q)
    return _ChainResult(
        samples=np.array(kept), potentials=np.array(potentials),
        acceptance=n_accept / config.n_samples, divergences=n_diverge,
        step_size=float(np.exp(log_eps_bar)) if config.n_warmup > 0 else config.step_size,
    )


def run_hmc(logp_and_grad, q0s: list, config: HmcConfig) -> list:
    """Independent chains from the given initial points; per-chain seed substreams."""
    root = np.random.default_rng(config.seed)
    rngs = root.spawn(len(q0s))
    return [_run_chain(logp_and_grad, q0, config, rng) for q0, rng in zip(q0s, rngs)]


@dataclass
class PosteriorSamples:
    """Kept posterior draws (flattened weights) with per-chain diagnostics."""

    samples: np.ndarray
    n_hidden: int
    width: int
    depth: int
    n_heads: int
    acceptance: np.ndarray
    divergences: np.ndarray
    step_sizes: np.ndarray
    potentials: np.ndarray
    config: HmcConfig

    @property
    def n_kept(self) -> int:
        return self.samples.shape[0]

    def weights(self, i: int) -> NetworkWeights:
        return NetworkWeights.unflatten(self.samples[i], self.n_hidden, self.width,
                                        self.depth, self.n_heads)


def hmc_sample(tokens: np.ndarray, labels: np.ndarray, specs: list[list[AttentionSpec]],
               readout: Readout, config: HmcConfig) -> PosteriorSamples:
    """Sample the weight posterior on the given training set.

    tokens: (P, width, T).  Attention matrices are computed once from the
    specs and stay fixed; with prior_only the likelihood is switched off
    (the infinite-temperature limit) and tokens are only used for shapes.
    """
    tokens = np.asarray(tokens, dtype=float)
    labels = np.asarray(labels, dtype=float)
    depth = len(specs)
    n_heads = len(specs[0])
    width = tokens.shape[1]
    n = config.n_hidden
    omegas = attention_stack_batch(tokens, specs)

    def logp_and_grad(q):
        w = NetworkWeights.unflatten(q, n, width, depth, n_heads)
        lp, g = log_posterior(w, tokens, omegas, labels, readout,
                              config.temperature, config.sigma2, config.prior_only)
        return lp, g.flatten()

    dim = n * width + depth * n_heads * n * n + n
    root = np.random.default_rng(config.seed)
    init_rngs = root.spawn(config.n_chains)
    q0s = [np.sqrt(config.sigma2) * r.standard_normal(dim) for r in init_rngs]
    results = run_hmc(logp_and_grad, q0s, config)
    return PosteriorSamples(
        samples=np.concatenate([r.samples for r in results]),
        n_hidden=n, width=width, depth=depth, n_heads=n_heads,
        acceptance=np.array([r.acceptance for r in results]),
        divergences=np.array([r.divergences for r in results]),
        step_sizes=np.array([r.step_size for r in results]),
        potentials=np.concatenate([r.potentials for r in results]),
        config=config,
    )


def _effective_rows(weights: NetworkWeights) -> np.ndarray:
    """All H^L effective weight rows Veff_pi, canonical order; shape (H^L, N)."""
    rows = weights.readout[None, :]
    for layer in reversed(range(weights.depth)):
        rows = np.einsum("ok,hkn->hon", rows, weights.values[layer],
                         optimize=True).reshape(-1, weights.n_hidden)
    return rows / weights.n_hidden ** (weights.depth / 2.0)


def empirical_order_parameter(samples: PosteriorSamples, return_samples: bool = False):
    """U_est[pi, pi'] = (1/N) mean over samples of Veff_pi . Veff_pi'."""
    n_paths = samples.n_heads**samples.depth
    per = np.empty((samples.n_kept, n_paths, n_paths))
    for i in range(samples.n_kept):
        rows = _effective_rows(samples.weights(i))
        per[i] = rows @ rows.T / samples.n_hidden
    u_est = per.mean(axis=0)
    if return_samples:
        return u_est, per
    return u_est


def empirical_predictor(samples: PosteriorSamples, tokens: np.ndarray,
                        specs: list[list[AttentionSpec]], readout: Readout):
    """Posterior mean and variance of the output on new examples, from samples."""
    tokens = np.asarray(tokens, dtype=float)
    omegas = attention_stack_batch(tokens, specs)
    outs = np.empty((samples.n_kept, tokens.shape[0]))
    for i in range(samples.n_kept):
        f, _, _, _ = _forward_batch(samples.weights(i), tokens, omegas, readout)
        outs[i] = f
    return outs.mean(axis=0), outs.var(axis=0)
