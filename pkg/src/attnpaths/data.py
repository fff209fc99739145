"""Task generators: the hidden-chain classification task and one-shot episodes.

Hidden-chain task.  Each example is a binary Markov chain q_1..q_T with
transition matrix [[1-p, p], [p, 1-p]]; class +1 uses p = 0.3 (sticky), class
-1 uses p = 0.7 (oscillating).  Token t carries the state vector v_{q_t} plus
anisotropic Gaussian noise, and a one-hot positional code of size T+1 is
concatenated, so tokens have width N0 + T + 1.  Position 0 holds a bos token
with zero features.  Classes are balanced exactly (P/2 each, P even) and
shuffled under the seed.

The handcrafted attention heads follow the block parameterization
W = beta [[W_ff, W_fp], [W_pf, W_pp]] over the (feature, positional)
coordinates with hardness beta = 10 for every head.

Good heads: the layer-1 head attends a query's successor token when the state
matches and the bos token otherwise.  With d = v+ - v- and v.d = N0 by
construction, W_ff = d d^T / N0^2 puts the state-match logit at exactly +-1,
the successor bonus at +1 and the bos row at 3/2, so the noiseless logit
ordering is match+successor (2) > bos (3/2) > match (1) > 0 > mismatch (-1).
The layer-2 head attends uniformly (W_pp all ones).

Random heads: blocks with iid Gaussian entries scaled per subspace so every
logit contribution is O(1): W_ff entries 1/N0, W_pp entries 1, W_fp and W_pf
entries 1/sqrt(N0).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import AttentionSpec


@dataclass(frozen=True)
class HmcTaskConfig:
    chain_length: int = 30
    feature_width: int = 200
    p_plus: float = 0.3
    p_minus: float = 0.7
    sigma_par: float = 1.0
    sigma_perp: float = 1.0
    n_train: int = 100
    n_test: int = 1000
    beta: float = 10.0

    def __post_init__(self):
        if self.chain_length < 1 or self.feature_width < 2:
            raise ValueError("need chain_length >= 1 and feature_width >= 2")
        if self.feature_width % 2 != 0:
            raise ValueError(f"feature_width must be even, got {self.feature_width}")
        for name in ("p_plus", "p_minus"):
            p = getattr(self, name)
            if not 0.0 < p < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {p}")
        if self.sigma_par < 0 or self.sigma_perp < 0:
            raise ValueError("noise scales must be nonnegative")
        if self.n_train < 2 or self.n_test < 0:
            raise ValueError("need n_train >= 2 and n_test >= 0")
        if self.n_train % 2 or self.n_test % 2:
            raise ValueError("train and test counts must be even for exact class balance")

    @property
    def token_width(self) -> int:
        return self.feature_width + self.chain_length + 1

    @property
    def n_tokens(self) -> int:
        return self.chain_length + 1


@dataclass
class SequenceDataset:
    """Tokens (P, width, T_tot), labels in {-1, +1}; first n_train are training."""

    tokens: np.ndarray
    labels: np.ndarray
    n_train: int
    feature_width: int
    seed: int
    config: object = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.tokens.ndim != 3:
            raise ValueError(f"tokens must be (P, width, T), got {self.tokens.shape}")
        if self.labels.shape != (self.tokens.shape[0],):
            raise ValueError("labels length must match the example count")
        if not 0 <= self.n_train <= self.tokens.shape[0]:
            raise ValueError(f"n_train={self.n_train} out of range")

    @property
    def n_examples(self) -> int:
        return self.tokens.shape[0]

    @property
    def token_width(self) -> int:
        return self.tokens.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[2]

    @property
    def train_labels(self) -> np.ndarray:
        return self.labels[: self.n_train]

    @property
    def test_labels(self) -> np.ndarray:
        return self.labels[self.n_train :]

    @property
    def test_indices(self) -> np.ndarray:
        return np.arange(self.n_train, self.n_examples)


def state_vectors(feature_width: int) -> tuple[np.ndarray, np.ndarray]:
    """v+ (sqrt 2 on the first half) and v- (sqrt 2 on the second half)."""
    if feature_width % 2 != 0:
        raise ValueError(f"feature_width must be even, got {feature_width}")
    half = feature_width // 2
    v_plus = np.zeros(feature_width)
    v_plus[:half] = np.sqrt(2.0)
    v_minus = np.zeros(feature_width)
    v_minus[half:] = np.sqrt(2.0)
    return v_plus, v_minus


def sample_hidden_chain(p_flip: float, length: int, rng: np.random.Generator) -> np.ndarray:
    """One chain of states in {0, 1}; uniform initial state, flip probability p_flip."""
    start = rng.integers(0, 2)
    flips = rng.random(length - 1) < p_flip
    states = np.empty(length, dtype=np.int64)
    states[0] = start
    states[1:] = (start + np.cumsum(flips)) % 2
    return states


def _noise(shape: tuple, v_plus: np.ndarray, v_minus: np.ndarray,
           sigma_par: float, sigma_perp: float, rng: np.random.Generator) -> np.ndarray:
    """Anisotropic noise sigma_par^2 P_par + sigma_perp^2 P_perp over the last axis."""
    g = rng.standard_normal(shape)
    u1 = v_plus / np.linalg.norm(v_plus)
    u2 = v_minus / np.linalg.norm(v_minus)
    par = np.tensordot(g, u1, axes=(-1, 0))[..., None] * u1 \
        + np.tensordot(g, u2, axes=(-1, 0))[..., None] * u2
    return sigma_par * par + sigma_perp * (g - par)


def _class_block(n: int, p_flip: float, config: HmcTaskConfig,
                 rng: np.random.Generator) -> np.ndarray:
    t = config.chain_length
    n0 = config.feature_width
    v_plus, v_minus = state_vectors(n0)
    vs = np.stack([v_plus, v_minus])
    states = np.stack([sample_hidden_chain(p_flip, t, rng) for _ in range(n)])
    feats = vs[states] + _noise((n, t, n0), v_plus, v_minus,
                                config.sigma_par, config.sigma_perp, rng)
    tokens = np.zeros((n, config.token_width, t + 1))
    tokens[:, :n0, 1:] = feats.transpose(0, 2, 1)
    # one-hot positional code, bos at position 0
    for pos in range(t + 1):
        tokens[:, n0 + pos, pos] = 1.0
    return tokens


def gen_hmc_dataset(config: HmcTaskConfig, seed: int) -> SequenceDataset:
    """Balanced train + test splits; bit-identical for identical (config, seed).

    Draw order: train +1 block, train -1 block, train shuffle, then the same
    for test.
    """
    rng = np.random.default_rng(seed)
    blocks = []
    labels = []
    for n in (config.n_train, config.n_test):
        if n == 0:
            continue
        plus = _class_block(n // 2, config.p_plus, config, rng)
        minus = _class_block(n - n // 2, config.p_minus, config, rng)
        lab = np.concatenate([np.ones(n // 2, dtype=np.int8), -np.ones(n - n // 2, dtype=np.int8)])
        perm = rng.permutation(n)
        blocks.append(np.concatenate([plus, minus])[perm])
        labels.append(lab[perm])
    return SequenceDataset(
        tokens=np.concatenate(blocks), labels=np.concatenate(labels),
        n_train=config.n_train, feature_width=config.feature_width,
        seed=seed, config=config,
    )


def _block_matrix(w_ff: np.ndarray, w_fp: np.ndarray, w_pf: np.ndarray,
                  w_pp: np.ndarray) -> np.ndarray:
    top = np.concatenate([w_ff, w_fp], axis=1)
    bottom = np.concatenate([w_pf, w_pp], axis=1)
    return np.concatenate([top, bottom], axis=0)


def build_good_heads(feature_width: int, chain_length: int,
                     beta: float = 10.0) -> list[AttentionSpec]:
    """The two handcrafted heads: state-matched successor/bos, then uniform."""
    n0 = feature_width
    t = chain_length
    v_plus, v_minus = state_vectors(n0)
    d = v_plus - v_minus

    w_ff = np.outer(d, d) / n0**2
    w_pp = np.zeros((t + 1, t + 1))
    w_pp[0, :] = 1.5
    w_pp[np.arange(1, t + 1), np.arange(t)] = 1.0
    zeros_fp = np.zeros((n0, t + 1))
    layer1 = AttentionSpec.direct(_block_matrix(w_ff, zeros_fp, zeros_fp.T, w_pp), beta)

    layer2 = AttentionSpec.direct(
        _block_matrix(np.zeros((n0, n0)), zeros_fp, zeros_fp.T, np.ones((t + 1, t + 1))), beta)
    return [layer1, layer2]


def build_random_head(feature_width: int, chain_length: int,
                      rng: np.random.Generator, beta: float = 10.0) -> AttentionSpec:
    """One random head; block scales keep every logit contribution O(1)."""
    n0 = feature_width
    t = chain_length
    w_ff = rng.standard_normal((n0, n0)) / n0
    w_fp = rng.standard_normal((n0, t + 1)) / np.sqrt(n0)
    w_pf = rng.standard_normal((t + 1, n0)) / np.sqrt(n0)
    w_pp = rng.standard_normal((t + 1, t + 1))
    return AttentionSpec.direct(_block_matrix(w_ff, w_fp, w_pf, w_pp), beta)


def build_hmc_attention(config: HmcTaskConfig, n_heads: int, depth: int,
                        seed: int) -> list[list[AttentionSpec]]:
    """Head 0 of each layer is the good head; the rest are random, seeded."""
    if depth != 2:
        raise ValueError("the handcrafted heads are defined for depth 2")
    good = build_good_heads(config.feature_width, config.chain_length, config.beta)
    rng = np.random.default_rng(seed)
    specs = []
    for layer in range(depth):
        row = [good[layer]]
        for _ in range(1, n_heads):
            row.append(build_random_head(config.feature_width, config.chain_length,
                                         rng, config.beta))
        specs.append(row)
    return specs


@dataclass(frozen=True)
class OneShotConfig:
    feature_width: int
    n_patches: int
    seed: int = 0
    pe_base: float = 10000.0

    def __post_init__(self):
        if self.feature_width < 2 or self.n_patches < 1:
            raise ValueError("need feature_width >= 2 and n_patches >= 1")


def _sinusoidal_encoding(n_positions: int, width: int, base: float) -> np.ndarray:
    pe = np.zeros((n_positions, width))
    pos = np.arange(n_positions)[:, None]
    i = np.arange(0, width, 2)[None, :]
    angles = pos / base ** (i / width)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : pe[:, 1::2].shape[1]])
    return pe


def one_shot_label_vectors(config: OneShotConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The fixed (v+, v-, v?) label vectors, seeded from the config."""
    rng = np.random.default_rng(config.seed)
    return tuple(rng.standard_normal(config.feature_width) for _ in range(3))


def build_one_shot_sequences(patches: np.ndarray, classes: np.ndarray,
                             config: OneShotConfig,
                             assignments: np.ndarray | None = None) -> SequenceDataset:
    """Episodes of three images: two labeled context images and a query.

    patches: (E, 3, p, N0) pre-extracted patch tensors; classes: (E, 3) class
    ids with classes[:, 0] != classes[:, 1] and the query matching one of them.
    Label vectors are added to every patch of the image (v+ or v- for the
    context pair, v? for the query), an additive sinusoidal positional code
    runs over all 3p token positions, and the episode label is the symbol
    assigned to the image the query matches.  `assignments` (True means image
    0 carries +) defaults to seeded coin flips; swapping an episode's
    assignment flips its label.
    """
    patches = np.asarray(patches, dtype=float)
    classes = np.asarray(classes)
    if patches.ndim != 4 or patches.shape[1] != 3 or patches.shape[3] != config.feature_width:
        raise ValueError(f"patches must be (E, 3, p, {config.feature_width}), got {patches.shape}")
    if patches.shape[2] != config.n_patches:
        raise ValueError(f"expected {config.n_patches} patches per image, got {patches.shape[2]}")
    if classes.shape != patches.shape[:2]:
        raise ValueError("classes must be (E, 3)")
    if np.any(classes[:, 0] == classes[:, 1]):
        raise ValueError("the two context images must come from distinct classes")
    match0 = classes[:, 2] == classes[:, 0]
    if not np.all(match0 | (classes[:, 2] == classes[:, 1])):
        raise ValueError("the query image must match one of the context classes")

    n_ep, _, p, n0 = patches.shape
    rng = np.random.default_rng(config.seed + 1)
    if assignments is None:
        assignments = rng.random(n_ep) < 0.5
    assignments = np.asarray(assignments, dtype=bool)
    if assignments.shape != (n_ep,):
        raise ValueError(f"assignments must have shape ({n_ep},)")

    v_plus, v_minus, v_query = one_shot_label_vectors(config)
    pe = _sinusoidal_encoding(3 * p, n0, config.pe_base)

    tokens = np.empty((n_ep, n0, 3 * p))
    for e in range(n_ep):
        first, second = (v_plus, v_minus) if assignments[e] else (v_minus, v_plus)
        seq = np.concatenate([
            patches[e, 0] + first,
            patches[e, 1] + second,
            patches[e, 2] + v_query,
        ]) + pe
        tokens[e] = seq.T
    plus_on_match0 = np.where(assignments, 1, -1)
    labels = np.where(match0, plus_on_match0, -plus_on_match0).astype(np.int8)
    return SequenceDataset(tokens=tokens, labels=labels, n_train=n_ep,
                           feature_width=n0, seed=config.seed, config=config)
