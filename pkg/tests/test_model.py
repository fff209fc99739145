import numpy as np
import pytest

from attnpaths.model import (
    AttentionSpec,
    NetworkWeights,
    Readout,
    _softmax_columns,
    attention_matrix,
    attention_stack,
    attention_stack_batch,
    attentioned_input,
    effective_weights,
    forward_layerwise,
    network_output,
)
from attnpaths.paths import enumerate_paths


def _random_specs(rng, depth, n_heads, width, form="direct"):
    specs = []
    for _ in range(depth):
        row = []
        for _ in range(n_heads):
            if form == "direct":
                row.append(AttentionSpec.direct(rng.standard_normal((width, width)), 1.3))
            else:
                g = 3
                row.append(AttentionSpec.from_qk(rng.standard_normal((g, width)),
                                                 rng.standard_normal((g, width))))
        specs.append(row)
    return specs


def test_softmax_columns_oracle():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((5, 4)) * 10
    got = _softmax_columns(logits)
    want = np.empty_like(logits)
    for t in range(4):
        col = logits[:, t]
        e = np.exp(col - col.max())
        want[:, t] = e / e.sum()
    assert np.allclose(got, want, atol=1e-14)
    assert np.allclose(got.sum(axis=0), 1.0, atol=1e-14)


def test_softmax_extreme_logits_stable():
    logits = np.array([[1000.0, -1000.0], [0.0, 0.0]])
    got = _softmax_columns(logits)
    assert np.all(np.isfinite(got))
    assert np.allclose(got.sum(axis=0), 1.0)
    assert got[0, 0] > 0.999
    assert got[1, 1] > 0.999


def test_two_token_logit_gap():
    # zero W gives uniform columns; a logit gap of ln 3 gives (0.75, 0.25)
    width = 2
    x0 = np.eye(2)
    uniform = attention_matrix(x0, AttentionSpec.direct(np.zeros((width, width)), 1.0))
    assert np.allclose(uniform, 0.5)
    w = np.diag([np.log(3.0), 0.0])
    omega = attention_matrix(x0, AttentionSpec.direct(w, 1.0))
    # column 0: logits (ln 3, 0) over the attended index
    assert np.allclose(omega[:, 0], [0.75, 0.25], atol=1e-12)
    assert np.allclose(omega[:, 1], [0.5, 0.5], atol=1e-12)


def test_attention_spec_forms_and_validation():
    rng = np.random.default_rng(1)
    q = rng.standard_normal((3, 5))
    k = rng.standard_normal((3, 5))
    spec = AttentionSpec.from_qk(q, k)
    assert spec.width == 5
    assert np.allclose(spec.logit_matrix(), (k.T @ q) / (5 * np.sqrt(3)))
    direct = AttentionSpec.direct(np.eye(4), 2.5)
    assert direct.width == 4
    assert np.allclose(direct.logit_matrix(), 2.5 * np.eye(4))
    with pytest.raises(ValueError):
        AttentionSpec(q=q, k=k, w=np.eye(5), beta=1.0)
    with pytest.raises(ValueError):
        AttentionSpec(q=q)
    with pytest.raises(ValueError):
        AttentionSpec(w=np.eye(3))
    with pytest.raises(ValueError):
        AttentionSpec.direct(np.zeros((2, 3)), 1.0)
    with pytest.raises(ValueError):
        AttentionSpec.direct(np.eye(2), np.inf)
    with pytest.raises(ValueError):
        AttentionSpec()


def test_qk_direct_equivalence():
    # a qk spec and the direct spec with the same scaled matrix attend identically
    rng = np.random.default_rng(2)
    q = rng.standard_normal((4, 6))
    k = rng.standard_normal((4, 6))
    x0 = rng.standard_normal((6, 5))
    qk = AttentionSpec.from_qk(q, k)
    direct = AttentionSpec.direct((k.T @ q) / (6 * np.sqrt(4)), 1.0)
    assert np.allclose(attention_matrix(x0, qk), attention_matrix(x0, direct), atol=1e-12)


def test_attention_matrix_validation():
    spec = AttentionSpec.direct(np.eye(3), 1.0)
    with pytest.raises(ValueError):
        attention_matrix(np.zeros((4, 2)), spec)
    with pytest.raises(ValueError):
        attention_matrix(np.zeros(3), spec)


def test_attention_stack_batch_matches_single():
    rng = np.random.default_rng(3)
    specs = _random_specs(rng, depth=2, n_heads=3, width=4, form="qk")
    tokens = rng.standard_normal((6, 4, 5))
    batch = attention_stack_batch(tokens, specs)
    assert batch.shape == (6, 2, 3, 5, 5)
    for p in range(6):
        single = attention_stack(tokens[p], specs)
        assert np.allclose(batch[p], single, atol=1e-12)
    # every column of every attention matrix is a distribution
    assert np.allclose(batch.sum(axis=-2), 1.0, atol=1e-12)
    assert np.all(batch >= 0)


def test_readout_column_weights():
    r = Readout.token(2)
    assert np.array_equal(r.column_weights(4), [0.0, 0.0, 1.0, 0.0])
    avg = Readout.average()
    assert np.allclose(avg.column_weights(5), 0.2)
    with pytest.raises(ValueError):
        r.column_weights(2)
    with pytest.raises(ValueError):
        Readout.token(-1)
    with pytest.raises(ValueError):
        Readout(kind="mean")


def test_attentioned_input_oracle():
    rng = np.random.default_rng(4)
    specs = _random_specs(rng, depth=3, n_heads=2, width=4)
    x0 = rng.standard_normal((4, 5))
    omegas = attention_stack(x0, specs)
    readout = Readout.token(1)
    path = (1, 0, 1)
    got = attentioned_input(x0, omegas, path, readout)
    want = x0 @ omegas[0, 1] @ omegas[1, 0] @ omegas[2, 1]
    assert np.allclose(got, want[:, 1], atol=1e-12)
    avg = attentioned_input(x0, omegas, path, Readout.average())
    assert np.allclose(avg, want.mean(axis=1), atol=1e-12)


def test_effective_weights_oracle():
    rng = np.random.default_rng(5)
    weights = NetworkWeights.sample_prior(3, 4, depth=2, n_heads=2, rng=rng)
    path = (1, 0)
    got = effective_weights(weights, path)
    want = weights.readout @ weights.values[1, 0] @ weights.values[0, 1] / 3.0
    assert np.allclose(got, want, atol=1e-12)


def test_path_sum_equals_layerwise():
    # the path decomposition and the layer recursion are the same function
    rng = np.random.default_rng(6)
    for trial in range(20):
        depth = int(rng.integers(1, 4))
        n_heads = int(rng.integers(1, 4))
        width = int(rng.integers(2, 6))
        n_hidden = int(rng.integers(2, 5))
        n_tokens = int(rng.integers(2, 5))
        specs = _random_specs(rng, depth, n_heads, width)
        x0 = rng.standard_normal((width, n_tokens))
        omegas = attention_stack(x0, specs)
        weights = NetworkWeights.sample_prior(n_hidden, width, depth, n_heads, rng=rng)
        readout = Readout.token(int(rng.integers(0, n_tokens)))
        a = network_output(x0, weights, omegas, readout)
        b = forward_layerwise(x0, weights, omegas, readout)
        assert abs(a - b) <= 1e-10 * max(1.0, abs(a))


def test_network_output_explicit_two_layer():
    # hand-rolled double loop over paths at H=2, L=2
    rng = np.random.default_rng(7)
    width, n_hidden, n_tokens = 3, 2, 4
    specs = _random_specs(rng, 2, 2, width)
    x0 = rng.standard_normal((width, n_tokens))
    omegas = attention_stack(x0, specs)
    weights = NetworkWeights.sample_prior(n_hidden, width, 2, 2, rng=rng)
    readout = Readout.token(0)
    total = 0.0
    for h1 in range(2):
        for h2 in range(2):
            veff = weights.readout @ weights.values[1, h2] @ weights.values[0, h1] / n_hidden
            xi = (x0 @ omegas[0, h1] @ omegas[1, h2])[:, 0]
            total += veff @ weights.v0 @ xi
    want = total / np.sqrt(4 * n_hidden * width)
    got = network_output(x0, weights, omegas, readout)
    assert abs(got - want) <= 1e-12


def test_network_weights_flatten_round_trip():
    rng = np.random.default_rng(8)
    weights = NetworkWeights.sample_prior(3, 5, depth=2, n_heads=2, rng=rng)
    vec = weights.flatten()
    back = NetworkWeights.unflatten(vec, 3, 5, 2, 2)
    assert np.array_equal(back.v0, weights.v0)
    assert np.array_equal(back.values, weights.values)
    assert np.array_equal(back.readout, weights.readout)
    with pytest.raises(ValueError):
        NetworkWeights.unflatten(vec[:-1], 3, 5, 2, 2)


def test_sample_prior_moments_and_seeding():
    w1 = NetworkWeights.sample_prior(4, 6, 2, 2, sigma2=2.0, rng=11)
    w2 = NetworkWeights.sample_prior(4, 6, 2, 2, sigma2=2.0, rng=11)
    assert np.array_equal(w1.flatten(), w2.flatten())
    big = NetworkWeights.sample_prior(40, 400, 2, 2, sigma2=2.0, rng=12)
    assert abs(big.v0.var() - 2.0) < 0.1
    assert w1.n_hidden == 4 and w1.width == 6 and w1.depth == 2 and w1.n_heads == 2


def test_network_weights_validation():
    with pytest.raises(ValueError):
        NetworkWeights(v0=np.zeros((3, 4)), values=np.zeros((2, 2, 3, 2)), readout=np.zeros(3))
    with pytest.raises(ValueError):
        NetworkWeights(v0=np.zeros((3, 4)), values=np.zeros((2, 2, 3, 3)), readout=np.zeros(2))


def test_path_enumeration_matches_model_paths():
    # the flat order used in model sums matches enumerate_paths
    paths = enumerate_paths(2, 2)
    assert paths == [(0, 0), (0, 1), (1, 0), (1, 1)]
