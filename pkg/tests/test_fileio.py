import json

import numpy as np
import pytest

from attnpaths import fileio
from attnpaths.data import HmcTaskConfig, gen_hmc_dataset
from attnpaths.fileio import FormatError, ZERO_DIGEST, config_digest
from attnpaths.kernel import PathFeatureMatrix
from attnpaths.model import AttentionSpec
from attnpaths.solver import OrderParameterSet, SolveTrace


DIGEST = "ab" * 32


def _dataset():
    cfg = HmcTaskConfig(chain_length=4, feature_width=6, n_train=4, n_test=2)
    return gen_hmc_dataset(cfg, seed=3)


def _features(rng):
    return PathFeatureMatrix(values=rng.standard_normal((4, 3, 5)), n_train=3,
                             n_heads=2, depth=2)


def test_config_digest_canonical():
    a = config_digest({"b": 1, "a": [1, 2], "c": {"x": 0.5}})
    b = config_digest({"c": {"x": 0.5}, "a": [1, 2], "b": 1})
    assert a == b
    assert len(a) == 64 and set(a) <= set("0123456789abcdef")
    assert config_digest({"a": 1}) != config_digest({"a": 2})


def test_dataset_round_trip(tmp_path):
    ds = _dataset()
    p = tmp_path / "d.apkd"
    fileio.write_dataset(p, ds, DIGEST)
    back, digest = fileio.read_dataset(p)
    assert digest == DIGEST
    assert np.array_equal(back.tokens, ds.tokens)
    assert np.array_equal(back.labels, ds.labels)
    assert back.n_train == ds.n_train
    assert back.feature_width == ds.feature_width
    assert back.seed == ds.seed
    # identical writes are byte-identical
    p2 = tmp_path / "d2.apkd"
    fileio.write_dataset(p2, ds, DIGEST)
    assert p.read_bytes() == p2.read_bytes()


def test_attention_specs_round_trip_direct(tmp_path):
    rng = np.random.default_rng(0)
    specs = [[AttentionSpec.direct(rng.standard_normal((5, 5)), 1.5 + h)
              for h in range(3)] for _ in range(2)]
    p = tmp_path / "w.apkw"
    fileio.write_attention_specs(p, specs, DIGEST)
    back, digest = fileio.read_attention_specs(p)
    assert digest == DIGEST
    assert len(back) == 2 and len(back[0]) == 3
    for layer in range(2):
        for head in range(3):
            assert np.array_equal(back[layer][head].w, specs[layer][head].w)
            assert back[layer][head].beta == specs[layer][head].beta


def test_attention_specs_round_trip_qk(tmp_path):
    rng = np.random.default_rng(1)
    specs = [[AttentionSpec.from_qk(rng.standard_normal((2, 4)), rng.standard_normal((2, 4)))
              for _ in range(2)]]
    p = tmp_path / "w.apkw"
    fileio.write_attention_specs(p, specs, DIGEST)
    back, _ = fileio.read_attention_specs(p)
    assert np.array_equal(back[0][1].q, specs[0][1].q)
    assert np.array_equal(back[0][1].k, specs[0][1].k)


def test_attention_specs_mixed_forms_rejected(tmp_path):
    rng = np.random.default_rng(2)
    mixed = [[AttentionSpec.direct(np.eye(4), 1.0),
              AttentionSpec.from_qk(rng.standard_normal((2, 4)), rng.standard_normal((2, 4)))]]
    with pytest.raises(ValueError):
        fileio.write_attention_specs(tmp_path / "w.apkw", mixed, DIGEST)
    ragged = [[AttentionSpec.direct(np.eye(4), 1.0)],
              [AttentionSpec.direct(np.eye(4), 1.0), AttentionSpec.direct(np.eye(4), 1.0)]]
    with pytest.raises(ValueError):
        fileio.write_attention_specs(tmp_path / "w2.apkw", ragged, DIGEST)


def test_features_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    feats = _features(rng).restrict_paths(np.array([3, 1]), renormalize=False)
    p = tmp_path / "f.apkf"
    fileio.write_features(p, feats, DIGEST)
    back, digest = fileio.read_features(p)
    assert digest == DIGEST
    assert np.array_equal(back.values, feats.values)
    assert np.array_equal(back.path_flats, [3, 1])
    assert back.norm_paths == 4
    assert back.n_train == 3 and back.n_heads == 2 and back.depth == 2


def test_kernel_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    k = rng.standard_normal((5, 5))
    p = tmp_path / "k.apkk"
    fileio.write_kernel(p, k, n_heads=2, depth=2, width=7, digest=DIGEST)
    values, meta, digest = fileio.read_kernel(p)
    assert digest == DIGEST
    assert np.array_equal(values, k)
    assert meta == {"n_heads": 2, "depth": 2, "width": 7}


def test_order_parameters_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    mats = []
    for size in (4, 2, 1):
        a = rng.standard_normal((size, size))
        mats.append(a @ a.T + size * np.eye(size))
    params = OrderParameterSet(matrices=mats, n_heads=2, depth=2)
    p = tmp_path / "u.apku"
    fileio.write_order_parameters(p, params, DIGEST)
    back, digest = fileio.read_order_parameters(p)
    assert digest == DIGEST
    assert back.n_heads == 2 and back.depth == 2
    for a, b in zip(back.matrices, params.matrices):
        assert np.array_equal(a, b)


def test_bad_magic_and_version_and_truncation(tmp_path):
    ds = _dataset()
    p = tmp_path / "d.apkd"
    fileio.write_dataset(p, ds, DIGEST)
    blob = bytearray(p.read_bytes())

    wrong = tmp_path / "wrong.apkd"
    wrong.write_bytes(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(FormatError, match="bad magic"):
        fileio.read_dataset(wrong)

    stale = tmp_path / "stale.apkd"
    stale.write_bytes(bytes(blob[:4]) + (99).to_bytes(4, "little") + bytes(blob[8:]))
    with pytest.raises(FormatError, match="unsupported version"):
        fileio.read_dataset(stale)

    cut_header = tmp_path / "cut1.apkd"
    cut_header.write_bytes(bytes(blob[:20]))
    with pytest.raises(FormatError, match="truncated header at byte 20"):
        fileio.read_dataset(cut_header)

    cut_payload = tmp_path / "cut2.apkd"
    cut_payload.write_bytes(bytes(blob[:-9]))
    with pytest.raises(FormatError, match="truncated payload"):
        fileio.read_dataset(cut_payload)


def test_format_error_is_value_error():
    assert issubclass(FormatError, ValueError)
    assert ZERO_DIGEST == "0" * 64


def test_write_csv_digest_and_float_round_trip(tmp_path):
    p = tmp_path / "t.csv"
    values = [0.1 + 0.2, 1e-17, -3.5, 123456789.123456789]
    fileio.write_csv(p, DIGEST, ["i", "x"], [[i, v] for i, v in enumerate(values)])
    assert fileio.read_csv_digest(p) == DIGEST
    lines = p.read_text().splitlines()
    assert lines[0] == f"# config_digest={DIGEST}"
    assert lines[1] == "i,x"
    for line, want in zip(lines[2:], values):
        got = float(line.split(",")[1])
        assert got == want  # repr round-trips exactly
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y\n1,2\n")
    with pytest.raises(FormatError):
        fileio.read_csv_digest(bad)


def test_write_u1_csv_labels(tmp_path):
    u1 = np.arange(16, dtype=float).reshape(4, 4)
    p = tmp_path / "u1.csv"
    fileio.write_u1_csv(p, u1, n_heads=2, depth=2, digest=DIGEST)
    lines = p.read_text().splitlines()
    assert lines[1] == 'path,"(1,1)","(1,2)","(2,1)","(2,2)"'
    assert lines[2].startswith('"(1,1)",0.0,1.0,2.0,3.0')
    # pruned feature matrices pass their own flats through
    p2 = tmp_path / "u1b.csv"
    fileio.write_u1_csv(p2, u1[:2, :2], n_heads=2, depth=2, digest=DIGEST,
                        path_flats=[3, 1])
    lines2 = p2.read_text().splitlines()
    assert lines2[1] == 'path,"(2,2)","(1,2)"'


def test_trace_and_predictor_and_score_csvs(tmp_path):
    trace = SolveTrace(actions=np.array([3.0, 2.0]), entropies=np.array([1.0, 1.5]),
                       energies=np.array([2.0, 0.5]), grad_norms=np.array([0.1, 0.01]),
                       learning_rate=0.1, converged=True, n_iter=2)
    p = tmp_path / "trace.csv"
    fileio.write_trace_csv(p, trace, DIGEST)
    lines = p.read_text().splitlines()
    assert lines[1] == "iteration,action,entropy,energy,grad_norm"
    assert lines[2] == "0,3.0,1.0,2.0,0.1"
    assert len(lines) == 4

    class _Report:
        means = np.array([0.5, -0.25])
        variances = np.array([0.1, 0.2])
        eval_labels = np.array([1, -1])

    p2 = tmp_path / "pred.csv"
    fileio.write_predictor_csv(p2, _Report(), DIGEST)
    lines2 = p2.read_text().splitlines()
    assert lines2[1] == "example,mean,variance,label"
    assert lines2[2] == "0,0.5,0.1,1"

    from attnpaths.analysis import head_scores
    table = head_scores(np.eye(4), 2, 2)
    p3 = tmp_path / "scores.csv"
    fileio.write_head_scores_csv(p3, table, DIGEST)
    lines3 = p3.read_text().splitlines()
    assert lines3[1] == "layer,head,score,normalized"
    # heads are rendered one-based
    assert lines3[2].startswith("1,1,")
    assert lines3[3].startswith("1,2,")


def test_alignment_and_sweep_csvs(tmp_path):
    p = tmp_path / "align.csv"
    fileio.write_alignment_csv(p, [2.0, 1.0], [0.9, 0.1], DIGEST)
    lines = p.read_text().splitlines()
    assert lines[1] == "rank,eigenvalue,overlap"
    assert lines[2] == "0,2.0,0.9"

    from attnpaths.predictor import SweepResult
    result = SweepResult(best_temperature=0.1, best_accuracy=0.75, rows=[
        {"temperature": 0.1, "accuracy": 0.75, "converged": True, "error": ""},
        {"temperature": 0.5, "accuracy": None, "converged": False, "error": "diverged"},
    ])
    p2 = tmp_path / "sweep.csv"
    fileio.write_sweep_csv(p2, result, DIGEST)
    lines2 = p2.read_text().splitlines()
    assert lines2[1] == "temperature,accuracy,converged,error"
    assert lines2[2] == "0.1,0.75,True,"
    assert lines2[3] == "0.5,,False,diverged"


def test_write_json_stable(tmp_path):
    p = tmp_path / "x.json"
    fileio.write_json(p, {"b": 1, "a": [1.5]})
    text = p.read_text()
    assert text.endswith("\n")
    assert json.loads(text) == {"a": [1.5], "b": 1}
    # keys are sorted, so semantically equal payloads are byte-identical
    p2 = tmp_path / "y.json"
    fileio.write_json(p2, {"a": [1.5], "b": 1})
    assert p.read_text() == p2.read_text()
