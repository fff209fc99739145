"""On-disk formats: flat binary artifacts and CSV exports.

Every binary file starts with a four-byte magic, a little-endian u32 version,
fixed-width header fields, and a 32-byte sha256 config digest, followed by
row-major float64 payloads:

    APKD  datasets          (feature width, token width, T, P, n_train, seed)
    APKW  attention specs   (L, H, form tag, token width, qk dim)
    APKF  path features     (H, L, width, P, n_train, norm, path flats)
    APKK  kernels           (H, L, width, n)
    APKU  order parameters  (H, L, level count, sides)

CSV exports start with a `# config_digest=<hex>` comment line, then a header
row; floats are written with repr so reads round-trip exactly and reruns are
byte-identical.  One-based head indices appear in all labels.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct

import numpy as np

from .kernel import PathFeatureMatrix
from .model import AttentionSpec
from .paths import path_from_flat, path_label
from .solver import OrderParameterSet

FORMAT_VERSION = 1
ZERO_DIGEST = "0" * 64


class FormatError(ValueError):
    """Malformed or mismatched binary artifact; message carries the byte offset."""


def config_digest(config: dict) -> str:
    """sha256 over the canonical JSON rendering of a config mapping."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _pack_header(magic: bytes, fields: list, digest: str) -> bytes:
    raw = struct.pack("<4sI" + "Q" * len(fields), magic, FORMAT_VERSION, *fields)
    return raw + bytes.fromhex(digest)


def _read_header(fh, magic: bytes, n_fields: int, path: str):
    head_len = 8 + 8 * n_fields + 32
    raw = fh.read(head_len)
    if len(raw) < head_len:
        raise FormatError(f"{path}: truncated header at byte {len(raw)}")
    got_magic, version = struct.unpack_from("<4sI", raw, 0)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r} at byte 0, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    fields = struct.unpack_from("<" + "Q" * n_fields, raw, 8)
    digest = raw[8 + 8 * n_fields :].hex()
    return fields, digest


def _read_array(fh, shape: tuple, path: str, dtype=np.float64) -> np.ndarray:
    count = int(np.prod(shape))
    want = count * np.dtype(dtype).itemsize
    raw = fh.read(want)
    if len(raw) < want:
        raise FormatError(f"{path}: truncated payload, wanted {want} bytes got {len(raw)}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def write_dataset(path, dataset, digest: str = ZERO_DIGEST) -> None:
    from .data import SequenceDataset  # local import to avoid a cycle

    assert isinstance(dataset, SequenceDataset)
    fields = [dataset.feature_width, dataset.token_width, dataset.n_tokens,
              dataset.n_examples, dataset.n_train, dataset.seed & (2**64 - 1)]
    with open(path, "wb") as fh:
        fh.write(_pack_header(b"APKD", fields, digest))
        fh.write(np.ascontiguousarray(dataset.tokens, dtype=np.float64).tobytes())
        fh.write(np.ascontiguousarray(dataset.labels, dtype=np.int8).tobytes())


def read_dataset(path):
    from .data import SequenceDataset

    with open(path, "rb") as fh:
        (n0, width, n_tok, n_ex, n_train, seed), digest = _read_header(fh, b"APKD", 6, str(path))
        tokens = _read_array(fh, (n_ex, width, n_tok), str(path))
        labels = _read_array(fh, (n_ex,), str(path), dtype=np.int8)
    ds = SequenceDataset(tokens=tokens, labels=labels, n_train=int(n_train),
                         feature_width=int(n0), seed=int(seed))
    return ds, digest


def write_attention_specs(path, specs: list, digest: str = ZERO_DIGEST) -> None:
    """specs: list (layers) of lists (heads) of AttentionSpec, all the same form."""
    depth = len(specs)
    n_heads = len(specs[0])
    flat = [s for row in specs for s in row]
    if any(len(row) != n_heads for row in specs):
        raise ValueError("every layer must have the same number of heads")
    direct = flat[0].w is not None
    if any((s.w is not None) != direct for s in flat):
        raise ValueError("all heads in one file must use the same form")
    width = flat[0].width
    qk_dim = 0 if direct else flat[0].q.shape[0]
    fields = [depth, n_heads, 1 if direct else 0, width, qk_dim]
    with open(path, "wb") as fh:
        fh.write(_pack_header(b"APKW", fields, digest))
        for s in flat:
            if s.width != width:
                raise ValueError("all heads must share the token width")
            if direct:
                fh.write(struct.pack("<d", s.beta))
                fh.write(np.ascontiguousarray(s.w, dtype=np.float64).tobytes())
            else:
                fh.write(np.ascontiguousarray(s.q, dtype=np.float64).tobytes())
                fh.write(np.ascontiguousarray(s.k, dtype=np.float64).tobytes())


def read_attention_specs(path):
    with open(path, "rb") as fh:
        (depth, n_heads, form, width, qk_dim), digest = _read_header(fh, b"APKW", 5, str(path))
        if form not in (0, 1):
            raise FormatError(f"{path}: unknown form tag {form} at byte 24")
        specs = []
        for _ in range(depth):
            row = []
            for _ in range(n_heads):
                if form == 1:
                    raw = fh.read(8)
                    if len(raw) < 8:
                        raise FormatError(f"{path}: truncated beta field")
                    (beta,) = struct.unpack("<d", raw)
                    w = _read_array(fh, (width, width), str(path))
                    row.append(AttentionSpec.direct(w, beta))
                else:
                    q = _read_array(fh, (qk_dim, width), str(path))
                    k = _read_array(fh, (qk_dim, width), str(path))
                    row.append(AttentionSpec.from_qk(q, k))
            specs.append(row)
    return specs, digest


def write_features(path, features: PathFeatureMatrix, digest: str = ZERO_DIGEST) -> None:
    fields = [features.n_heads, features.depth, features.width, features.n_examples,
              features.n_train, features.norm_paths, features.n_paths]
    with open(path, "wb") as fh:
        fh.write(_pack_header(b"APKF", fields, digest))
        fh.write(np.ascontiguousarray(features.path_flats, dtype=np.int64).tobytes())
        fh.write(np.ascontiguousarray(features.values, dtype=np.float64).tobytes())


def read_features(path):
    with open(path, "rb") as fh:
        (n_heads, depth, width, n_ex, n_train, norm, n_paths), digest = _read_header(
            fh, b"APKF", 7, str(path))
        flats = _read_array(fh, (n_paths,), str(path), dtype=np.int64)
        values = _read_array(fh, (n_paths, width, n_ex), str(path))
    return PathFeatureMatrix(values=values, n_train=int(n_train), n_heads=int(n_heads),
                             depth=int(depth), path_flats=flats, norm_paths=int(norm)), digest


def write_kernel(path, values: np.ndarray, n_heads: int, depth: int, width: int,
                 digest: str = ZERO_DIGEST) -> None:
    values = np.asarray(values, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(_pack_header(b"APKK", [n_heads, depth, width, values.shape[0]], digest))
        fh.write(np.ascontiguousarray(values).tobytes())


def read_kernel(path):
    with open(path, "rb") as fh:
        (n_heads, depth, width, n), digest = _read_header(fh, b"APKK", 4, str(path))
        values = _read_array(fh, (n, n), str(path))
    return values, {"n_heads": int(n_heads), "depth": int(depth), "width": int(width)}, digest


def write_order_parameters(path, params: OrderParameterSet, digest: str = ZERO_DIGEST) -> None:
    with open(path, "wb") as fh:
        fh.write(_pack_header(b"APKU", [params.n_heads, params.depth,
                                        len(params.matrices)], digest))
        for m in params.matrices:
            fh.write(struct.pack("<Q", m.shape[0]))
            fh.write(np.ascontiguousarray(m, dtype=np.float64).tobytes())


def read_order_parameters(path):
    with open(path, "rb") as fh:
        (n_heads, depth, n_levels), digest = _read_header(fh, b"APKU", 3, str(path))
        mats = []
        for _ in range(n_levels):
            raw = fh.read(8)
            if len(raw) < 8:
                raise FormatError(f"{path}: truncated level header")
            (side,) = struct.unpack("<Q", raw)
            mats.append(_read_array(fh, (side, side), str(path)))
    return OrderParameterSet(matrices=mats, n_heads=int(n_heads), depth=int(depth)), digest


def write_csv(path, digest: str, header: list, rows: list) -> None:
    buf = io.StringIO()
    buf.write(f"# config_digest={digest}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def read_csv_digest(path) -> str:
    with open(path) as fh:
        first = fh.readline().strip()
    if not first.startswith("# config_digest="):
        raise FormatError(f"{path}: missing config digest comment line")
    return first.split("=", 1)[1]


def write_u1_csv(path, u1: np.ndarray, n_heads: int, depth: int,
                 digest: str = ZERO_DIGEST, path_flats=None) -> None:
    """U^(1) with one-based path labels on rows and columns."""
    u1 = np.asarray(u1, dtype=float)
    if path_flats is None:
        path_flats = np.arange(u1.shape[0])
    labels = [path_label(path_from_flat(int(i), n_heads, depth)) for i in path_flats]
    rows = [[labels[i]] + [float(v) for v in u1[i]] for i in range(u1.shape[0])]
    write_csv(path, digest, ["path"] + labels, rows)


def write_trace_csv(path, trace, digest: str = ZERO_DIGEST) -> None:
    rows = [
        [i, float(a), float(e), float(g), float(n)]
        for i, (a, e, g, n) in enumerate(zip(trace.actions, trace.entropies,
                                             trace.energies, trace.grad_norms))
    ]
    write_csv(path, digest, ["iteration", "action", "entropy", "energy", "grad_norm"], rows)


def write_predictor_csv(path, report, digest: str = ZERO_DIGEST) -> None:
    rows = [
        [i, float(m), float(v), int(l)]
        for i, (m, v, l) in enumerate(zip(report.means, report.variances, report.eval_labels))
    ]
    write_csv(path, digest, ["example", "mean", "variance", "label"], rows)


def write_alignment_csv(path, eigenvalues, overlaps, digest: str = ZERO_DIGEST) -> None:
    rows = [[i, float(e), float(o)] for i, (e, o) in enumerate(zip(eigenvalues, overlaps))]
    write_csv(path, digest, ["rank", "eigenvalue", "overlap"], rows)


def write_head_scores_csv(path, table, digest: str = ZERO_DIGEST) -> None:
    rows = [
        [int(l), int(h) + 1, float(s), float(n)]
        for l, h, s, n in zip(table.layers, table.heads, table.scores, table.normalized)
    ]
    write_csv(path, digest, ["layer", "head", "score", "normalized"], rows)


def write_sweep_csv(path, result, digest: str = ZERO_DIGEST) -> None:
    rows = [
        [r["temperature"], "" if r["accuracy"] is None else float(r["accuracy"]),
         r["converged"], r["error"]]
        for r in result.rows
    ]
    write_csv(path, digest, ["temperature", "accuracy", "converged", "error"], rows)


def write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
