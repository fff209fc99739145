"""Command-line front end.

Subcommands wrap the library stages file-to-file:

    gen-data   task config -> dataset.apkd + attention.apkw
    pipeline   dataset + attention -> features, solved U, predictor, alignment, head scores
    sweep      temperature grid -> per-temperature accuracy table
    sample     dataset + attention -> HMC posterior, empirical U and predictor
    verify     recompute the config digest and check every artifact in a run directory

Shared flags: --config PATH, --seed INT, --out DIR, --force, --strict,
--threads INT.  The resolved configuration is written next to the outputs and
its sha256 digest is embedded in every artifact; reruns with identical config
and seed produce byte-identical files.  The APK_LOG environment variable sets
the log level.  Exit codes: 0 success, 2 config error, 3 numeric failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import fileio
from .analysis import head_scores
from .data import HmcTaskConfig, build_hmc_attention, gen_hmc_dataset
from .kernel import PathFeatureMatrix, compute_features, kernel_task_alignment, total_kernel
from .model import Readout
from .predictor import evaluate_predictor, temperature_sweep
from .sampler import HmcConfig, empirical_order_parameter, empirical_predictor, hmc_sample
from .solver import OrderParameterSet, SolverConfig, SolverFailure, solve_saddle

log = logging.getLogger("attnpaths")

DEFAULT_CONFIG = {
    "seed": 0,
    "model": {
        "n_hidden": 10,
        "n_heads": 2,
        "depth": 2,
        "readout": "token",
        "t_star": 1,
        "sigma2": 1.0,
    },
    "task": {
        "kind": "hmc",
        "chain_length": 30,
        "feature_width": 200,
        "p_plus": 0.3,
        "p_minus": 0.7,
        "sigma_par": 1.0,
        "sigma_perp": 1.0,
        "n_train": 100,
        "n_test": 1000,
        "beta": 10.0,
    },
    "attention": {"source": "hmc-default", "path": None},
    "files": {"dataset": "dataset.apkd", "attention": "attention.apkw"},
    "solver": {
        "alpha": None,
        "gp_limit": False,
        "temperature": 0.01,
        "max_iter": 20000,
        "tolerance": 1e-7,
        "warmup_iters": 10,
        "jitter": 1e-3,
        "restarts": 1,
        "learning_rates": None,
    },
    "sampler": {
        "n_chains": 10,
        "n_warmup": 1000,
        "n_samples": 1000,
        "thin": 10,
        "n_leapfrog": 32,
        "step_size": 0.01,
        "temperature": 0.01,
        "prior_only": False,
        "n_eval_examples": None,
    },
    "temperature_grid": [0.01, 0.025, 0.05, 0.075, 0.1, 0.25, 0.5, 0.75, 1.0, 1.5],
}


def _merge_config(user: dict) -> dict:
    merged = json.loads(json.dumps(DEFAULT_CONFIG))
    for key, val in user.items():
        if key not in merged:
            raise ValueError(f"unknown config key {key!r}")
        if isinstance(merged[key], dict):
            if not isinstance(val, dict):
                raise ValueError(f"config section {key!r} must be a mapping")
            for sub, subval in val.items():
                if sub not in merged[key]:
                    raise ValueError(f"unknown config key {key}.{sub}")
                merged[key][sub] = subval
        else:
            merged[key] = val
    return merged


def _load_config(args) -> dict:
    user = {}
    if args.config is not None:
        with open(args.config) as fh:
            user = json.load(fh)
        if not isinstance(user, dict):
            raise ValueError(f"{args.config}: config must be a JSON object")
    config = _merge_config(user)
    if args.seed is not None:
        config["seed"] = int(args.seed)
    return config


def _prepare_out(args, config: dict, outputs: list) -> tuple[Path, str]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    existing = [str(out / name) for name in outputs if (out / name).exists()]
    if existing and not args.force:
        raise FileExistsError(f"refusing to overwrite {existing[0]} (rerun with --force)")
    digest = fileio.config_digest(config)
    fileio.write_json(out / "config.resolved.json", {"config": config, "config_digest": digest})
    return out, digest


def _task_config(config: dict) -> HmcTaskConfig:
    task = config["task"]
    if task["kind"] != "hmc":
        raise ValueError(f"unsupported task kind {task['kind']!r} (the CLI generates the hidden-chain task)")
    return HmcTaskConfig(
        chain_length=task["chain_length"], feature_width=task["feature_width"],
        p_plus=task["p_plus"], p_minus=task["p_minus"],
        sigma_par=task["sigma_par"], sigma_perp=task["sigma_perp"],
        n_train=task["n_train"], n_test=task["n_test"], beta=task["beta"],
    )


def _readout(config: dict) -> Readout:
    model = config["model"]
    if model["readout"] == "average":
        return Readout.average()
    return Readout.token(model["t_star"])


def _solver_config(config: dict, n_train: int) -> SolverConfig:
    s = config["solver"]
    alpha = s["alpha"]
    if alpha is None:
        alpha = n_train / config["model"]["n_hidden"]
    kwargs = {}
    if s["learning_rates"] is not None:
        kwargs["learning_rates"] = tuple(s["learning_rates"])
    return SolverConfig(
        alpha=float(alpha), temperature=s["temperature"], sigma2=config["model"]["sigma2"],
        max_iter=s["max_iter"], tolerance=s["tolerance"], warmup_iters=s["warmup_iters"],
        jitter=s["jitter"], restarts=s["restarts"], seed=config["seed"], **kwargs,
    )


def _resolve_input(out: Path, name: str) -> Path:
    p = Path(name)
    if not p.is_absolute():
        p = out / p
    if not p.exists():
        raise FileNotFoundError(f"input file {p} not found")
    return p


def _load_inputs(out: Path, config: dict):
    dataset, _ = fileio.read_dataset(_resolve_input(out, config["files"]["dataset"]))
    specs, _ = fileio.read_attention_specs(_resolve_input(out, config["files"]["attention"]))
    model = config["model"]
    if len(specs) != model["depth"] or len(specs[0]) != model["n_heads"]:
        raise ValueError(
            f"attention file has {len(specs)} layers x {len(specs[0])} heads, "
            f"config wants {model['depth']} x {model['n_heads']}")
    return dataset, specs


def _features_threaded(tokens: np.ndarray, specs, readout: Readout, n_train: int,
                       threads: int) -> PathFeatureMatrix:
    if threads <= 1 or len(tokens) < 2 * threads:
        return compute_features(tokens, specs, readout, n_train)
    splits = np.array_split(np.arange(len(tokens)), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(
            lambda idx: compute_features(tokens[idx], specs, readout, 0).values, splits))
    values = np.concatenate(parts, axis=2)
    return PathFeatureMatrix(values=values, n_train=n_train,
                             n_heads=len(specs[0]), depth=len(specs))


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    out, digest = _prepare_out(args, config, [config["files"]["dataset"], config["files"]["attention"]])
    task = _task_config(config)
    model = config["model"]
    log.info("generating hidden-chain dataset (P=%d train, %d test)", task.n_train, task.n_test)
    dataset = gen_hmc_dataset(task, config["seed"])
    fileio.write_dataset(out / config["files"]["dataset"], dataset, digest)
    attn = config["attention"]
    if attn["source"] == "hmc-default":
        specs = build_hmc_attention(task, model["n_heads"], model["depth"], config["seed"])
    elif attn["source"] == "file":
        specs, _ = fileio.read_attention_specs(attn["path"])
    else:
        raise ValueError(f"unknown attention source {attn['source']!r}")
    fileio.write_attention_specs(out / config["files"]["attention"], specs, digest)
    log.info("wrote %s and %s", config["files"]["dataset"], config["files"]["attention"])
    return 0


def _pipeline_features(out: Path, config: dict, digest: str, threads: int):
    dataset, specs = _load_inputs(out, config)
    readout = _readout(config)
    features = _features_threaded(dataset.tokens, specs, readout, dataset.n_train, threads)
    fileio.write_features(out / "features.apkf", features, digest)
    return dataset, specs, features


def cmd_pipeline(args) -> int:
    config = _load_config(args)
    outputs = ["features.apkf", "u1.apku", "u1.csv", "trace.csv", "predictor.csv",
               "predictor_summary.json", "alignment.csv", "head_scores.csv"]
    out, digest = _prepare_out(args, config, outputs)
    dataset, specs, features = _pipeline_features(out, config, digest, args.threads)
    if dataset.n_examples == dataset.n_train:
        raise ValueError("the pipeline needs test examples; the dataset has none")
    y_train = dataset.train_labels.astype(float)
    solver_config = _solver_config(config, dataset.n_train)

    gp = config["solver"]["gp_limit"] or solver_config.alpha == 0.0
    if gp:
        log.info("GP limit requested; using the closed-form order parameters")
        params = OrderParameterSet.gp_solution(features.n_heads, features.depth,
                                               solver_config.sigma2)
        trace = None
    else:
        log.info("solving the saddle point at alpha=%.4g", solver_config.alpha)
        params, trace = solve_saddle(features, y_train, solver_config)
        log.info("solver finished: converged=%s iterations=%d lr=%.4g",
                 trace.converged, trace.n_iter, trace.learning_rate)

    fileio.write_order_parameters(out / "u1.apku", params, digest)
    fileio.write_u1_csv(out / "u1.csv", params.u1, features.n_heads, features.depth, digest)
    if trace is not None:
        fileio.write_trace_csv(out / "trace.csv", trace, digest)

    report = evaluate_predictor(
        params.u1, features, y_train, dataset.test_indices, dataset.test_labels,
        solver_config.temperature,
        metadata={"alpha": solver_config.alpha, "seed": config["seed"]},
    )
    fileio.write_predictor_csv(out / "predictor.csv", report, digest)
    fileio.write_json(out / "predictor_summary.json", {
        "accuracy": report.accuracy, "temperature": report.temperature,
        "n_train": report.n_train, "n_eval": int(len(report.means)),
        "alpha": solver_config.alpha, "solver_used": not gp,
        "converged": None if trace is None else bool(trace.converged),
        "config_digest": digest,
    })

    k_train = total_kernel(params.u1, features.train()).values
    evals, overlaps = kernel_task_alignment(k_train, y_train)
    fileio.write_alignment_csv(out / "alignment.csv", evals, overlaps, digest)
    fileio.write_head_scores_csv(
        out / "head_scores.csv", head_scores(params.u1, features.n_heads, features.depth), digest)
    log.info("pipeline complete: accuracy=%.4f", report.accuracy)
    return 0


def cmd_sweep(args) -> int:
    config = _load_config(args)
    out, digest = _prepare_out(args, config, ["features.apkf", "sweep.csv", "sweep_summary.json"])
    dataset, specs, features = _pipeline_features(out, config, digest, args.threads)
    if dataset.n_examples == dataset.n_train:
        raise ValueError("the sweep needs validation examples; the dataset has none")
    solver_config = _solver_config(config, dataset.n_train)
    result = temperature_sweep(
        features, dataset.train_labels.astype(float), dataset.test_indices,
        dataset.test_labels, solver_config, grid=tuple(config["temperature_grid"]))
    fileio.write_sweep_csv(out / "sweep.csv", result, digest)
    fileio.write_json(out / "sweep_summary.json", {
        "best_temperature": result.best_temperature, "best_accuracy": result.best_accuracy,
        "config_digest": digest,
    })
    log.info("sweep complete: best T=%.4g accuracy=%.4f",
             result.best_temperature, result.best_accuracy)
    return 0


def cmd_sample(args) -> int:
    config = _load_config(args)
    outputs = ["u_est.csv", "u_est.apkk", "chains.csv", "predictor_empirical.csv",
               "sample_summary.json"]
    out, digest = _prepare_out(args, config, outputs)
    dataset, specs = _load_inputs(out, config)
    readout = _readout(config)
    s = config["sampler"]
    hmc_config = HmcConfig(
        n_hidden=config["model"]["n_hidden"], temperature=s["temperature"],
        sigma2=config["model"]["sigma2"], n_chains=s["n_chains"], n_warmup=s["n_warmup"],
        n_samples=s["n_samples"], thin=s["thin"], n_leapfrog=s["n_leapfrog"],
        step_size=s["step_size"], prior_only=s["prior_only"], seed=config["seed"],
    )
    train = dataset.tokens[: dataset.n_train]
    log.info("sampling %d chains x (%d warmup + %d samples)",
             hmc_config.n_chains, hmc_config.n_warmup, hmc_config.n_samples)
    samples = hmc_sample(train, dataset.train_labels.astype(float), specs, readout, hmc_config)

    u_est = empirical_order_parameter(samples)
    fileio.write_u1_csv(out / "u_est.csv", u_est, samples.n_heads, samples.depth, digest)
    fileio.write_kernel(out / "u_est.apkk", u_est, samples.n_heads, samples.depth,
                        samples.width, digest)
    fileio.write_csv(out / "chains.csv", digest,
                      ["chain", "acceptance", "divergences", "step_size"],
                      [[i, float(a), int(d), float(e)] for i, (a, d, e) in
                       enumerate(zip(samples.acceptance, samples.divergences,
                                     samples.step_sizes))])

    n_eval = dataset.n_examples - dataset.n_train
    if s["n_eval_examples"] is not None:
        n_eval = min(n_eval, int(s["n_eval_examples"]))
    rows = []
    if n_eval > 0:
        idx = dataset.test_indices[:n_eval]
        means, variances = empirical_predictor(samples, dataset.tokens[idx], specs, readout)
        rows = [[int(i), float(m), float(v), int(l)] for i, m, v, l in
                zip(idx, means, variances, dataset.labels[idx])]
    fileio.write_csv(out / "predictor_empirical.csv", digest,
                      ["example", "mean", "variance", "label"], rows)

    div_frac = float(samples.divergences.sum()) / (
        hmc_config.n_chains * (hmc_config.n_warmup + hmc_config.n_samples))
    fileio.write_json(out / "sample_summary.json", {
        "n_kept": samples.n_kept, "acceptance": [float(a) for a in samples.acceptance],
        "divergence_fraction": div_frac, "step_sizes": [float(e) for e in samples.step_sizes],
        "config_digest": digest,
    })
    log.info("sampling complete: %d kept draws, divergence fraction %.3g",
             samples.n_kept, div_frac)
    if args.strict and div_frac > 0.10:
        raise FloatingPointError(
            f"strict mode: divergence fraction {div_frac:.3g} exceeds 10%")
    return 0


def cmd_verify(args) -> int:
    out = Path(args.out)
    record_path = out / "config.resolved.json"
    with open(record_path) as fh:
        record = json.load(fh)
    want = fileio.config_digest(record["config"])
    if want != record.get("config_digest"):
        raise ValueError(f"{record_path}: recorded digest does not match the config")
    checked = 0
    mismatched = []
    readers = {
        ".apkd": lambda p: fileio.read_dataset(p)[1],
        ".apkw": lambda p: fileio.read_attention_specs(p)[1],
        ".apkf": lambda p: fileio.read_features(p)[1],
        ".apkk": lambda p: fileio.read_kernel(p)[2],
        ".apku": lambda p: fileio.read_order_parameters(p)[1],
        ".csv": fileio.read_csv_digest,
    }
    for path in sorted(out.iterdir()):
        reader = readers.get(path.suffix)
        if reader is None:
            if path.suffix == ".json" and path.name != "config.resolved.json":
                with open(path) as fh:
                    payload = json.load(fh)
                got = payload.get("config_digest", fileio.ZERO_DIGEST)
            else:
                continue
        else:
            got = reader(path)
        checked += 1
        if got != want:
            mismatched.append(path.name)
    if mismatched:
        raise ValueError(f"digest mismatch in: {', '.join(mismatched)}")
    print(f"verified {checked} artifacts against digest {want[:12]}...")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnpaths",
        description="attention-path kernels: data generation, saddle solving, sampling",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, needs_config in [
        ("gen-data", cmd_gen_data, True),
        ("pipeline", cmd_pipeline, True),
        ("sweep", cmd_sweep, True),
        ("sample", cmd_sample, True),
        ("verify", cmd_verify, False),
    ]:
        p = sub.add_parser(name)
        p.set_defaults(fn=fn)
        if needs_config:
            p.add_argument("--config", default=None, help="JSON config file (defaults apply)")
            p.add_argument("--seed", type=int, default=None, help="override the config seed")
            p.add_argument("--force", action="store_true", help="overwrite existing outputs")
            p.add_argument("--strict", action="store_true", help="fail on quality warnings")
            p.add_argument("--threads", type=int, default=1, help="worker thread cap")
        p.add_argument("--out", required=True, help="run directory")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("APK_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, KeyError, json.JSONDecodeError) as err:
        log.error("config error: %s", err)
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (np.linalg.LinAlgError, SolverFailure, FloatingPointError) as err:
        log.error("numeric failure: %s", err)
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3
    except OSError as err:
        log.error("i/o error: %s", err)
        print(f"i/o error: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
