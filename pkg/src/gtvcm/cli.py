"""Command-line front end: simulate, fit, replicate, summarize.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 dataset
validation failure.  Every command leaves a manifest.json in its output
directory with enough information to re-run it; manifests carry timings and
are the only output file not guaranteed byte-identical across re-runs.
"""

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .data import (ConfigError, DataFormatError, McmcConfig, PriorConfig,
                   load_run_config, parse_kv_text, read_dataset, split_config,
                   validate, write_dataset)
from .harness import (ScenarioSpec, build_rep_dataset, run_replications,
                      write_metrics, write_rep_artifacts)
from .sampler import read_chain_output, run_chain, write_chain_output
from .summarize import (curve_summary, inclusion_summary, write_curve_summaries,
                        write_inclusion_summary, write_scalar_summaries)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_VALIDATION = 4


def _file_hash(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        digest.update(fh.read())
    return digest.hexdigest()


def write_manifest(out_dir, payload):
    """Atomic manifest write: temp file then rename."""
    payload = dict(payload)
    payload.setdefault("tool_version", __version__)
    payload.setdefault("numpy_version", np.__version__)
    path = os.path.join(out_dir, "manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_scenario(path, seed_override=None):
    with open(path) as fh:
        mapping = parse_kv_text(fh.read(), source=path)
    (spec,) = split_config(mapping, ScenarioSpec)
    if seed_override is not None:
        spec = dataclasses.replace(spec, base_seed=seed_override)
    return spec


def load_configs(path, seed_override=None):
    if path is None:
        priors, mcmc = PriorConfig(), McmcConfig()
    else:
        priors, mcmc = load_run_config(path)
    if seed_override is not None:
        mcmc = dataclasses.replace(mcmc, seed=seed_override)
    return priors, mcmc


def cmd_simulate(args):
    spec = load_scenario(args.scenario, args.seed)
    os.makedirs(args.out, exist_ok=True)
    start = time.perf_counter()
    dataset, truth, record = build_rep_dataset(spec, args.rep)
    write_dataset(args.out, dataset)
    with open(os.path.join(args.out, "truth.csv"), "w", newline="") as fh:
        fh.write("id,y_true,eta\n")
        for i in range(dataset.n):
            fh.write(f"{i + 1},{int(truth.y_true[i])},{truth.eta[i]!r}\n")
    write_manifest(args.out, {
        "command": "simulate",
        "scenario": os.path.abspath(args.scenario),
        "scenario_hash": _file_hash(args.scenario),
        "rep_index": args.rep,
        "base_seed": spec.base_seed,
        "n_individuals": dataset.n,
        "n_pools": len(dataset.pools),
        "tests_used": record.tests_used,
        "prevalence": truth.prevalence,
        "elapsed_s": time.perf_counter() - start,
        "complete": True,
    })
    return EXIT_OK


def _fit_outputs(out_dir, chain, n_covariates):
    write_chain_output(out_dir, chain)
    curves = [(f"psi{d}", curve_summary(chain.grid, chain.psi_grid[:, d, :]))
              for d in range(chain.n_coef)]
    write_curve_summaries(os.path.join(out_dir, "curve_summary.csv"), curves)
    incl = inclusion_summary(chain.delta1[:, 1:], chain.delta2[:, 1:])
    write_inclusion_summary(os.path.join(out_dir, "inclusion.csv"), incl,
                            names=[f"x{j + 1}" for j in range(n_covariates)])
    scalars = [("sigma", chain.sigma)]
    for k in range(chain.se.shape[1]):
        scalars.append((f"se{k + 1}", chain.se[:, k]))
        scalars.append((f"sp{k + 1}", chain.sp[:, k]))
    for d in range(chain.n_coef):
        scalars.append((f"psi_bar{d}", chain.psi_bar[:, d]))
    write_scalar_summaries(os.path.join(out_dir, "scalar_summary.csv"), scalars)


def cmd_fit(args):
    priors, mcmc = load_configs(args.config, args.seed)
    dataset = read_dataset(args.data)
    if priors.age_center != 0.0 or priors.age_scale != 1.0:
        dataset.ages = (dataset.ages - priors.age_center) / priors.age_scale
    problems = validate(dataset)
    if problems:
        for msg in problems:
            print(f"validation: {msg}", file=sys.stderr)
        return EXIT_VALIDATION
    os.makedirs(args.out, exist_ok=True)
    start = time.perf_counter()
    chain = run_chain(dataset, priors, mcmc)
    _fit_outputs(args.out, chain, dataset.n_covariates)
    write_manifest(args.out, {
        "command": "fit",
        "data_dir": os.path.abspath(args.data),
        "config": os.path.abspath(args.config) if args.config else None,
        "config_hash": _file_hash(args.config) if args.config else None,
        "seed": mcmc.seed,
        "n_iter": mcmc.n_iter,
        "burn_in": mcmc.burn_in,
        "thin": mcmc.thin,
        "n_draws": chain.n_draws,
        "accept_phi": [float(a) for a in chain.accept_phi],
        "elapsed_s": time.perf_counter() - start,
        "complete": not chain.interrupted,
    })
    return EXIT_OK


def cmd_replicate(args):
    spec = load_scenario(args.scenario, args.seed)
    priors, mcmc = load_configs(args.config)
    os.makedirs(args.out, exist_ok=True)
    start = time.perf_counter()
    metrics, results = run_replications(spec, priors, mcmc, jobs=args.jobs)
    for result in results:
        write_rep_artifacts(os.path.join(args.out, f"rep{result.rep_index:03d}"),
                            result)
    write_metrics(os.path.join(args.out, "metrics.csv"), metrics)
    write_manifest(args.out, {
        "command": "replicate",
        "scenario": os.path.abspath(args.scenario),
        "scenario_hash": _file_hash(args.scenario),
        "config": os.path.abspath(args.config) if args.config else None,
        "config_hash": _file_hash(args.config) if args.config else None,
        "base_seed": spec.base_seed,
        "reps": spec.reps,
        "jobs": args.jobs,
        "n_failed": metrics.n_failed,
        "failures": metrics.failures,
        "elapsed_s": time.perf_counter() - start,
        "complete": metrics.n_failed == 0,
    })
    return EXIT_OK


def cmd_summarize(args):
    chain = read_chain_output(args.fit)
    os.makedirs(args.out, exist_ok=True)
    start = time.perf_counter()
    _fit_outputs(args.out, chain, chain.n_coef - 1)
    write_manifest(args.out, {
        "command": "summarize",
        "fit_dir": os.path.abspath(args.fit),
        "n_draws": chain.n_draws,
        "elapsed_s": time.perf_counter() - start,
        "complete": True,
    })
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gtvcm",
        description="Varying-coefficient regression for group-testing data")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="write one simulated dataset")
    p_sim.add_argument("--scenario", required=True)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--rep", type=int, default=0)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.set_defaults(func=cmd_simulate)

    p_fit = sub.add_parser("fit", help="fit the model to a dataset directory")
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--config", default=None)
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--seed", type=int, default=None)
    p_fit.set_defaults(func=cmd_fit)

    p_rep = sub.add_parser("replicate", help="run a replication study")
    p_rep.add_argument("--scenario", required=True)
    p_rep.add_argument("--config", default=None)
    p_rep.add_argument("--out", required=True)
    p_rep.add_argument("--jobs", type=int, default=1)
    p_rep.add_argument("--seed", type=int, default=None)
    p_rep.set_defaults(func=cmd_replicate)

    p_sum = sub.add_parser("summarize", help="recompute summaries from draws")
    p_sum.add_argument("--fit", required=True)
    p_sum.add_argument("--out", required=True)
    p_sum.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
