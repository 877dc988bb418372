"""Command-line front end: dataset generation, runs, sweeps, checks, envelopes.

Exit codes: 0 success, 1 usage or invalid input, 2 divergence (partial traces
are still written), 3 check violation, 4 I/O or file-format failure. The
environment variable LOCALGD_THREADS caps sweep parallelism (default: machine
cores); every cell is internally deterministic either way.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import math
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__, diagnostics, optim, schedules
from .data import (
    PartitionSpec,
    SyntheticSpec,
    compute_margin,
    gen_synthetic,
    load_dataset,
    load_mnist_idx,
    partition_heterogeneous,
    save_dataset,
)
from .errors import (
    DivergenceError,
    IdxFormatError,
    LocalGDError,
    SeparabilityError,
)
from .optim import RoundTrace, RunConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DIVERGENCE = 2
EXIT_VIOLATION = 3
EXIT_IO = 4

OPTIMIZERS = ("local-gd", "two-stage", "local-gf")
POLICIES = ("small", "large", "two-stage", "explicit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt(x):
    return "" if x is None else f"{x:.17g}"


def _csv_meta_line(config, fingerprint, seed):
    """One comment line carrying provenance; parsers skip lines starting '#'."""
    echo = {k: v for k, v in asdict(config).items() if v is not None}
    blob = json.dumps(echo, sort_keys=True, separators=(",", ":"))
    return f"# localgd {__version__} seed={seed} dataset={fingerprint} config={blob}"


def _write_csv(path, traces, M, meta=None):
    cols = ["r", "stage", "eta", "F"]
    cols += [f"F_{m + 1}" for m in range(M)]
    cols += ["grad_norm", "w_norm", "min_margin", "L"]
    cols += [f"rho_{m + 1}" for m in range(M)]
    cols += [f"a_{m + 1}" for m in range(M)]
    lines = ([meta] if meta else []) + [",".join(cols)]
    for t in traces:
        row = [str(t.r), str(t.stage), _fmt(t.eta_used), _fmt(t.global_loss)]
        row += [_fmt(v) for v in t.client_losses]
        row += [_fmt(t.grad_norm), _fmt(t.iterate_norm), _fmt(t.min_margin), _fmt(t.lyapunov)]
        row += [_fmt(v) for v in (t.rho if t.rho is not None else [None] * M)]
        row += [_fmt(v) for v in (t.a if t.a is not None else [None] * M)]
        lines.append(",".join(row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _json_dump(path, doc):
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def _add_run_flags(p):
    p.add_argument("--dataset", required=True, help="dataset JSON file")
    p.add_argument("--optimizer", choices=OPTIMIZERS, default="local-gd")
    p.add_argument("--policy", choices=POLICIES, default="explicit")
    p.add_argument("--R", type=int, required=True)
    p.add_argument("--K", type=int, default=1)
    p.add_argument("--H", type=float, default=0.25)
    p.add_argument("--eta", type=float)
    p.add_argument("--eta1", type=float)
    p.add_argument("--eta2", type=float)
    p.add_argument("--r0", type=int)
    p.add_argument("--lambda", dest="lam", type=float, help="two-stage r0 = floor(lambda*K)")
    p.add_argument("--averaging", choices=optim.AVERAGING_MODES, default="final_iterate")
    p.add_argument("--gf-substeps", type=int, default=1000)
    p.add_argument("--gf-method", choices=optim.GF_METHODS, default="auto")
    p.add_argument("--engine", choices=optim.ENGINES, default="numpy")
    p.add_argument("--trace-every", type=int, default=1)
    p.add_argument("--w0", help="comma-separated initial weights (default: zeros)")
    p.add_argument("--seed", type=int)
    p.add_argument("--checks", help="comma-separated check names to run afterwards")
    p.add_argument("--emit", default="csv,json", help="artifacts to write (csv,json)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--name", default="run", help="basename for output files")
    p.add_argument("--config", help="JSON file with defaults for these flags")


def build_parser():
    parser = _Parser(prog="localgd", description=__doc__)
    parser.add_argument("--version", action="version", version=f"localgd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a dataset file")
    gen_sub = gen.add_subparsers(dest="source", required=True)
    g_syn = gen_sub.add_parser("synthetic")
    g_syn.add_argument("--delta", type=float, required=True)
    g_syn.add_argument("--g", type=float, required=True)
    g_syn.add_argument("--out", required=True)
    g_mn = gen_sub.add_parser("mnist")
    g_mn.add_argument("--images", required=True, help="IDX image file")
    g_mn.add_argument("--labels", required=True, help="IDX label file")
    g_mn.add_argument("--M", type=int, default=5)
    g_mn.add_argument("--n", type=int, default=200, help="samples per client")
    g_mn.add_argument("--n-total", type=int, help="pool size (default M*n)")
    g_mn.add_argument("--s", type=float, default=0.05, help="uniform share of each client")
    g_mn.add_argument("--seed", type=int, default=0)
    g_mn.add_argument("--out", required=True)

    run = sub.add_parser("run", help="run one optimizer and export traces")
    _add_run_flags(run)

    sweep = sub.add_parser("sweep", help="run a (K x policy) grid")
    _add_run_flags(sweep)
    sweep.add_argument("--K-grid", help="comma-separated K values (overrides --K)")
    sweep.add_argument("--policy-grid", help="comma-separated policies (overrides --policy)")

    chk = sub.add_parser("check", help="re-verify analysis checks on run artifacts")
    chk.add_argument("--run", required=True, help="summary JSON written by `run`")
    chk.add_argument("--dataset", required=True)
    chk.add_argument("--checks", help="comma-separated check names (default: all applicable)")
    chk.add_argument("--out", help="write the report JSON here instead of stdout")

    env = sub.add_parser("envelope", help="evaluate a closed-form rate envelope")
    env.add_argument("--kind", required=True,
                     choices=("two-stage", "baseline-global", "baseline-local", "gf"))
    env.add_argument("--gamma", type=float)
    env.add_argument("--K", type=int)
    env.add_argument("--R", type=int)
    env.add_argument("--r0", type=int)
    env.add_argument("--eta2", type=float)
    env.add_argument("--eta", type=float)
    env.add_argument("--r", type=float)
    env.add_argument("--variant", choices=("main", "warm"), default="main")
    env.add_argument("--dataset", help="dataset file (gf kind)")
    return parser


def _resolve_policy(args):
    """Map CLI policy flags onto concrete stepsizes for the chosen optimizer."""
    kind = args.policy.replace("-", "_")
    policy = schedules.make_policy(
        kind, args.K, H=args.H, lam=args.lam,
        eta=args.eta, eta1=args.eta1, eta2=args.eta2, r0=args.r0,
    )
    if args.optimizer == "two-stage":
        if policy.kind in ("small", "large"):
            raise UsageError("two-stage optimizer needs a two-stage or explicit policy")
        eta1 = policy.eta1 if policy.eta1 is not None else args.eta1
        eta2 = policy.eta2 if policy.eta2 is not None else args.eta2
        r0 = policy.r0 if policy.r0 is not None else args.r0
        if eta1 is None or eta2 is None or r0 is None:
            raise UsageError("two-stage runs need eta1, eta2 and r0 (or --policy two-stage --lambda)")
        return {"eta1": eta1, "eta2": eta2, "r0": r0}
    if policy.eta is None:
        raise UsageError(f"optimizer {args.optimizer} needs a single stepsize policy")
    return {"eta": policy.eta}


def _run_config(args):
    stepsizes = _resolve_policy(args)
    w0 = None
    if getattr(args, "w0", None):
        w0 = tuple(float(v) for v in args.w0.split(","))
    return RunConfig(
        R=args.R,
        K=args.K,
        averaging=args.averaging,
        H=args.H,
        gf_substeps=args.gf_substeps,
        gf_method=args.gf_method,
        engine=args.engine,
        trace_every=args.trace_every,
        w0=w0,
        seed=args.seed,
        **stepsizes,
    )


def _execute(dataset, args):
    config = _run_config(args)
    if args.optimizer == "local-gd":
        return optim.run_local_gd(dataset, config)
    if args.optimizer == "two-stage":
        return optim.run_two_stage(dataset, config)
    return optim.run_local_gf(dataset, config)


def _envelope_block(dataset, args, config, result):
    """Envelope values relevant to this run; entries are None when inapplicable."""
    out = {}
    gamma = dataset.margin[0] if dataset.margin else None
    if gamma is None:
        return out
    out["gamma"] = gamma
    if args.optimizer == "two-stage" and config.R > config.r0:
        out["two_stage_final"] = diagnostics.envelope_two_stage(
            config.eta2, gamma, config.K, config.R, config.r0
        )
    if args.optimizer == "local-gd":
        out["baseline_global"] = diagnostics.envelope_baseline("global", gamma, config.K, config.R)
        out["baseline_local"] = diagnostics.envelope_baseline("local", gamma, config.K, config.R)
    if args.optimizer == "local-gf" and dataset.M == 2 and all(
        Z.shape[0] == 1 for Z in dataset.clients
    ):
        from . import specialfn

        gammas, U = optim._margin_geometry(dataset)
        state = specialfn.make_gf_state(gammas, U, config.eta * config.K)
        tc = specialfn.theory_constants(state, config.eta * config.K)
        out["gf_constants"] = {
            "L0": tc.L0, "H0": tc.H0, "nu": tc.nu, "tau": tc.tau,
            "tau0": tc.tau0, "tau1": tc.tau1, "c": tc.c,
        }
        if math.isfinite(tc.tau) and config.R > tc.tau:
            out["gf_final"] = tc.envelope(config.R, "main")
    return out


def _summary_doc(args, config, dataset, dataset_path, result, diverged_at, checks):
    return {
        "artifact": {"name": "localgd", "version": __version__},
        "command": args.command,
        "config": {
            "optimizer": args.optimizer,
            "policy": args.policy,
            **{k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(config).items()},
        },
        "dataset": {
            "path": str(dataset_path),
            "fingerprint": dataset.fingerprint(),
            "gamma": dataset.margin[0] if dataset.margin else None,
        },
        "seed": args.seed,
        "result": {
            "rounds_completed": result.traces[-1].r if result.traces else 0,
            "diverged": diverged_at is not None,
            "divergence_round": diverged_at,
            "final_loss": result.traces[-1].global_loss if result.traces else None,
            "final_grad_norm": result.traces[-1].grad_norm if result.traces else None,
        },
        "envelopes": _envelope_block(dataset, args, config, result) if diverged_at is None else {},
        "checks": [r.to_dict() for r in checks],
        "traces": [asdict(t) for t in result.traces],
    }


def _cmd_run(args):
    dataset = load_dataset(args.dataset)
    config = _run_config(args)
    diverged_at = None
    try:
        result = _execute(dataset, args)
    except DivergenceError as err:
        diverged_at = err.round_index
        result = optim.RunResult(
            traces=err.traces,
            final_weights=np.full(dataset.d, np.nan),
            averaged_weights=None,
            config=config,
            dataset_fingerprint=dataset.fingerprint(),
            seed=args.seed,
            optimizer=args.optimizer,
        )
    checks = []
    if args.checks and diverged_at is None:
        names = [c.strip() for c in args.checks.split(",") if c.strip()]
        checks = diagnostics.check_run(result, dataset, checks=names)

    os.makedirs(args.out_dir, exist_ok=True)
    emit = {e.strip() for e in args.emit.split(",")}
    base = os.path.join(args.out_dir, args.name)
    if "csv" in emit:
        meta = _csv_meta_line(config, dataset.fingerprint(), args.seed)
        _write_csv(base + ".csv", result.traces, dataset.M, meta=meta)
    if "json" in emit:
        _json_dump(base + ".json", _summary_doc(args, config, dataset, args.dataset, result, diverged_at, checks))
    if diverged_at is not None:
        print(f"divergence at round {diverged_at}; partial traces written", file=sys.stderr)
        return EXIT_DIVERGENCE
    if any(not r.passed and not r.informational for r in checks):
        print("check violation; see summary JSON", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def _sweep_cell(payload):
    argv, name = payload
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        code = _cmd_run(args)
        return {"name": name, "exit": code, "csv": name + ".csv", "summary": name + ".json"}
    except UsageError as err:
        return {"name": name, "exit": EXIT_USAGE, "error": str(err)}
    except DivergenceError as err:
        return {"name": name, "exit": EXIT_DIVERGENCE, "error": str(err)}
    except (LocalGDError, ValueError, OSError) as err:
        return {"name": name, "exit": EXIT_IO, "error": str(err)}


def _cmd_sweep(args):
    ks = [int(k) for k in (args.K_grid or str(args.K)).split(",")]
    policies = (args.policy_grid or args.policy).split(",")
    if not ks or not policies:
        raise UsageError("empty sweep grid")
    cells = []
    for K in ks:
        for policy in policies:
            name = f"cell_K{K}_{policy.replace('-', '_')}"
            argv = ["run", "--dataset", args.dataset, "--optimizer", args.optimizer,
                    "--policy", policy, "--R", str(args.R), "--K", str(K),
                    "--H", str(args.H), "--averaging", args.averaging,
                    "--gf-substeps", str(args.gf_substeps), "--gf-method", args.gf_method,
                    "--engine", args.engine, "--trace-every", str(args.trace_every),
                    "--emit", args.emit, "--out-dir", args.out_dir, "--name", name]
            for flag, val in (("--eta", args.eta), ("--eta1", args.eta1),
                              ("--eta2", args.eta2), ("--r0", args.r0),
                              ("--lambda", args.lam), ("--seed", args.seed),
                              ("--w0", args.w0)):
                if val is not None:
                    argv += [flag, str(val)]
            if args.checks:
                argv += ["--checks", args.checks]
            cells.append((argv, name))
    os.makedirs(args.out_dir, exist_ok=True)
    workers = int(os.environ.get("LOCALGD_THREADS", os.cpu_count() or 1))
    if workers > 1 and len(cells) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_cell, cells))
    else:
        results = [_sweep_cell(c) for c in cells]
    index = {
        "artifact": {"name": "localgd", "version": __version__},
        "dataset": args.dataset,
        "grid": {"K": ks, "policy": policies},
        "cells": results,
    }
    _json_dump(os.path.join(args.out_dir, "index.json"), index)
    codes = [r["exit"] for r in results]
    return max(codes) if codes else EXIT_OK


def _cmd_gen_data(args):
    if args.source == "synthetic":
        ds = gen_synthetic(SyntheticSpec(delta=args.delta, g=args.g))
        compute_margin(ds)
        extra = {"source": {"kind": "synthetic", "delta": args.delta, "g": args.g},
                 "seed": None}
    else:
        raw = load_mnist_idx(args.images, args.labels)
        n_total = args.n_total if args.n_total is not None else args.M * args.n
        spec = PartitionSpec(n_total=n_total, M=args.M, n_per_client=args.n,
                             similarity_s=args.s, seed=args.seed)
        ds = partition_heterogeneous(raw, spec)
        compute_margin(ds)
        extra = {"source": {"kind": "mnist", "M": args.M, "n": args.n,
                            "n_total": n_total, "s": args.s},
                 "seed": args.seed}
    extra["artifact"] = {"name": "localgd", "version": __version__}
    save_dataset(ds, args.out, extra=extra)
    print(f"wrote {args.out} (gamma={ds.margin[0]:.6g})")
    return EXIT_OK


def _load_run_artifacts(path):
    with open(path) as f:
        doc = json.load(f)
    try:
        traces = [RoundTrace(**t) for t in doc["traces"]]
        cfg_doc = {k: v for k, v in doc["config"].items() if k not in ("optimizer", "policy")}
        config = RunConfig(**cfg_doc)
    except (KeyError, TypeError) as err:
        raise IdxFormatError(f"{path}: not a run summary file ({err})") from None
    result = optim.RunResult(
        traces=traces,
        final_weights=np.zeros(0),
        averaged_weights=None,
        config=config,
        dataset_fingerprint=doc.get("dataset", {}).get("fingerprint", ""),
        seed=doc.get("seed"),
        optimizer=doc["config"].get("optimizer", "local-gd"),
    )
    return result


def _cmd_check(args):
    result = _load_run_artifacts(args.run)
    dataset = load_dataset(args.dataset)
    names = None
    if args.checks:
        names = [c.strip() for c in args.checks.split(",") if c.strip()]
        unknown = [n for n in names if n not in diagnostics.RUN_CHECKS]
        if unknown:
            raise UsageError(
                f"unknown check(s) {', '.join(unknown)}; "
                f"available: {', '.join(diagnostics.RUN_CHECKS)}"
            )
    reports = diagnostics.check_run(result, dataset, checks=names)
    doc = {
        "artifact": {"name": "localgd", "version": __version__},
        "run": str(args.run),
        "dataset_fingerprint": dataset.fingerprint(),
        "reports": [r.to_dict() for r in reports],
    }
    if args.out:
        _json_dump(args.out, doc)
    else:
        print(json.dumps(doc, indent=2))
    if any(not r.passed and not r.informational for r in reports):
        return EXIT_VIOLATION
    return EXIT_OK


def _cmd_envelope(args):
    if args.kind == "two-stage":
        for flag in ("gamma", "K", "R", "r0", "eta2"):
            if getattr(args, flag) is None:
                raise UsageError(f"envelope --kind two-stage needs --{flag}")
        value = diagnostics.envelope_two_stage(args.eta2, args.gamma, args.K, args.R, args.r0)
        doc = {"kind": args.kind, "value": value}
    elif args.kind in ("baseline-global", "baseline-local"):
        for flag in ("gamma", "K", "R"):
            if getattr(args, flag) is None:
                raise UsageError(f"envelope --kind {args.kind} needs --{flag}")
        value = diagnostics.envelope_baseline(args.kind.split("-")[1], args.gamma, args.K, args.R)
        doc = {"kind": args.kind, "value": value}
    else:
        if args.dataset is None or args.eta is None or args.K is None or args.r is None:
            raise UsageError("envelope --kind gf needs --dataset, --eta, --K and --r")
        dataset = load_dataset(args.dataset)
        from . import specialfn

        gammas, U = optim._margin_geometry(dataset)
        etaK = args.eta * args.K
        state = specialfn.make_gf_state(gammas, U, etaK)
        tc = specialfn.theory_constants(state, etaK)
        value = tc.envelope(args.r, variant=args.variant)
        doc = {"kind": args.kind, "variant": args.variant, "value": value,
               "constants": {"L0": tc.L0, "H0": tc.H0, "nu": tc.nu,
                             "tau": tc.tau, "tau0": tc.tau0, "tau1": tc.tau1}}
    print(json.dumps(doc, indent=2))
    return EXIT_OK


def _apply_config_file(parser, argv):
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        raise UsageError("--config needs a file argument")
    with open(argv[idx + 1]) as f:
        defaults = json.load(f)
    if not isinstance(defaults, dict):
        raise UsageError("config file must hold a JSON object")
    out = list(argv)
    for key, value in defaults.items():
        flag = "--" + key.replace("_", "-")
        if flag not in argv and value is not None:
            out += [flag, str(value)]
    return out


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if argv and argv[0] in ("run", "sweep"):
            argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "check":
            return _cmd_check(args)
        return _cmd_envelope(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (OSError, json.JSONDecodeError, IdxFormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except (SeparabilityError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
