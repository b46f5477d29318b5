"""Command-line entry point: verification suites, descent runs, optimizer
comparisons, loop simulation, Hessian spectra and scaling benchmarks.

All outputs are machine-readable. CSV files carry one leading comment line
embedding the full run configuration (seed included), so any run can be
reproduced from its own output; JSON reports embed the same under "config".
Exit codes: 0 success, 1 verification failure, 2 usage error.

The environment variable ENERGY_ATTN_THREADS caps internal parallelism
(0 = auto). The current implementation executes sweeps serially, which
satisfies any cap; the value is recorded in run metadata.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
import time

import numpy as np

from energy_attention import attention as attn
from energy_attention import descent as de
from energy_attention import energy as en
from energy_attention import equivalence as eq
from energy_attention import loopsim as ls
from energy_attention import numkit as nk

SCHEMA_VERSION = 1

DESCEND_HEADER = "step,energy,grad_norm"
COMPARE_HEADER = "seed,optimizer,iters_to_tol,final_energy"
BENCH_HEADER = "variant,N,d,H,median_ns,per-token_ns"
SPECTRUM_HEADER = "index,full_hessian,psd_part,nsd_part"
LOOP_HEADER = "iteration,objective"
TRAIN_HEADER = "epoch,cross_entropy,free_energy,total,weight_norm,head_norm"


class UsageError(Exception):
    pass


def thread_cap() -> int:
    """Parallelism cap from ENERGY_ATTN_THREADS; 0 means automatic."""
    raw = os.environ.get("ENERGY_ATTN_THREADS", "0")
    try:
        cap = int(raw)
    except ValueError as err:
        raise UsageError("ENERGY_ATTN_THREADS must be an integer") from err
    if cap < 0:
        raise UsageError("ENERGY_ATTN_THREADS must be nonnegative")
    return cap


# ---------------------------------------------------------------------------
# output plumbing
# ---------------------------------------------------------------------------

def _write_text(path: str | None, text: str) -> None:
    """Write to stdout, or atomically to a file (temp + rename)."""
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(config: dict, header: str, rows: list[str]) -> str:
    lines = ["# config: " + json.dumps(config, sort_keys=True), header]
    lines.extend(rows)
    return "\n".join(lines) + "\n"


def _json_doc(command: str, config: dict, payload: dict) -> str:
    doc = {"schema_version": SCHEMA_VERSION, "command": command,
           "config": config, "seed": config.get("seed")}
    doc.update(payload)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _config_from(args, keys) -> dict:
    config = {key: getattr(args, key) for key in keys}
    config["threads"] = thread_cap()
    return config


# ---------------------------------------------------------------------------
# shared instance construction
# ---------------------------------------------------------------------------

def _random_instance(rng: nk.Rng, energy_kind: str, dim: int, tokens_n: int,
                     heads: int, temperature: float, radius: float = 1.0):
    """Random (spec, z0, tokens) for descent-style commands."""
    z = nk.sample_hypersphere(rng, dim, radius)
    token_mat = np.stack(
        [nk.sample_hypersphere(rng, dim, radius) for _ in range(tokens_n)], axis=1)
    if heads == 1:
        weight = rng.normal_matrix(dim, dim, 1.0 / math.sqrt(dim))
        if energy_kind == "elastic":
            spec = en.elastic_spec(weight, temperature)
        elif energy_kind == "inner":
            spec = en.inner_product_spec(weight, temperature)
        elif energy_kind == "square-sum":
            spec = en.square_sum_spec(weight, temperature)
        else:
            raise UsageError(f"unknown energy {energy_kind!r}")
        return spec, z, token_mat
    if dim % heads != 0:
        raise UsageError("heads must divide the dimension")
    head_dim = dim // heads
    scale = 1.0 / math.sqrt(dim)
    w1 = tuple(rng.normal_matrix(head_dim, dim, scale) for _ in range(heads))
    w2 = tuple(rng.normal_matrix(head_dim, dim, scale) for _ in range(heads))
    if energy_kind == "elastic":
        spec = en.per_head_elastic_spec(w1, w2, temperature)
    elif energy_kind == "inner":
        spec = en.per_head_inner_spec(w1, w2, temperature)
    else:
        raise UsageError("square-sum energy is single-head only")
    return spec, z, token_mat


_OPTIMIZERS = {
    "vanilla": lambda a: de.Vanilla(a.lr),
    "momentum": lambda a: de.Momentum(a.lr, a.beta),
    "nag": lambda a: de.Nag(a.lr, a.beta),
    "newton-exact": lambda a: de.NewtonSubspace(a.lr, "exact", a.eps),
    "newton-taylor1": lambda a: de.NewtonSubspace(a.lr, "taylor1", a.eps),
}


def _make_optimizer(name: str, args) -> object:
    if name not in _OPTIMIZERS:
        raise UsageError(f"unknown optimizer {name!r}")
    if name.startswith("newton") and args.energy != "elastic":
        raise UsageError("Newton preconditioning requires --energy elastic")
    return _OPTIMIZERS[name](args)


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def _report_dict(report: eq.VerificationReport) -> dict:
    return {
        "claim": report.claim,
        "instances": report.instances,
        "max_abs_error": report.max_abs_error,
        "threshold": report.threshold,
        "pass": report.passed,
        "witness_seed": report.witness_seed,
    }


def cmd_verify(args) -> int:
    if args.instances < 1:
        raise UsageError("instances must be >= 1")
    cfg = eq.InstanceConfig(args.dim, args.tokens, args.heads, args.rho,
                            args.lr, args.temp)
    runners = {
        "softmax-gd": lambda: eq.verify_softmax_gd(cfg, args.instances, args.seed,
                                                   args.break_tying),
        "linear-gd": lambda: eq.verify_linear_gd(cfg, args.instances, args.seed,
                                                 args.break_tying),
        "multihead-gd": lambda: eq.verify_multihead_gd(cfg, args.instances,
                                                       args.seed, args.break_tying),
        "boltzmann-optimality": lambda: eq.boltzmann_suite(
            cfg, max(1, args.instances // 20), args.seed),
        "hessian-structure": lambda: eq.verify_hessian_structure(
            cfg, args.instances, args.seed),
    }
    names = list(runners) if args.which == "all" else [args.which]
    reports = [runners[name]() for name in names]

    config = _config_from(args, ["which", "seed", "dim", "tokens", "heads",
                                 "rho", "temp", "lr", "instances", "format"])
    results = [_report_dict(r) for r in reports]
    if args.format == "json":
        text = _json_doc("verify", config, {"results": results})
    else:
        header = "claim,instances,max_abs_error,threshold,pass,witness_seed"
        rows = [f"{r['claim']},{r['instances']},{r['max_abs_error']:.17g},"
                f"{r['threshold']:.17g},{str(r['pass']).lower()},"
                f"{'' if r['witness_seed'] is None else r['witness_seed']}"
                for r in results]
        text = _csv(config, header, rows)
    _write_text(args.out, text)
    return 0 if all(r.passed for r in reports) else 1


# ---------------------------------------------------------------------------
# descend / compare
# ---------------------------------------------------------------------------

def cmd_descend(args) -> int:
    spec, z0, token_mat = _random_instance(nk.Rng(args.seed), args.energy,
                                           args.dim, args.tokens, args.heads,
                                           args.temp)
    optimizer = _make_optimizer(args.optimizer, args)
    trace = de.descend(spec, optimizer, z0, token_mat,
                       max_iters=args.steps, tol=args.tol)
    config = _config_from(args, ["energy", "optimizer", "dim", "tokens", "heads",
                                 "lr", "beta", "steps", "tol", "seed", "format"])
    config["stop_reason"] = trace.stop_reason
    rows = [f"{k},{e:.17g},{g:.17g}" for k, e, g in trace.rows()]
    if args.format == "json":
        text = _json_doc("descend", config, {
            "stop_reason": trace.stop_reason,
            "steps": [{"step": k, "energy": e, "grad_norm": g}
                      for k, e, g in trace.rows()]})
    else:
        text = _csv(config, DESCEND_HEADER, rows)
    _write_text(args.out, text)
    return 0


def cmd_compare(args) -> int:
    names = [n.strip() for n in args.optimizers.split(",") if n.strip()]
    if not names:
        raise UsageError("at least one optimizer required")
    optimizers = [_make_optimizer(n, args) for n in names]
    rows = []
    for s in range(args.seeds):
        seed = args.seed + s
        if args.energy == "elastic" and args.heads > 1:
            # conditioned blocks: iteration counts stay comparable (see descent)
            spec, z0, token_mat = de.conditioned_multihead_instance(
                seed, args.dim, args.tokens, args.heads, args.temp)
        else:
            spec, z0, token_mat = _random_instance(nk.Rng(seed), args.energy,
                                                   args.dim, args.tokens,
                                                   args.heads, args.temp)
        table = de.compare_optimizers(spec, z0, token_mat, optimizers,
                                      budget=args.steps, tol=args.tol)
        for row in table:
            rows.append((seed, row["optimizer"], row["iters_to_tol"],
                         row["final_energy"]))
    config = _config_from(args, ["energy", "optimizers", "dim", "tokens", "heads",
                                 "lr", "beta", "steps", "tol", "seed", "seeds",
                                 "format"])
    if args.format == "json":
        text = _json_doc("compare", config, {"rows": [
            {"seed": s, "optimizer": o, "iters_to_tol": i, "final_energy": f}
            for s, o, i, f in rows]})
    else:
        text = _csv(config, COMPARE_HEADER,
                    [f"{s},{o},{i},{f:.17g}" for s, o, i, f in rows])
    _write_text(args.out, text)
    return 0


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def cmd_loop(args) -> int:
    rng = nk.Rng(args.seed)
    weight = rng.normal_matrix(args.dim, args.dim, 1.0 / math.sqrt(args.dim))
    if args.energy == "elastic":
        spec = en.elastic_spec(weight, args.temp)
    elif args.energy == "inner":
        spec = en.inner_product_spec(weight, args.temp)
    else:
        raise UsageError("loop energies are elastic or inner")
    config = _config_from(args, ["mode", "iters", "causal", "energy", "dim",
                                 "tokens", "samples", "epochs", "classes",
                                 "lr", "temp", "seed", "format"])

    if args.mode == "forward":
        token_mat = np.stack(
            [nk.sample_hypersphere(rng, args.dim, 1.0) for _ in range(args.tokens)],
            axis=1)
        cfg = ls.LoopConfig(spec, args.iters, args.lr, causal=args.causal)
        trace = ls.loop_forward(cfg, token_mat)
        config["stop_reason"] = trace.stop_reason
        rows = [f"{k},{obj:.17g}" for k, obj in enumerate(trace.objectives)]
        if args.format == "json":
            text = _json_doc("loop", config, {
                "stop_reason": trace.stop_reason,
                "objectives": list(trace.objectives)})
        else:
            text = _csv(config, LOOP_HEADER, rows)
        _write_text(args.out, text)
        return 0

    # training modes
    if args.samples < 2:
        raise UsageError("training needs at least one sample per class")
    if args.epochs < 0:
        raise UsageError("epochs must be nonnegative")
    head = rng.normal_matrix(args.dim, args.classes, 0.1)
    cfg = ls.LoopConfig(spec, args.iters, args.lr, causal=args.causal, head=head)
    if args.mode == "train-single":
        dataset = ls.two_cluster_dataset(rng, args.samples // 2, args.tokens,
                                         args.dim)
        trace = ls.alternating_optimize(cfg, dataset, args.epochs, args.lr)
    elif args.mode == "train-loop":
        dataset = []
        for tokens, label in ls.two_cluster_dataset(rng, args.samples // 2,
                                                    args.tokens, args.dim):
            labels = np.tile(label[:, None], (1, tokens.shape[1]))
            dataset.append((tokens, labels))
        trace = ls.loop_alternating_optimize(cfg, dataset, args.epochs, args.lr)
    else:
        raise UsageError(f"unknown mode {args.mode!r}")
    config["stop_reason"] = trace.stop_reason
    rows = [f"{r.epoch},{r.cross_entropy:.17g},{r.free_energy:.17g},"
            f"{r.total:.17g},{r.weight_norm:.17g},{r.head_norm:.17g}"
            for r in trace.epochs]
    if args.format == "json":
        text = _json_doc("loop", config, {
            "stop_reason": trace.stop_reason,
            "epochs": [{"epoch": r.epoch, "cross_entropy": r.cross_entropy,
                        "free_energy": r.free_energy, "total": r.total,
                        "weight_norm": r.weight_norm, "head_norm": r.head_norm}
                       for r in trace.epochs]})
    else:
        text = _csv(config, TRAIN_HEADER, rows)
    _write_text(args.out, text)
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

_BENCH_VARIANTS = ("mha", "mha2nd", "mha2nd1st", "light")


def _bench_forward(variant: str, params, cache):
    if variant == "mha":
        return lambda z, tokens: attn.mha(params, z, tokens)
    if variant == "mha2nd":
        return lambda z, tokens: attn.mha2nd_exact(params, z, tokens, cache)
    if variant == "mha2nd1st":
        return lambda z, tokens: attn.mha2nd1st(params, z, tokens, cache)
    if variant == "light":
        return lambda z, tokens: attn.light_mha2nd1st(params, z, tokens)
    raise UsageError(f"unknown variant {variant!r}")


def run_bench(variant: str, dim: int, heads: int, tokens_list: list[int],
              reps: int, seed: int, warmup: int = 3) -> tuple[list[dict], float | None]:
    """Median wall-time per forward call over ``reps`` runs after warmup.

    Returns per-N rows and the least-squares log-log slope of median time
    versus N (None when fewer than two sizes are measured).
    """
    rng = nk.Rng(seed)
    scores = "distance" if variant in ("mha2nd", "mha2nd1st") else "inner"
    params = attn.random_params(rng, dim, heads, scores=scores)
    cache = attn.range_space_cache(params)
    forward = _bench_forward(variant, params, cache)
    z = rng.normal_vector(dim) / math.sqrt(dim)
    pool = rng.normal_matrix(dim, max(tokens_list), 1.0 / math.sqrt(dim))
    token_sets = [np.ascontiguousarray(pool[:, :n]) for n in tokens_list]
    for tokens in token_sets:
        for _ in range(warmup):
            forward(z, tokens)
    # blocks of same-N calls (warm caches), blocks interleaved across sizes
    # so machine-load drift spreads over all N instead of biasing one point
    block = 5
    samples: list[list[int]] = [[] for _ in tokens_list]
    for _ in range((reps + block - 1) // block):
        for idx, tokens in enumerate(token_sets):
            forward(z, tokens)  # re-warm after the previous size
            for _ in range(block):
                start = time.perf_counter_ns()
                forward(z, tokens)
                samples[idx].append(time.perf_counter_ns() - start)
    samples = [spent[:reps] for spent in samples]
    rows = []
    for n, spent in zip(tokens_list, samples):
        median = float(np.median(spent))
        rows.append({"variant": variant, "N": n, "d": dim, "H": heads,
                     "median_ns": median, "per_token_ns": median / n})
    slope = None
    if len(tokens_list) >= 2:
        logs_n = np.log([row["N"] for row in rows])
        logs_t = np.log([row["median_ns"] for row in rows])
        slope = float(np.polyfit(logs_n, logs_t, 1)[0])
    return rows, slope


def cmd_bench(args) -> int:
    tokens_list = [int(x) for x in args.tokens_list.split(",") if x.strip()]
    if not tokens_list or any(n < 1 for n in tokens_list):
        raise UsageError("tokens-list must be positive integers")
    rows, slope = run_bench(args.variant, args.dim, args.heads, tokens_list,
                            args.reps, args.seed)
    config = _config_from(args, ["variant", "dim", "heads", "tokens_list",
                                 "reps", "seed", "format"])
    csv_rows = [f"{r['variant']},{r['N']},{r['d']},{r['H']},"
                f"{r['median_ns']:.0f},{r['per_token_ns']:.3f}" for r in rows]
    if slope is not None:
        csv_rows.append(f"{args.variant},slope,{args.dim},{args.heads},"
                        f"{slope:.6f},")
    if args.format == "json":
        text = _json_doc("bench", config, {"rows": rows, "loglog_slope": slope})
    else:
        text = _csv(config, BENCH_HEADER, csv_rows)
    _write_text(args.out, text)
    return 0


# ---------------------------------------------------------------------------
# spectrum
# ---------------------------------------------------------------------------

def cmd_spectrum(args) -> int:
    spec, z, token_mat = _random_instance(nk.Rng(args.seed), "elastic",
                                          args.dim, args.tokens, args.heads,
                                          args.temp)
    if args.energy == "inner":
        spec = en.upper_bound_spec(spec)
    psd, nsd = en.hessian_split(spec, z, token_mat)
    full = nk.sym_eigvals(psd + nsd)
    psd_eigs = nk.sym_eigvals(psd)
    nsd_eigs = nk.sym_eigvals(nsd)
    config = _config_from(args, ["energy", "dim", "tokens", "heads", "temp",
                                 "seed", "format"])
    rows = [f"{i},{full[i]:.17g},{psd_eigs[i]:.17g},{nsd_eigs[i]:.17g}"
            for i in range(args.dim)]
    if args.format == "json":
        text = _json_doc("spectrum", config, {
            "full_hessian": full.tolist(), "psd_part": psd_eigs.tolist(),
            "nsd_part": nsd_eigs.tolist()})
    else:
        text = _csv(config, SPECTRUM_HEADER, rows)
    _write_text(args.out, text)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common_output(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default=None, help="output path ('-' or omitted: stdout)")
    p.add_argument("--format", choices=("csv", "json"), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="energy-attn",
        description="Energy-based attention: verification, descent, loops, benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run claim verifiers")
    p.add_argument("which", choices=(*eq.CLAIMS, "all"))
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--tokens", type=int, default=16)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--temp", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--break-tying", action="store_true",
                   help=argparse.SUPPRESS)  # negative-control hook
    _add_common_output(p)
    p.set_defaults(func=cmd_verify, default_format="json")

    p = sub.add_parser("descend", help="minimize one energy, write the trace")
    p.add_argument("--energy", choices=("elastic", "inner", "square-sum"),
                   default="elastic")
    p.add_argument("--optimizer", choices=tuple(_OPTIMIZERS), default="vanilla")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--tokens", type=int, default=64)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--beta", type=float, default=0.9)
    p.add_argument("--eps", type=float, default=0.0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--temp", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    _add_common_output(p)
    p.set_defaults(func=cmd_descend, default_format="csv")

    p = sub.add_parser("compare", help="race optimizers over seeds")
    p.add_argument("--energy", choices=("elastic", "inner", "square-sum"),
                   default="elastic")
    p.add_argument("--optimizers", default="vanilla,momentum,nag")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--tokens", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--beta", type=float, default=0.9)
    p.add_argument("--eps", type=float, default=0.0)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--temp", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1)
    _add_common_output(p)
    p.set_defaults(func=cmd_compare, default_format="csv")

    p = sub.add_parser("loop", help="loop forward or alternating training")
    p.add_argument("--mode", choices=("forward", "train-single", "train-loop"),
                   default="forward")
    p.add_argument("--iters", type=int, default=4)
    p.add_argument("--causal", action="store_true")
    p.add_argument("--energy", choices=("elastic", "inner"), default="elastic")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--tokens", type=int, default=8)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--temp", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    _add_common_output(p)
    p.set_defaults(func=cmd_loop, default_format="csv")

    p = sub.add_parser("bench", help="wall-time scaling in the token count")
    p.add_argument("--variant", choices=_BENCH_VARIANTS, default="mha2nd1st")
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--tokens-list", default="256,512,1024,2048,4096")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    _add_common_output(p)
    p.set_defaults(func=cmd_bench, default_format="csv")

    p = sub.add_parser("spectrum", help="Hessian eigenvalues for one instance")
    p.add_argument("--energy", choices=("elastic", "inner"), default="elastic")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--tokens", type=int, default=16)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--temp", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    _add_common_output(p)
    p.set_defaults(func=cmd_spectrum, default_format="csv")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.format is None:
        args.format = args.default_format
    try:
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
