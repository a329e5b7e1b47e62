"""Command-line front door: eval, sim, verify, report and run (a RunConfig file).

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Sequence

import ijson
import numpy as np
import orjson

import ibm_core as core
import specfun
from flow import run_suite, write_rollup
from mc_engine import (
    HistogramBins,
    PathGrid,
    RngSpec,
    estimate_many,
    killed_density_histogram,
    simulate_conditioned,
    simulate_ensemble,
)
from specfun import ConvergenceError, DomainError
from utility import (
    FORMATS,
    ConfigError,
    RunConfig,
    configure_logging,
    expand_grid,
    format_number,
    load_config,
    parse_values,
    thread_cap,
)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    """Bad target, arity or input file; reported with exit code 2."""


# ---------- eval targets ----------

@dataclass(frozen=True)
class EvalTarget:
    params: tuple[str, ...]
    fn: Callable[..., float]
    help: str
    uses_phi: bool = False
    integers: frozenset[str] = field(default_factory=frozenset)


def _s(kw: Dict[str, Any]) -> core.PhaseState:
    return core.PhaseState(kw["x"], kw["y"])


EVAL_TARGETS: Dict[str, EvalTarget] = {
    "h": EvalTarget(("x", "y"), lambda **k: core.h_eval(_s(k)), "harmonic function h(x, y), x >= 0"),
    "two_sided_h": EvalTarget(("x", "y"), lambda **k: core.two_sided_h(_s(k)), "h(x, y) or h(-x, -y)"),
    "p_t": EvalTarget(("t", "x", "y", "u", "v"),
                      lambda **k: core.transition_density(k["t"], _s(k), core.PhaseState(k["u"], k["v"])),
                      "free transition density"),
    "q_t": EvalTarget(("t", "x", "y", "u", "v"),
                      lambda **k: core.q_density(k["t"], _s(k), core.PhaseState(k["u"], k["v"])),
                      "p_t(u, v) - p_t(u, -v)"),
    "drift": EvalTarget(("x", "y"), lambda **k: core.conditioned_drift(_s(k)), "conditioned drift (1/h) dh/dy"),
    "survival": EvalTarget(("t", "x", "y"), lambda **k: core.survival_asymptotic(k["t"], _s(k)),
                           "C h(x, y) t^(-1/4)"),
    "nth_passage": EvalTarget(("t", "n", "b"), lambda **k: core.nth_passage_asymptotic(k["t"], k["n"], k["b"], k["decomposed"]),
                              "P_(0,b)(T^(n) > t) asymptotic", integers=frozenset({"n"})),
    "general_nth_passage": EvalTarget(
        ("t", "n", "x", "y"), lambda **k: core.general_nth_passage_asymptotic(k["t"], k["n"], _s(k), k["decomposed"]),
        "n-th passage asymptotic from (x, y)", integers=frozenset({"n"})),
    "nth_passage_density": EvalTarget(("n", "b", "t", "z"),
                                      lambda **k: core.nth_passage_joint_density(k["n"], k["b"], k["t"], k["z"]),
                                      "joint density of (T^(n), |B|/sqrt(t))", integers=frozenset({"n"})),
    "nth_passage_density_asymptotic": EvalTarget(
        ("n", "b", "t", "z"),
        lambda **k: core.nth_passage_density_asymptotic(k["n"], k["b"], k["t"], k["z"], k["decomposed"]),
        "large-t joint density", integers=frozenset({"n"})),
    "first_passage_density": EvalTarget(("y", "t", "z"), lambda **k: core.first_passage_density(k["y"], k["t"], k["z"]),
                                        "self-start (T_0, B_T0) density"),
    "self_start_survival": EvalTarget(("w", "r"), lambda **k: core.self_start_survival(k["w"], k["r"]),
                                      "P_(0,w)(T_0 > r)"),
    "q_hit": EvalTarget(("x", "y", "a"), lambda **k: core.q_hit_probability(_s(k), k["a"]), "Q(T_a < inf)"),
    "lemma_hbta": EvalTarget(("x", "y", "a"), lambda **k: core.lemma_hbta_rhs(_s(k), k["a"]), "E[h(a, B_Ta)]"),
    "q_passage_weight": EvalTarget(("x", "y", "a", "z"), lambda **k: core.passage_weight_q(_s(k), k["a"], k["z"]),
                                   "Q/P density ratio of (T_a, B_Ta): h(a, z) / h(x, y)"),
    "q_sigma_weight": EvalTarget(("x", "y", "b", "u"), lambda **k: core.sigma_weight_q(_s(k), k["b"], k["u"]),
                                 "Q/P density ratio of (sigma_b, X_sigma_b): h(u, b) / h(x, y)"),
    "phi_cap_lastpassage": EvalTarget(("x", "y"), lambda **k: core.phi_cap_lastpassage(_s(k), k["phi"]),
                                      "Phi for the last-zero penalisation", uses_phi=True),
    "phi_cap_supremum": EvalTarget(("x", "y"), lambda **k: core.phi_cap_supremum(_s(k), k["phi"]),
                                   "Phi for the supremum penalisation", uses_phi=True),
    "lastpassage_martingale": EvalTarget(("t", "g", "x", "y"),
                                         lambda **k: core.martingale_lastpassage(k["t"], k["g"], _s(k), k["phi"]),
                                         "M_t with last zero g", uses_phi=True),
    "supremum_martingale": EvalTarget(("s", "x", "y"), lambda **k: core.martingale_supremum(k["s"], _s(k), k["phi"]),
                                      "M with running supremum s", uses_phi=True),
    "s_infinity_law": EvalTarget(("x", "y", "c"), lambda **k: core.s_infinity_law(_s(k), k["phi"], k["c"]),
                                 "Q^phi(S_inf > c)", uses_phi=True),
    "s_infinity_atom": EvalTarget(("x", "y"), lambda **k: core.s_infinity_atom(_s(k), k["phi"]),
                                  "Q^phi(S_inf = x)", uses_phi=True),
    "penalised_mean": EvalTarget(("t", "x", "y"),
                                 lambda **k: core.penalised_mean_asymptotic(k["t"], _s(k), k["phi"], k["kind"]),
                                 "E[phi(g)] or E[phi(S_t)] asymptotic", uses_phi=True),
    "hyp_u": EvalTarget(("a", "b", "z"), lambda **k: specfun.hyp_u(k["a"], k["b"], k["z"]), "Tricomi U(a, b, z)"),
    "bessel_k_imag": EvalTarget(("gamma", "a"), lambda **k: specfun.bessel_k_imag(k["gamma"], k["a"]),
                                "K_{i gamma}(a)"),
    "lebedev": EvalTarget(("k", "a"), lambda **k: specfun.lebedev_integral(k["k"], k["a"]),
                          "int gamma K_{i gamma}(a) sinh/cosh^k", integers=frozenset({"k"})),
    "passage_kernel": EvalTarget(("n", "a"), lambda **k: specfun.passage_kernel_integral(k["n"], k["a"]),
                               "Macdonald integral of the n-th passage density", integers=frozenset({"n"})),
    "sech_transform": EvalTarget(("k", "u"), lambda **k: specfun.sech_pow_cos_transform(k["k"], k["u"]),
                                 "int cos(gamma u) / cosh(pi gamma / 3)^k", integers=frozenset({"k"})),
    "kernel_constant": EvalTarget(("k",), lambda **k: specfun.kernel_constant(k["k"]),
                                "kernel constant C_(k-1)", integers=frozenset({"k"})),
    "small_a_coefficient": EvalTarget(("k",), lambda **k: specfun.small_a_coefficient(k["k"]),
                                      "small-a coefficient", integers=frozenset({"k"})),
}
EVAL_TARGETS["survival_asymptotic"] = EVAL_TARGETS["survival"]

NUMERIC_FLAGS = sorted({p for t in EVAL_TARGETS.values() for p in t.params})


def _phi(args: argparse.Namespace) -> core.PenaltyWeight:
    text = args.phi
    if text is None:
        raise UsageError("this target needs --phi 'z0:v0,z1:v1,...' or --phi @file.json")
    if text.startswith("@"):
        path = Path(text[1:])
        try:
            data = orjson.loads(path.read_bytes())
        except OSError as exc:
            raise UsageError(f"cannot read {path}: {exc.strerror}") from exc
        return core.PenaltyWeight(tuple((float(z), float(v)) for z, v in data))
    return core.PenaltyWeight.parse(text)


def cmd_eval(args: argparse.Namespace) -> tuple[List[str], List[List[Any]]]:
    """Evaluate a formula on the cartesian product of its numeric flags."""
    target = EVAL_TARGETS.get(args.target)
    if target is None:
        raise UsageError(f"unknown eval target {args.target!r}; known: {', '.join(sorted(EVAL_TARGETS))}")
    given = {name for name in NUMERIC_FLAGS if getattr(args, name) is not None}
    missing = [p for p in target.params if p not in given]
    extra = sorted(given - set(target.params))
    if missing or extra:
        raise UsageError(f"{args.target} takes --{' --'.join(target.params)}"
                         + (f"; missing {', '.join(missing)}" if missing else "")
                         + (f"; unexpected {', '.join(extra)}" if extra else ""))
    axes = {p: parse_values(getattr(args, p)) for p in target.params}
    fixed: Dict[str, Any] = {"decomposed": args.decomposed, "kind": args.kind}
    if target.uses_phi:
        fixed["phi"] = _phi(args)
    rows = []
    for point in expand_grid(axes):
        kw = {p: int(v) if p in target.integers else v for p, v in point.items()}
        rows.append([kw[p] for p in target.params] + [target.fn(**kw, **fixed)])
    return [*target.params, "value"], rows


# ---------- sim scenarios ----------

SCENARIOS = ("first_passage", "survival", "nth_passage", "killed_histogram", "conditioned_paths")


def cmd_sim(args: argparse.Namespace) -> tuple[List[str], List[List[Any]]]:
    start = core.PhaseState(args.x, args.y)
    rng = RngSpec(args.seed)
    threads = args.threads
    if args.scenario == "first_passage":
        grid = PathGrid(args.dt, args.horizon)
        result = simulate_ensemble(start, grid, args.n_paths, rng.generator(0), levels=(args.level,), stop_when_done=True)
        times = result.first_passage(args.level)
        edges = np.linspace(0.0, args.horizon, args.bins + 1)
        counts, _ = np.histogram(times[~np.isnan(times)], bins=edges)
        width = np.diff(edges)
        return ["t_lo", "t_hi", "count", "density"], [
            [float(lo), float(hi), int(c), float(c / (args.n_paths * w))]
            for lo, hi, c, w in zip(edges[:-1], edges[1:], counts, width)
        ]
    if args.scenario in ("survival", "nth_passage"):
        times = sorted(parse_values(args.t or "1,10,100"))
        count = args.n if args.scenario == "nth_passage" else 1
        grid = PathGrid(args.dt, times[-1], args.growth)

        def functional(res):
            hits = res.passage_times[args.level]
            return np.column_stack([np.isnan(hits[:, k]) | (hits[:, k] > t) for k in range(count) for t in times])

        est = estimate_many(functional, start, grid, args.n_paths, rng, threads=threads, levels=(args.level,),
                            count=count, checkpoints=times, stop_when_done=True)
        labels = [(k + 1, t) for k in range(count) for t in times]
        return ["n", "t", "survival", "stderr"], [[k, t, e.mean, e.stderr] for (k, t), e in zip(labels, est)]
    if args.scenario == "killed_histogram":
        t = float(parse_values(args.t or "1")[0])
        bins = HistogramBins.uniform((0.0, args.u_max), (-args.v_max, args.v_max), args.bins, args.bins)
        hist = killed_density_histogram(start, t, bins, args.n_paths, rng, dt=args.dt, threads=threads)
        rows = []
        for i in range(bins.u_edges.size - 1):
            for j in range(bins.v_edges.size - 1):
                rows.append([float(bins.u_edges[i]), float(bins.u_edges[i + 1]), float(bins.v_edges[j]),
                             float(bins.v_edges[j + 1]), float(hist.density[i, j]), float(hist.stderr[i, j])])
        return ["u_lo", "u_hi", "v_lo", "v_hi", "density", "stderr"], rows
    if args.scenario == "conditioned_paths":
        if args.sign * args.x <= 0:
            raise UsageError(f"conditioned_paths needs sign*x > 0, got x={args.x} sign={args.sign}")
        grid = PathGrid(args.dt, args.horizon)
        rows = []
        for k in range(args.n_paths):
            path = simulate_conditioned(start, grid, rng.generator(k), sign=args.sign)
            rows.extend([k, t, x, y] for t, x, y in path.samples)
        return ["path", "t", "x", "y"], rows
    raise UsageError(f"unknown scenario {args.scenario!r}; known: {', '.join(SCENARIOS)}")


# ---------- verify / report ----------

def cmd_verify(args: argparse.Namespace) -> int:
    ids = [i for i in (args.check or "").split(",") if i]
    try:
        reports = run_suite(ids, args.kind, seed=args.seed, scale=args.scale, threads=args.threads,
                            output_dir=args.output or "reports")
    except KeyError as exc:
        raise UsageError(exc.args[0]) from exc
    print(f"{'check':<28} {'result':<6} {'runtime':>9}")
    for r in reports:
        print(f"{r['check_id']:<28} {'pass' if r['pass'] else 'FAIL':<6} {r['runtime']:>8.2f}s")
    failed = [r["check_id"] for r in reports if not r["pass"]]
    if failed:
        print(f"\n[VERIFY] {len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_FAIL
    print(f"\n[VERIFY] all {len(reports)} check(s) passed")
    return EXIT_OK


def read_report(path: Path) -> Dict[str, Any]:
    """Stream one JSON report from disk."""
    try:
        with path.open("rb") as fh:
            items = list(ijson.items(fh, "", use_float=True))
    except FileNotFoundError as exc:
        raise UsageError(f"report file not found: {path}") from exc
    except ijson.JSONError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from exc
    if len(items) != 1 or not isinstance(items[0], dict) or "check_id" not in items[0]:
        raise UsageError(f"{path} does not hold a check report")
    return items[0]


def merge_reports(paths: Sequence[Path]) -> List[Dict[str, Any]]:
    """Later files replace earlier reports with the same check_id."""
    merged: Dict[str, Dict[str, Any]] = {}
    for path in paths:
        report = read_report(path)
        merged[report["check_id"]] = report
    return [merged[k] for k in sorted(merged)]


def cmd_report(args: argparse.Namespace) -> int:
    if not args.inputs:
        raise UsageError("report needs at least one JSON report file")
    reports = merge_reports([Path(p) for p in args.inputs])
    out_dir = Path(args.output or "report_out")
    summary = write_rollup(reports, out_dir / "summary.csv")
    for r in reports:
        ts = r.get("details", {}).get("t")
        n = min(len(r["observed"]), len(r["expected"]))
        xs = ts if isinstance(ts, list) and len(ts) == n else list(range(n))
        with (out_dir / f"{r['check_id']}.series.csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "observed", "expected"])
            for x, o, e in zip(xs, r["observed"], r["expected"]):
                writer.writerow([format_number(x), format_number(o), format_number(e)])
    print(f"[REPORT] merged {len(reports)} report(s) into {summary}")
    return EXIT_OK


# ---------- output ----------

def render_table(columns: Sequence[str], rows: Sequence[Sequence[Any]], fmt: str) -> bytes:
    if fmt == "json":
        return orjson.dumps([dict(zip(columns, row)) for row in rows], option=orjson.OPT_INDENT_2) + b"\n"
    buf = io.StringIO(newline="")
    writer = csv.writer(buf)
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_number(v) if isinstance(v, (int, float)) else v for v in row])
    return buf.getvalue().encode("utf-8")


def emit(columns: Sequence[str], rows: Sequence[Sequence[Any]], args: argparse.Namespace, config: RunConfig) -> None:
    blob = render_table(columns, rows, args.format)
    if not args.output:
        sys.stdout.write(blob.decode("utf-8"))
        return
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(blob)
    # config and digest travel beside every artifact
    sidecar = out.with_name(out.name + ".config.json")
    sidecar.write_bytes(orjson.dumps({"config": config.to_mapping(), "digest": config.digest},
                                     option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS))
    logger.info("[SIM] wrote %d row(s) to %s (digest %s)", len(rows), out, config.digest[:12])


# ---------- argument parsing ----------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: IBM_TOOLKIT_THREADS or CPUs)")
    common.add_argument("--log-level", default=None, help="logging level (default: IBM_TOOLKIT_LOG_LEVEL or WARNING)")
    common.add_argument("--seed", type=int, default=20240611)
    common.add_argument("-o", "--output", default=None, help="output file (eval/sim) or directory (verify/report)")
    common.add_argument("--format", choices=FORMATS, default="csv")

    parser = argparse.ArgumentParser(prog="ibmtoolkit", description="Integrated Brownian motion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    ev = sub.add_parser("eval", parents=[common], help="evaluate a closed-form quantity")
    ev.add_argument("target", help=f"one of: {', '.join(sorted(EVAL_TARGETS))}")
    for name in NUMERIC_FLAGS:
        ev.add_argument(f"--{name}", default=None, help="value, comma list or start:stop:num")
    ev.add_argument("--phi", default=None, help="penalty weight 'z0:v0,z1:v1,...' or @file.json")
    ev.add_argument("--kind", choices=("lastpassage", "supremum"), default="lastpassage")
    ev.add_argument("--decomposed", action="store_true", help="apply the 2^(1-n) sech-power factor")

    sim = sub.add_parser("sim", parents=[common], help="run a Monte Carlo scenario")
    sim.add_argument("scenario", choices=SCENARIOS)
    sim.add_argument("--x", type=float, default=0.0)
    sim.add_argument("--y", type=float, default=1.0)
    sim.add_argument("--n-paths", dest="n_paths", type=int, default=10000)
    sim.add_argument("--dt", type=float, default=0.01)
    sim.add_argument("--growth", type=float, default=0.0)
    sim.add_argument("--horizon", type=float, default=10.0)
    sim.add_argument("--level", type=float, default=0.0)
    sim.add_argument("--bins", type=int, default=20)
    sim.add_argument("--t", default=None, help="checkpoint time(s)")
    sim.add_argument("--n", type=int, default=2, help="passages per path (nth_passage)")
    sim.add_argument("--u-max", dest="u_max", type=float, default=4.0)
    sim.add_argument("--v-max", dest="v_max", type=float, default=3.0)
    sim.add_argument("--sign", type=int, choices=(1, -1), default=1)

    ver = sub.add_parser("verify", parents=[common], help="run verification checks")
    ver.add_argument("--check", default=None, help="comma-separated check ids (default: all)")
    ver.add_argument("--kind", choices=("analytic", "stochastic"), default=None)
    ver.add_argument("--scale", type=float, default=1.0, help="multiplier on path counts")

    rep = sub.add_parser("report", parents=[common], help="merge JSON check reports")
    rep.add_argument("inputs", nargs="*")

    run = sub.add_parser("run", parents=[common], help="execute a RunConfig file")
    run.add_argument("config")
    return parser


def config_to_argv(config: RunConfig) -> List[str]:
    """Translate a RunConfig into the equivalent command line."""
    params = dict(config.params)
    argv = [config.command]
    for key in ("target", "scenario"):
        if key in params:
            argv.append(str(params.pop(key)))
    inputs = params.pop("inputs", [])
    argv.extend(str(p) for p in inputs)
    for key, value in params.items():
        flag = "--" + key.replace("_", "-") if key in ("n_paths", "u_max", "v_max", "log_level") else "--" + key
        if value is True:
            argv.append(flag)
        elif value is False or value is None:
            continue
        elif isinstance(value, list):
            argv += [flag, ",".join(str(v) for v in value)]
        else:
            argv += [flag, str(value)]
    argv += ["--seed", str(config.seed), "--format", config.format]
    if config.output_path:
        argv += ["--output", config.output_path]
    return argv


def _args_config(args: argparse.Namespace) -> RunConfig:
    skip = {"command", "threads", "log_level", "seed", "output", "format", "config"}
    params = {k: v for k, v in sorted(vars(args).items()) if k not in skip and v is not None}
    return RunConfig(args.command, params, args.seed, args.output, args.format)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        configure_logging(args.log_level)
        thread_cap(args.threads)
        if args.command == "run":
            config = load_config(args.config)
            return main(config_to_argv(config))
        if args.command == "verify":
            return cmd_verify(args)
        if args.command == "report":
            return cmd_report(args)
        columns, rows = cmd_eval(args) if args.command == "eval" else cmd_sim(args)
        emit(columns, rows, args, _args_config(args))
        return EXIT_OK
    except (UsageError, ConfigError, DomainError) as exc:
        print(f"ibmtoolkit {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConvergenceError as exc:
        print(f"ibmtoolkit {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
