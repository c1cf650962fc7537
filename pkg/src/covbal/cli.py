"""``covbal`` command line: simulate, theory, entropy, recommend, plot.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or arguments.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, build_studies, bundled_config, load_config, parse_config
from .core import ObsStratum, SchemaError
from .montecarlo.study import (
    UNOBSERVED,
    StudyConfig,
    StudySummary,
    run_study,
    write_summary_csv,
    write_summary_json,
)
from .procedures import period
from .scenarios import CohortError, ScenarioView, load_cohort, table4_recode_map
from .theory import (
    UndefinedConditional,
    classify_regime,
    conditional_entropy,
    lambda1_sq,
    lambda2_sq,
    observed_entropy,
    strpb_variance,
    sum_of_variances,
    sum_of_variances_unweighted,
    tau_cr_sq,
    tau_sq,
    weighted_cond_entropy,
)

log = logging.getLogger("covbal")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


class UsageError(ValueError):
    pass


# -- helpers -------------------------------------------------------------------

def _threads(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("COVBAL_THREADS")
    if env is None:
        return 1
    try:
        t = int(env)
    except ValueError:
        raise UsageError(f"COVBAL_THREADS must be a positive integer, got {env!r}") from None
    if t < 1:
        raise UsageError(f"COVBAL_THREADS must be a positive integer, got {env!r}")
    return t


def _load(args) -> RunConfig:
    """Load ``--config`` (a path or a bundled name), applying CLI overrides."""
    spec = args.config
    path = Path(spec)
    if not path.exists():
        try:
            path = bundled_config(spec)
        except FileNotFoundError:
            raise ConfigError("no such config file or bundled config", spec) from None
    cfg = load_config(path)
    raw = dict(cfg.raw)
    changed = False
    if getattr(args, "replicates", None) is not None:
        raw["replicates"] = args.replicates
        changed = True
    if getattr(args, "n", None) is not None:
        raw["n"] = args.n
        changed = True
    if getattr(args, "sweep", None):
        param, _, values = args.sweep.partition("=")
        if not values:
            raise UsageError("--sweep takes PARAM=v1,v2,...")
        vals = values.split(",")
        if param == "observed":
            vals = [v.split("+") for v in vals]
        raw["sweep"] = {"param": param, "values": vals}
        changed = True
    if changed:
        # re-validate the edited document; errors point into the original file
        text = json.dumps(raw, indent=2)
        try:
            cfg = parse_config(text, cfg.source, cfg.base_dir)
        except ConfigError as exc:
            raise ConfigError(f"{exc.message} (after command-line overrides)", cfg.source, None, exc.path) from exc
    return cfg


def _write_rows(rows: list[dict], columns: Sequence[str], out, fmt: str) -> None:
    if out is None:
        return
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in columns])


def _num(x, digits=3) -> str:
    return "-" if x is None else f"{x:.{digits}f}"


def _print_table(header: Sequence[str], body: Sequence[Sequence[str]], stream) -> None:
    widths = [max(len(str(c)) for c in col) for col in zip(header, *body)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    print(fmt.format(*header), file=stream)
    for row in body:
        print(fmt.format(*row), file=stream)


def format_grid(summary: StudySummary) -> list[str]:
    """Mean(SD) grid: one row per procedure, one column per metric and group."""
    cols = []
    for r in summary.rows:
        key = (r.metric, r.group)
        if key not in cols:
            cols.append(key)
    procs = []
    for r in summary.rows:
        if r.procedure not in procs:
            procs.append(r.procedure)
    cell = {(r.procedure, r.metric, r.group): r for r in summary.rows}
    header = ["procedure"] + [f"{m} g={g}" for m, g in cols]
    body = []
    theory = {}
    for p in procs:
        row = [p]
        for m, g in cols:
            r = cell[(p, m, g)]
            row.append(f"{r.mean:.3f}({_num(r.sd)})")
            if r.theory_ref:
                theory.setdefault((r.theory_ref, p), {})[(m, g)] = r.theory_value
        body.append(row)
    for (ref, p), vals in theory.items():
        body.append([f"{ref} [{p}]"] + [_num(vals.get(k)) for k in cols])
    lines = [f"{summary.label}: n={summary.n}, R={summary.replicates}, seed={summary.seed}"]
    buf = []

    class _W:
        def write(self, s):
            buf.append(s)

    _print_table(header, body, _W())
    lines.extend("".join(buf).rstrip("\n").split("\n"))
    return lines


# -- commands ------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _load(args)
    threads = _threads(args.threads)
    fmt = args.format or cfg.raw.get("format", "csv")
    studies = build_studies(cfg, args.seed)
    out = args.out or cfg.raw.get("out") or f"covbal-{cfg.raw.get('label', 'study')}.{fmt}"
    summaries = []
    for st in studies:
        summ = run_study(st, threads)
        summaries.append(summ)
        for line in format_grid(summ):
            print(line)
        print()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    (write_summary_json if fmt == "json" else write_summary_csv)(summaries, out)
    print(f"wrote {out}")
    return EXIT_OK


THEORY_COLUMNS = ["scenario", "metric", "group", "tau_cr", "tau", "strpb_regime", "strpb_sd",
                  "lambda1_sq", "lambda2_sq"]


def theory_rows(study: StudyConfig) -> list[dict]:
    view = study.view
    pmf = view.pmf()
    rows = []
    strpb = [s for s in study.procedures if s.kind == "str_pb"]
    ratios = study.procedures[0].ratios
    blocks = np.array([
        (strpb[0].block_size(s) if strpb else period(ratios)) for s in view.schema.observed_strata()
    ], dtype=float)
    regime = classify_regime(study.n, pmf.p_s, blocks)
    for metric in study.metrics:
        rho = ratios[metric.arm - 1]
        scope = metric.scope
        rec = {"scenario": study.label, "metric": metric.id, "group": metric.arm,
               "tau_cr": math.sqrt(tau_cr_sq(pmf, rho, scope)), "tau": None,
               "strpb_regime": regime, "strpb_sd": None, "lambda1_sq": None, "lambda2_sq": None}
        try:
            if isinstance(scope, UNOBSERVED):
                rec["tau"] = math.sqrt(tau_sq(pmf, rho, scope))
            if isinstance(scope, UNOBSERVED + (ObsStratum,)) and regime != "mixed":
                v = strpb_variance(pmf, rho, scope, regime, study.n, blocks)
                rec["strpb_sd"] = math.sqrt(max(v.value, 0.0) / study.n)
            if isinstance(scope, ObsStratum):
                i = pmf.s_index(scope.s)
                rec["lambda1_sq"] = lambda1_sq(rho, int(blocks[i]))
                rec["lambda2_sq"] = lambda2_sq(rho, study.n, float(pmf.p_s[i]), int(blocks[i]))
        except UndefinedConditional as exc:
            log.warning("%s %s: %s", study.label, metric.id, exc)
        rows.append(rec)
    return rows


def cmd_theory(args) -> int:
    cfg = _load(args)
    rows = []
    for st in build_studies(cfg, args.seed):
        rows.extend(theory_rows(st))
    body = [[r["scenario"], r["metric"], str(r["group"]), _num(r["tau_cr"]), _num(r["tau"]),
             r["strpb_regime"], _num(r["strpb_sd"])] for r in rows]
    _print_table(["scenario", "metric", "g", "tau_cr", "tau", "regime", "strpb_sd"], body, sys.stdout)
    _write_rows(rows, THEORY_COLUMNS, args.out, args.format or "csv")
    return EXIT_OK


ENTROPY_COLUMNS = ["scenario", "quantity", "value"]


def entropy_report(label: str, view: ScenarioView, ratios: Sequence | None = None) -> list[dict]:
    """Long-format entropy diagnostics for one observed/unobserved split."""
    pmf = view.pmf()
    q = view.schema.q
    out = [("H_X", observed_entropy(pmf))]
    for j in range(1, q + 1):
        name = view.unobserved[j - 1]
        out.append((f"H_U{j}_given_X[{name}]", conditional_entropy(pmf, j)))
        out.append((f"SV_U{j}_given_X[{name}]", sum_of_variances_unweighted(pmf, j)))
    h, sv = conditional_entropy(pmf), sum_of_variances_unweighted(pmf)
    out += [("H_U_given_X", h), ("SV_U_given_X", sv), ("H_minus_SV", h - sv)]
    for g, rho in enumerate(ratios or (), start=1):
        hg, svg = weighted_cond_entropy(pmf, rho), sum_of_variances(pmf, rho)
        out += [(f"H_g{g}", hg), (f"SV_g{g}", svg), (f"H_minus_SV_g{g}", hg - svg)]
    return [{"scenario": label, "quantity": k, "value": float(v)} for k, v in out]


def _cohort_view(args) -> ScenarioView:
    recode = table4_recode_map() if args.recode in (None, "table4") else args.recode
    cohort = load_cohort(args.cohort, recode)
    obs = args.observed.split(",") if args.observed else None
    unobs = args.unobserved.split(",") if args.unobserved else None
    return cohort.view(obs, unobs)


def cmd_entropy(args) -> int:
    rows = []
    if args.cohort:
        rows = entropy_report(Path(args.cohort).stem, _cohort_view(args))
    elif args.config:
        cfg = _load(args)
        for st in build_studies(cfg):
            rows.extend(entropy_report(st.label, st.view, st.procedures[0].ratios))
    else:
        raise UsageError("entropy needs --config or --cohort")
    _print_table(["scenario", "quantity", "value"],
                 [[r["scenario"], r["quantity"], f"{r['value']:.6f}"] for r in rows], sys.stdout)
    _write_rows(rows, ENTROPY_COLUMNS, args.out, args.format or "csv")
    return EXIT_OK


RECOMMEND_COLUMNS = ["rank", "subset", "H_X", "H_U_given_X", "SV_U_given_X", "strata",
                     "occupied_strata", "regime"]


def recommend(view_of, candidates: Sequence[str], k: int, n: int, block_size: int) -> list[dict]:
    """Rank every k-subset of ``candidates`` by ascending H(U | X_subset)."""
    if not 1 <= k <= len(candidates):
        raise UsageError(f"k={k} must lie in 1..{len(candidates)}")
    rows = []
    for subset in itertools.combinations(candidates, k):
        view = view_of(list(subset))
        pmf = view.pmf()
        ps = pmf.p_s
        rows.append({
            "subset": "+".join(subset),
            "H_X": observed_entropy(pmf),
            "H_U_given_X": conditional_entropy(pmf),
            "SV_U_given_X": sum_of_variances_unweighted(pmf),
            "strata": view.schema.n_obs_strata,
            "occupied_strata": int((ps > 0).sum()),
            "regime": classify_regime(n, ps, np.full(ps.shape, float(block_size))),
        })
    rows.sort(key=lambda r: r["H_U_given_X"])
    for i, r in enumerate(rows, start=1):
        r["rank"] = i
    return rows


def cmd_recommend(args) -> int:
    if args.cohort:
        recode = table4_recode_map() if args.recode in (None, "table4") else args.recode
        cohort = load_cohort(args.cohort, recode)
        unobs = args.unobserved.split(",") if args.unobserved else list(cohort.default_unobserved)
        cands = args.observed.split(",") if args.observed else list(cohort.default_observed)
        n = args.n or len(cohort)

        def view_of(sub):
            return cohort.view(sub, unobs)
    elif args.config:
        cfg = _load(args)
        st = build_studies(cfg)[0]
        model = st.view.model
        unobs = list(st.view.unobserved)
        cands = args.observed.split(",") if args.observed else list(st.view.observed)
        n = args.n or st.n

        def view_of(sub):
            return model.view(sub, unobs)
    else:
        raise UsageError("recommend needs --config or --cohort")
    rows = recommend(view_of, cands, args.k, n, args.block_size)
    body = [[str(r["rank"]), r["subset"], f"{r['H_X']:.4f}", f"{r['H_U_given_X']:.4f}",
             f"{r['SV_U_given_X']:.4f}", str(r["strata"]), str(r["occupied_strata"]), r["regime"]]
            for r in rows]
    _print_table(["rank", "subset", "H(X)", "H(U|X)", "SV(U|X)", "strata", "occupied", "regime"],
                 body, sys.stdout)
    _write_rows(rows, RECOMMEND_COLUMNS, args.out, args.format or "csv")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plot import PlotError, plot_csv

    out = args.out or str(Path(args.input).with_suffix(".svg"))
    quantities = args.quantities.split(",") if args.quantities else None
    try:
        plot_csv(args.input, out, args.kind, args.metric, args.group, quantities)
    except PlotError as exc:
        print(f"covbal: PlotError: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="covbal", description="Covariate balance under randomization procedures.")
    p.add_argument("--version", action="version", version=f"covbal {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required,
                        help="config path or bundled name (study1, study2, study2-subsets, study3-synthetic, ...)")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--out", help="output file")
        sp.add_argument("--format", choices=["csv", "json"])
        sp.add_argument("--sweep", help="override the sweep, e.g. delta=0,1/16,1/8")

    s = sub.add_parser("simulate", help="run Monte Carlo studies from a config")
    common(s)
    s.add_argument("--threads", type=int, help="worker threads (default: $COVBAL_THREADS or 1)")
    s.add_argument("--replicates", type=int, help="override the replicate count")
    s.add_argument("--n", type=int, help="override the trial size")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("theory", help="closed-form variances for the config's metrics")
    common(t)
    t.add_argument("--n", type=int, help="override the trial size")
    t.set_defaults(func=cmd_theory)

    e = sub.add_parser("entropy", help="entropy and sum-of-variance diagnostics")
    common(e, config_required=False)
    e.add_argument("--cohort", help="cohort CSV (alternative to --config)")
    e.add_argument("--recode", help="recode map JSON (default: bundled table4 map)")
    e.add_argument("--observed", help="comma-separated observed columns")
    e.add_argument("--unobserved", help="comma-separated unobserved columns")
    e.set_defaults(func=cmd_entropy)

    r = sub.add_parser("recommend", help="rank observed-covariate subsets by H(U|X)")
    common(r, config_required=False)
    r.add_argument("--cohort", help="cohort CSV (alternative to --config)")
    r.add_argument("--recode", help="recode map JSON (default: bundled table4 map)")
    r.add_argument("--observed", help="comma-separated candidate columns")
    r.add_argument("--unobserved", help="comma-separated target columns")
    r.add_argument("--k", type=int, default=2, help="subset size (default 2)")
    r.add_argument("--n", type=int, help="trial size for the regime column")
    r.add_argument("--block-size", type=int, default=10, help="block size for the regime column")
    r.set_defaults(func=cmd_recommend)

    pl = sub.add_parser("plot", help="SVG chart from a summary or entropy CSV")
    pl.add_argument("--input", required=True, help="CSV written by simulate or entropy")
    pl.add_argument("--kind", choices=["sd", "entropy"], default="sd")
    pl.add_argument("--metric", help="metric id to plot (sd kind)")
    pl.add_argument("--group", type=int, help="arm to plot (sd kind)")
    pl.add_argument("--quantities", help="comma-separated quantities (entropy kind)")
    pl.add_argument("--out", help="SVG path (default: input with .svg suffix)")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"covbal: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (CohortError, SchemaError, UndefinedConditional, OSError, RuntimeError,
            ValueError) as exc:
        print(f"covbal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
