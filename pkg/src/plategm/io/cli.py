"""Command-line front end: ``gm <verb> --model FILE --data FILE [options]``.

Every verb writes ``report.json`` and ``manifest.json`` into ``--out`` (and
``trace.csv`` for samplers).  Without ``--out`` the report goes to stdout.
Exit codes: 0 success, 1 usage, 2 model or data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import itertools
import json
import sys
import warnings
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import logsumexp

import plategm
from plategm.autodiff import finite_diff_check, log_joint_grad, log_marginal, log_marginal_grad
from plategm.decompose import (
    classify_schema,
    factored_log_evidence,
    finest_decomposition,
    log_bayes_factor,
)
from plategm.em import EmConfig, em_run
from plategm.graph.ops import chain_components, maximal_cliques, validate_graph
from plategm.io.data import MISSING, DataTable, read_csv
from plategm.model import bind_data, load_model
from plategm.sampler.gibbs import GibbsConfig, effective_sample_size, gibbs_run
from plategm.sampler.structure import (
    StructureConfig,
    enumerate_posterior,
    model_average_predict,
    structure_mcmc,
)
from plategm.semantics import log_joint

__all__ = ["main", "run_command", "VERBS", "EXIT_USAGE", "EXIT_MODEL", "EXIT_NUMERIC"]

EXIT_OK, EXIT_USAGE, EXIT_MODEL, EXIT_NUMERIC = 0, 1, 2, 3
VERBS = (
    "validate",
    "components",
    "cliques",
    "decompose",
    "schema",
    "evidence",
    "bf",
    "gibbs",
    "em",
    "structure",
    "gradcheck",
    "predict",
)
MAX_QUERY_COMPLETIONS = 10_000


class UsageError(Exception):
    """Bad flags, unreadable files or invalid run settings."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gm", description="Bayesian learning with graphical models and plates.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--model", required=True, help="model file in the gm language")
    p.add_argument("--data", help="CSV data file")
    p.add_argument("--against", help="second model file for bf")
    p.add_argument("--query", help="CSV of query cases for predict")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int)
    p.add_argument("--burnin", type=int)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--tol", type=float)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--out", help="output directory")
    p.add_argument("--missing", default=MISSING, help="missing-cell token (default '?')")
    return p


# ---------------------------------------------------------------------------
# helpers


def _read_text(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read '{path}': {exc.strerror or exc}") from None


def _sha(b: Optional[bytes]) -> Optional[str]:
    return None if b is None else hashlib.sha256(b).hexdigest()


def _table(raw: Optional[bytes], missing: str) -> Optional[DataTable]:
    if raw is None:
        return None
    return read_csv(io.StringIO(raw.decode("utf-8")), missing=missing)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, set, frozenset)):
        items = sorted(x) if isinstance(x, (set, frozenset)) else x
        return [_jsonable(v) for v in items]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if np.isfinite(v) else str(v)
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


def _dump(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# verbs


def _graph_report(bm):
    g = bm.graph
    diags = validate_graph(g)
    return {
        "nodes": list(g.names),
        "plates": {p.name: bm.plate_size(p.name) for p in g.plates},
        "optional_arcs": [f"{u}->{v}" for u, v in g.optional_order],
        "diagnostics": [{"code": d.code, "message": d.message, "nodes": list(d.nodes)} for d in diags],
        "valid": not diags,
    }


def _cmd_validate(bm, args, ctx):
    rep = _graph_report(bm)
    lines = ["ok"] if rep["valid"] else [f"[{d['code']}] {d['message']}" for d in rep["diagnostics"]]
    return rep, lines, None, (EXIT_OK if rep["valid"] else EXIT_MODEL)


def _cmd_components(bm, args, ctx):
    comps = [sorted(c) for c in chain_components(bm.graph)]
    return {"components": comps}, [" ".join(c) for c in comps], None, EXIT_OK


def _cmd_cliques(bm, args, ctx):
    cl = [sorted(c) for c in maximal_cliques(bm.graph)]
    return {"cliques": cl}, [" ".join(c) for c in cl], None, EXIT_OK


def _cmd_decompose(bm, args, ctx):
    dec = finest_decomposition(bm)
    rep = {
        "factors": [{"unknowns": sorted(s.unknowns), "nodes": sorted(s.nodes)} for s in dec.subproblems],
        "known_only": sorted(dec.known_only),
        "reinserted": dec.reinserted,
        "flags": list(dec.flags),
    }
    return rep, dec.labels, None, EXIT_OK


def _cmd_schema(bm, args, ctx):
    sc = classify_schema(bm)
    rep = {"schema": sc.label, "groups": sc.groups, "trace": list(sc.trace), "fixed": list(sc.fixed)}
    return rep, [sc.label], None, EXIT_OK


def _cmd_evidence(bm, args, ctx):
    factors, total = factored_log_evidence(bm)
    return {"log_evidence": total, "factors": factors}, [f"{total:.10g}"], None, EXIT_OK


def _cmd_bf(bm, args, ctx):
    if not args.against:
        raise UsageError("bf needs --against FILE")
    raw = _read_text(args.against)
    ctx["against_sha256"] = _sha(raw)
    other = bind_data(load_model(raw.decode("utf-8")), bm.data)
    lbf = log_bayes_factor(bm, other)
    return {"log_bayes_factor": lbf}, [f"{lbf:.10g}"], None, EXIT_OK


def _trace_summary(trace) -> dict:
    out = {}
    skip = {"chain", "iteration"}
    for c in trace.columns:
        if c in skip:
            continue
        x = trace.column(c)
        out[c] = {
            "mean": float(np.mean(x)) if x.size else None,
            "sd": float(np.std(x)) if x.size else None,
            "ess": effective_sample_size(x),
        }
    return out


def _cmd_gibbs(bm, args, ctx):
    cfg = ctx["make"](
        GibbsConfig,
        iters=args.iters if args.iters is not None else 1000,
        burnin=args.burnin,
        thin=args.thin,
        chains=args.chains,
        seed=args.seed,
    )
    ctx["config"] = {"iters": cfg.iters, "burnin": cfg.n_burnin, "thin": cfg.thin, "chains": cfg.chains}
    tr = gibbs_run(bm, cfg)
    rep = {"rows": len(tr), "summary": _trace_summary(tr)}
    return rep, [f"{len(tr)} rows"], tr, EXIT_OK


def _cmd_em(bm, args, ctx):
    cfg = ctx["make"](
        EmConfig,
        tol=args.tol if args.tol is not None else 1e-8,
        restarts=args.restarts,
        seed=args.seed,
        **({"max_iter": args.iters} if args.iters is not None else {}),
    )
    ctx["config"] = {"tol": cfg.tol, "restarts": cfg.restarts, "max_iter": cfg.max_iter, "summary": cfg.summary}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = em_run(bm, cfg)
    return res.to_json(), [f"{res.log_posterior:.10g}"], None, EXIT_OK


def _cmd_structure(bm, args, ctx):
    cfg = ctx["make"](
        StructureConfig,
        iters=args.iters if args.iters is not None else 10_000,
        burnin=args.burnin,
        thin=args.thin,
        chains=args.chains,
        seed=args.seed,
    )
    ctx["config"] = {"iters": cfg.iters, "burnin": cfg.n_burnin, "thin": cfg.thin, "chains": cfg.chains}
    tr = structure_mcmc(bm, cfg)
    ids, counts = np.unique(tr.column("model-id").astype(int), return_counts=True)
    freq = {int(b): c / max(len(tr), 1) for b, c in zip(ids, counts)}
    rep = {"rows": len(tr), "frequencies": freq, **{k: v for k, v in tr.meta.items() if k != "seed"}}
    if not set(bm.unknowns) - set(bm.parameters) and len(bm.graph.optional_order) <= 12:
        rep["enumerated"] = enumerate_posterior(bm, cfg.arc_prior)
    return rep, [f"{len(tr)} rows"], tr, EXIT_OK


def _cmd_gradcheck(bm, args, ctx):
    tol = args.tol if args.tol is not None else 1e-5
    ctx["config"] = {"tol": tol, "eps": 1e-6}
    rng = np.random.default_rng(args.seed)
    state = bm.initial_state(rng)
    targets = [p for p in bm.parameters if not bm.node(p).domain.is_discrete]
    rep = {}
    g = log_joint_grad(bm, state, targets)
    r = finite_diff_check(lambda s: log_joint(bm, s), g, state, targets)
    rep["joint"] = {t: v[0] for t, v in r.items()}
    if bm.discrete_unknowns:
        gm = log_marginal_grad(bm, state, targets)
        r = finite_diff_check(lambda s: log_marginal(bm, s), gm, state, targets)
        rep["marginal"] = {t: v[0] for t, v in r.items()}
    worst = max([0.0] + [e for part in rep.values() for e in part.values()])
    rep["max_rel_err"] = worst
    rep["passed"] = worst <= tol
    code = EXIT_OK if worst <= tol else EXIT_NUMERIC
    return rep, [f"max relative error {worst:.3g}"], None, code


def _query_rows(bm, query: DataTable):
    """Per query row: the completions of its missing cells as full rows."""
    cols = {}
    for node, col in bm.model.columns.items():
        shape = tuple(bm.model.shapes[node])
        if shape:
            for j in range(int(np.prod(shape))):
                cols[f"{col}[{j}]"] = None
        else:
            cols[col] = node
    for i in range(query.n_rows):
        vals = query.values[i].copy()
        miss = [j for j, c in enumerate(query.columns) if query.mask[i, j] and c in cols]
        for j in miss:
            node = cols[query.columns[j]]
            if node is None or not bm.node(node).domain.is_discrete:
                raise ValueError(f"query row {i + 1}: missing cell '{query.columns[j]}' is not a discrete variable")
        sizes = [bm.node(cols[query.columns[j]]).domain.size for j in miss]
        if int(np.prod(sizes)) > MAX_QUERY_COMPLETIONS:
            raise ValueError(f"query row {i + 1}: too many completions")
        combos = list(itertools.product(*[range(s) for s in sizes]))
        tables = []
        for combo in combos:
            v = vals.copy()
            for j, k in zip(miss, combo):
                v[j] = k
            m = np.zeros_like(query.mask[i])
            tables.append(DataTable(query.columns, v[None, :], m[None, :]))
        yield i, [query.columns[j] for j in miss], combos, tables


def _cmd_predict(bm, args, ctx):
    if not args.query:
        raise UsageError("predict needs --query FILE")
    raw = _read_text(args.query)
    ctx["query_sha256"] = _sha(raw)
    query = _table(raw, args.missing)
    n_arcs = len(bm.graph.optional_order)
    weights = enumerate_posterior(bm) if n_arcs else {bm.model.full_bits: 1.0}
    rows = []
    for i, miss, combos, tables in _query_rows(bm, query):
        lds = np.array([model_average_predict(bm, t, weights=weights)["log_density"] for t in tables])
        total = float(logsumexp(lds))
        entry = {"row": i + 1, "log_density": total}
        if miss:
            post = np.exp(lds - total)
            entry["missing"] = {
                c: {str(k): float(sum(p for cb, p in zip(combos, post) if cb[j] == k)) for k in sorted({cb[j] for cb in combos})}
                for j, c in enumerate(miss)
            }
        rows.append(entry)
    rep = {"rows": rows, "model_weights": weights}
    return rep, [f"{r['row']}: {r['log_density']:.10g}" for r in rows], None, EXIT_OK


_COMMANDS = {
    "validate": _cmd_validate,
    "components": _cmd_components,
    "cliques": _cmd_cliques,
    "decompose": _cmd_decompose,
    "schema": _cmd_schema,
    "evidence": _cmd_evidence,
    "bf": _cmd_bf,
    "gibbs": _cmd_gibbs,
    "em": _cmd_em,
    "structure": _cmd_structure,
    "gradcheck": _cmd_gradcheck,
    "predict": _cmd_predict,
}


# ---------------------------------------------------------------------------
# driver


def _make(cls, **kw):
    try:
        return cls(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def run_command(argv, stdout=None, stderr=None) -> int:
    """Run one CLI invocation; returns the exit code."""
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        model_raw = _read_text(args.model)
        data_raw = _read_text(args.data) if args.data else None
        ctx = {"make": _make, "config": {}}
        try:
            model = load_model(model_raw.decode("utf-8"))
            bm = bind_data(model, _table(data_raw, args.missing))
            with np.errstate(all="ignore"):
                report, lines, trace, code = _COMMANDS[args.verb](bm, args, ctx)
        except UsageError:
            raise
        except ArithmeticError as exc:
            print(f"gm: numeric error: {exc}", file=stderr)
            return EXIT_NUMERIC
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            print(f"gm: model error: {exc}", file=stderr)
            return EXIT_MODEL
    except UsageError as exc:
        print(f"gm: usage error: {exc}", file=stderr)
        return EXIT_USAGE
    manifest = {
        "command": args.verb,
        "argv": list(argv),
        "model_sha256": _sha(model_raw),
        "data_sha256": _sha(data_raw),
        "config": ctx["config"],
        "seed": args.seed,
        "version": plategm.__version__,
    }
    for k in ("against_sha256", "query_sha256"):
        if k in ctx:
            manifest[k] = ctx[k]
    if args.out:
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "report.json").write_text(_dump(report))
            (out / "manifest.json").write_text(_dump(manifest))
            if trace is not None:
                trace.write_csv(out / "trace.csv")
        except OSError as exc:
            print(f"gm: usage error: cannot write to '{out}': {exc}", file=stderr)
            return EXIT_USAGE
        for line in lines:
            print(line, file=stdout)
    elif trace is not None:
        buf = io.StringIO()
        trace.write_csv(buf)
        stdout.write(buf.getvalue())
    elif args.verb in ("evidence", "bf"):
        for line in lines:
            print(line, file=stdout)
    else:
        stdout.write(_dump(report))
    return code


def main(argv=None) -> None:
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
