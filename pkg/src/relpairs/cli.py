"""Command-line entry point: ``relpairs VERB [options]``.

Exit status is 0 on success, 1 on invalid input or usage and 2 on an
unexpected internal error. Logs go to standard error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .evaluation import (F_BETA, UndefinedStatistic, classification_metrics, evaluate_filter,
                         moving_block_bootstrap_diff, spearman_rho, tune_filter)
from .forecast import CSV_COLUMNS, PER_PAIR, AGGREGATE, ForecastQuery, forecast, forecast_series, read_csv_rows, \
    write_forecast_csv
from .ingest import FlightStore, IngestReport, parse_message, MessageParseError, read_messages
from .prior import PriorError, build_prior, load_prior, prior_stats, save_prior, select_prior
from .relevance import FilterParams, scenario_verdicts
from .route_graph import GraphError, build_route_graph, graph_stats, load_graph, save_graph
from .synth import PRESETS, generate_world
from .timeutil import format_time, month_of, parse_time
from .traffic import FlightPlan, Sector, TrafficError, load_scenarios

log = logging.getLogger("relpairs")

FILTER_KEYS = [f.name for f in fields(FilterParams) if f.name not in ("sigma_rocd_fraction", "step_s")]


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config


def read_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Keys use underscores or dashes."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(parser: argparse.ArgumentParser, config: dict) -> dict:
    actions = {a.dest: a for a in parser._actions}
    out = {}
    for key, value in config.items():
        action = actions.get(key)
        if action is None:
            continue  # keys for other verbs are allowed in a shared file
        if action.type is not None:
            try:
                value = action.type(value)
            except (TypeError, ValueError) as exc:
                raise InputError(f"config {key}: {exc}") from exc
        elif isinstance(action, argparse._StoreTrueAction):
            value = value.lower() in ("1", "true", "yes", "on")
        out[key] = value
    return out


def _effective(args) -> dict:
    skip = {"func", "config", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip and v is not None}


def _filter_params(args) -> FilterParams:
    kw = {k: getattr(args, k) for k in FILTER_KEYS if getattr(args, k, None) is not None}
    try:
        return FilterParams(**kw)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _floats(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip()]


# ---------------------------------------------------------------------------
# loaders


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise InputError(f"{path}: no such file") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc.msg})") from exc


def load_sector(path) -> Sector:
    """Sector from a sector document, a plan corpus, a graph artifact or a world file."""
    doc = _read_json(path)
    if isinstance(doc, dict) and "world" in doc:
        doc = doc["world"]
    if isinstance(doc, dict) and "sector" in doc:
        doc = doc["sector"]
    try:
        return Sector.from_json(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: no sector definition") from exc


def load_plans(path) -> tuple[list[FlightPlan], Optional[Sector]]:
    doc = _read_json(path)
    try:
        if isinstance(doc, list):
            return [FlightPlan.from_json(p) for p in doc], None
        sector = Sector.from_json(doc["sector"]) if "sector" in doc else None
        return [FlightPlan.from_json(p) for p in doc["plans"]], sector
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed plan corpus ({exc})") from exc


def _scenarios(path):
    if not Path(path).exists():
        raise InputError(f"{path}: no such file or directory")
    try:
        return load_scenarios(path)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed scenario ({exc})") from exc


def _messages(path, report: Optional[IngestReport] = None):
    if path == "-":
        return read_messages(sys.stdin, report)
    if not Path(path).exists():
        raise InputError(f"{path}: no such file")
    with open(path) as fh:
        return read_messages(fh, report)


def _graph(path):
    if not Path(path).exists():
        raise InputError(f"{path}: no such file")
    return load_graph(path)


def _graph_and_prior(args):
    ctx = _graph(args.graph)
    if not Path(args.prior).exists():
        raise InputError(f"{args.prior}: no such file")
    return ctx, load_prior(args.prior, ctx)


def _time(text, name):
    try:
        return parse_time(text)
    except ValueError as exc:
        raise InputError(f"--{name}: {exc}") from exc


def _emit(obj, out: Optional[str]):
    text = json.dumps(obj, indent=1, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------------------
# verbs


def cmd_generate_world(args) -> int:
    if args.preset not in PRESETS:
        raise InputError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    kw = {"seed": args.seed}
    if args.start:
        kw["start"] = args.start
    if args.hours:
        kw["duration_h"] = args.hours
    if args.rate_scale is not None:
        kw["rate_scale"] = args.rate_scale
    spec = PRESETS[args.preset](**kw)
    world = generate_world(spec, _filter_params(args))
    summary = world.write(args.out, truth_cadence_min=args.truth_cadence, config=_effective(args))
    log.info("wrote world to %s: %s", args.out, summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_build_graph(args) -> int:
    plans, sector = load_plans(args.plans)
    if args.sector:
        sector = load_sector(args.sector)
    if sector is None:
        raise InputError("no sector: pass --sector or use a corpus that embeds one")
    ctx = build_route_graph(plans, sector, merge_radius=args.merge_radius, config=_effective(args))
    digest = save_graph(ctx, args.out)
    stats = graph_stats(ctx.network)
    log.info("graph %s: %d nodes, %d edges", digest[:12], stats["nodes"], stats["edges"])
    print(json.dumps({"content_hash": digest, "nodes": stats["nodes"], "edges": stats["edges"]}))
    return 0


def cmd_graph_stats(args) -> int:
    ctx = _graph(args.graph)
    stats = graph_stats(ctx.network)
    stats["content_hash"] = ctx.content_hash
    _emit(stats, args.out)
    return 0


def cmd_build_prior(args) -> int:
    ctx = _graph(args.graph)
    scenarios = _scenarios(args.scenarios)
    if not scenarios:
        raise InputError(f"{args.scenarios}: no scenarios")
    store = build_prior(scenarios, ctx, _filter_params(args), config=_effective(args))
    save_prior(store, args.out)
    log.info("prior over %d scenarios, months %s, diagnostics %s", len(scenarios), sorted(store.tables),
             dict(store.diagnostics))
    print(json.dumps({"graph_hash": store.graph_hash, "months": sorted(store.tables)}))
    return 0


def cmd_prior_stats(args) -> int:
    ctx = _graph(args.graph) if args.graph else None
    if not Path(args.prior).exists():
        raise InputError(f"{args.prior}: no such file")
    _emit(prior_stats(load_prior(args.prior, ctx), ctx), args.out)
    return 0


def cmd_filter(args) -> int:
    sector = load_sector(args.sector)
    params = _filter_params(args)
    scenarios = _scenarios(args.scenario)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for sc in scenarios:
            if args.subject:
                subjects = [args.subject]
            elif sc.subject:
                subjects = [sc.subject]
            else:
                subjects = None
            if subjects and subjects[0] not in sc.by_callsign():
                raise InputError(f"subject {subjects[0]} not in scenario at {format_time(sc.time)}")
            for s, o, v in scenario_verdicts(sc, sector, params, subjects):
                rec = {"time": format_time(sc.time), "subject": s, "other": o, **v.to_json()}
                out.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def _store_from(args, ctx):
    messages, report = _messages(args.messages)
    for lineno, reason in report.rejected:
        log.warning("rejected message line %d: %s", lineno, reason)
    return messages, report


def cmd_forecast(args) -> int:
    ctx, store_p = _graph_and_prior(args)
    messages, _ = _store_from(args, ctx)
    now = _time(args.at, "at")
    try:
        query = ForecastQuery(now, args.lookahead)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    store = FlightStore(ctx, args.sigma)
    store.apply_all(m for m in sorted(messages, key=lambda m: m.msg_time) if m.msg_time <= now)
    store.expire(now)
    table, why = select_prior(store_p, month_of(query.query_time))
    log.info("prior table %s (%s)", table.month, why)
    res = forecast(store.snapshot(), ctx, table, query, args.mode)
    write_forecast_csv([res], sys.stdout, _effective(args))
    return 0


def cmd_forecast_series(args) -> int:
    ctx, store_p = _graph_and_prior(args)
    messages, _ = _store_from(args, ctx)
    start, end = _time(args.start, "start"), _time(args.end, "end")
    if end < start:
        raise InputError("--end precedes --start")
    lookaheads = _floats(args.lookaheads)
    for la in lookaheads:
        if not 1 <= la <= 120:
            raise InputError("lookahead must be within [1, 120] minutes")
    t0 = time.perf_counter()
    res = forecast_series(messages, ctx, store_p, start, end, args.step, lookaheads, args.sigma, args.mode)
    log.info("%d forecasts in %.2f s", len(res), time.perf_counter() - t0)
    if args.out:
        with open(args.out, "w") as fh:
            write_forecast_csv(res, fh, _effective(args))
    else:
        write_forecast_csv(res, sys.stdout, _effective(args))
    return 0


def cmd_ingest(args) -> int:
    ctx = _graph(args.graph)
    store = FlightStore(ctx, args.sigma)
    prior_store = None
    if args.prior:
        prior_store = load_prior(args.prior, ctx)
    report = IngestReport()

    def handle(line: str, lineno: int) -> None:
        line = line.strip()
        if not line:
            return
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict) and "query" in obj:
            _answer(obj, store, ctx, prior_store, args)
            return
        try:
            msg = parse_message(line)
        except MessageParseError as exc:
            report.rejected.append((lineno, str(exc)))
            log.warning("rejected line %d: %s", lineno, exc)
            return
        report.accepted += 1
        store.apply(msg)

    if args.follow:
        _follow(args.messages, handle, args.idle_exit, args.poll)
    else:
        src = sys.stdin if args.messages == "-" else None
        if src is None and not Path(args.messages).exists():
            raise InputError(f"{args.messages}: no such file")
        with (open(args.messages) if src is None else src) as fh:
            for n, line in enumerate(fh, start=1):
                handle(line, n)
    summary = {
        "accepted": report.accepted,
        "rejected": [{"line": n, "reason": r} for n, r in report.rejected],
        "flights": len(store.records),
        "status": {s: sum(r.status == s for r in store.records.values()) for s in ("mapped", "unmapped", "off_graph")},
    }
    _emit(summary, args.out)
    return 0


def _answer(obj: dict, store: FlightStore, ctx, prior_store, args) -> None:
    """Service one ``{"query": TIME, "lookahead": MIN}`` line from the live store."""
    if prior_store is None:
        log.error("forecast query received but no --prior was given")
        return
    try:
        now = parse_time(obj["query"])
        q = ForecastQuery(now, float(obj.get("lookahead", args.lookahead)))
    except (ValueError, TypeError) as exc:
        log.warning("bad query %r: %s", obj, exc)
        return
    table, _ = select_prior(prior_store, month_of(q.query_time))
    res = forecast(store.snapshot(), ctx, table, q, args.mode)
    print(json.dumps(dict(zip(CSV_COLUMNS, res.row()))), flush=True)


def _follow(path: str, handle, idle_exit: float, poll: float) -> None:
    """Tail a file (or standard input) until it has been idle for ``idle_exit`` seconds."""
    if path == "-":
        for n, line in enumerate(sys.stdin, start=1):
            handle(line, n)
        return
    if not Path(path).exists():
        raise InputError(f"{path}: no such file")
    n = 0
    idle = 0.0
    buf = ""
    with open(path) as fh:
        while True:
            chunk = fh.readline()
            if chunk:
                idle = 0.0
                buf += chunk
                if buf.endswith("\n"):
                    n += 1
                    handle(buf, n)
                    buf = ""
                continue
            if idle_exit > 0 and idle >= idle_exit:
                if buf:
                    handle(buf, n + 1)
                return
            time.sleep(poll)
            idle += poll


def cmd_evaluate_filter(args) -> int:
    sector = load_sector(args.sector)
    scenarios = [sc for sc in _scenarios(args.scenarios) if sc.subject is not None]
    if not scenarios:
        raise InputError("no labelled scenarios")
    params = _filter_params(args)
    try:
        out = {"params": asdict(params)}
        m = classification_metrics(evaluate_filter(scenarios, sector, params), args.beta)
        out["metrics"] = m.to_json()
        if args.grid:
            grid = {}
            for item in args.grid:
                key, _, vals = item.partition("=")
                key = key.replace("-", "_")
                if key not in FILTER_KEYS or not vals:
                    raise InputError(f"bad grid entry {item!r}")
                grid[key] = _floats(vals)
            best, score, table = tune_filter(scenarios, sector, grid, params, args.beta)
            out["tuned"] = {"params": asdict(best), "f_beta": score, "grid_points": len(table)}
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    _emit(out, args.out)
    return 0


def _truth_lookup(path) -> dict:
    rows = read_csv_rows(path)
    out = {}
    for r in rows:
        try:
            out[round(parse_time(r["time"]), 3)] = float(r["relevant_pairs"])
        except (KeyError, ValueError) as exc:
            raise InputError(f"{path}: malformed truth row {r}") from exc
    return out


def _second_forecast(path, lookahead) -> dict:
    """``query time -> expected_relevant_pairs`` from another forecast CSV."""
    out = {}
    for r in read_csv_rows(path):
        try:
            la = float(r["lookahead_min"])
            if abs(la - lookahead) > 1e-9:
                continue
            out[round(parse_time(r["emission_time"]) + la * 60.0, 3)] = float(r["expected_relevant_pairs"])
        except (KeyError, ValueError) as exc:
            raise InputError(f"{path}: malformed row {r}") from exc
    return out


def cmd_evaluate_forecast(args) -> int:
    """Forecast against a comparison series; by default the traffic-count column of the same file."""
    truth = _truth_lookup(args.truth)
    for path in (args.forecast, args.baseline):
        if path and not Path(path).exists():
            raise InputError(f"{path}: no such file")
    other = _second_forecast(args.baseline, args.lookahead) if args.baseline else None
    rows = read_csv_rows(args.forecast)
    fc, bl, obs = [], [], []
    missing = 0
    for r in rows:
        try:
            la = float(r["lookahead_min"])
            if abs(la - args.lookahead) > 1e-9:
                continue
            q = round(parse_time(r["emission_time"]) + la * 60.0, 3)
            f, b = float(r["expected_relevant_pairs"]), float(r["baseline_traffic"])
        except (KeyError, ValueError) as exc:
            raise InputError(f"{args.forecast}: malformed row {r}") from exc
        if other is not None:
            b = other.get(q)
        if q not in truth or b is None:
            missing += 1
            continue
        fc.append(f)
        bl.append(b)
        obs.append(truth[q])
    if missing:
        log.warning("%d forecasts have no matching truth or comparison point", missing)
    if len(obs) <= args.block:
        raise InputError(f"only {len(obs)} joined points; need more than the block length")
    try:
        boot = moving_block_bootstrap_diff(obs, fc, bl, args.block, args.replicates, args.seed)
    except UndefinedStatistic as exc:
        raise InputError(str(exc)) from exc
    out = {
        "n_points": len(obs),
        "lookahead_min": args.lookahead,
        "rho_forecast": boot.rho_a,
        "rho_baseline": boot.rho_b,
        "rho_diff": boot.observed_diff,
        "bootstrap": boot.to_json(),
        "config": _effective(args),
    }
    _emit(out, args.out)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_filter_flags(p):
    g = p.add_argument_group("filter parameters")
    for key in FILTER_KEYS:
        g.add_argument("--" + key.replace("_", "-"), dest=key, type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="relpairs", description="Relevant aircraft pairs and sector complexity forecasts.")
    parser.add_argument("--version", action="version", version=f"relpairs {__version__}")
    parser.add_argument("--config", help="key = value file; flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)

    def verb(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(func=func)
        return p

    p = verb("generate-world", cmd_generate_world, "generate a synthetic sector, traffic and ground truth")
    p.add_argument("--preset", default="crossing-flows")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--start", help="RFC 3339 start time")
    p.add_argument("--hours", type=float)
    p.add_argument("--rate-scale", dest="rate_scale", type=float)
    p.add_argument("--truth-cadence", dest="truth_cadence", type=float, default=1.0, help="minutes")
    _add_filter_flags(p)

    p = verb("build-graph", cmd_build_graph, "build the resampled route graph from a plan corpus")
    p.add_argument("--plans", required=True)
    p.add_argument("--sector")
    p.add_argument("--merge-radius", dest="merge_radius", type=float, default=2.5)
    p.add_argument("--out", required=True)

    p = verb("graph-stats", cmd_graph_stats, "node and edge counts and the edge-length histogram")
    p.add_argument("--graph", required=True)
    p.add_argument("--out")

    p = verb("build-prior", cmd_build_prior, "build monthly prior tables from scenario snapshots")
    p.add_argument("--graph", required=True)
    p.add_argument("--scenarios", required=True)
    p.add_argument("--out", required=True)
    _add_filter_flags(p)

    p = verb("prior-stats", cmd_prior_stats, "prior coverage per month")
    p.add_argument("--prior", required=True)
    p.add_argument("--graph")
    p.add_argument("--out")

    p = verb("filter", cmd_filter, "relevance verdicts for scenario snapshots as JSONL")
    p.add_argument("--scenario", required=True)
    p.add_argument("--sector", required=True)
    p.add_argument("--subject")
    p.add_argument("--out")
    _add_filter_flags(p)

    def forecast_flags(p):
        p.add_argument("--graph", required=True)
        p.add_argument("--prior", required=True)
        p.add_argument("--messages", required=True)
        p.add_argument("--sigma", type=float, default=5.0, help="arrival-time sd in minutes")
        p.add_argument("--mode", choices=[PER_PAIR, AGGREGATE], default=PER_PAIR)

    p = verb("forecast", cmd_forecast, "one forecast at an emission time")
    forecast_flags(p)
    p.add_argument("--at", required=True)
    p.add_argument("--lookahead", type=float, default=45.0)

    p = verb("forecast-series", cmd_forecast_series, "forecasts at a fixed cadence as CSV")
    forecast_flags(p)
    p.add_argument("--start", required=True)
    p.add_argument("--end", required=True)
    p.add_argument("--step", type=float, default=60.0, help="seconds")
    p.add_argument("--lookaheads", default="30,45")
    p.add_argument("--out")

    p = verb("ingest", cmd_ingest, "apply a message stream to the live store; answers query lines")
    p.add_argument("--graph", required=True)
    p.add_argument("--messages", default="-")
    p.add_argument("--prior")
    p.add_argument("--follow", action="store_true")
    p.add_argument("--idle-exit", dest="idle_exit", type=float, default=0.0,
                   help="stop following after this many idle seconds (0 = never)")
    p.add_argument("--poll", type=float, default=0.2)
    p.add_argument("--sigma", type=float, default=5.0)
    p.add_argument("--lookahead", type=float, default=45.0)
    p.add_argument("--mode", choices=[PER_PAIR, AGGREGATE], default=PER_PAIR)
    p.add_argument("--out")

    p = verb("evaluate-filter", cmd_evaluate_filter, "metrics on labelled scenarios, optional grid tuning")
    p.add_argument("--scenarios", required=True)
    p.add_argument("--sector", required=True)
    p.add_argument("--beta", type=float, default=F_BETA)
    p.add_argument("--grid", action="append", help="KEY=v1,v2,... (repeatable)")
    p.add_argument("--out")
    _add_filter_flags(p)

    p = verb("evaluate-forecast", cmd_evaluate_forecast, "rank correlation of forecast and baseline with truth")
    p.add_argument("--forecast", required=True)
    p.add_argument("--truth", "--observed", dest="truth", required=True)
    p.add_argument("--baseline", help="second forecast CSV to compare against (default: baseline_traffic column)")
    p.add_argument("--lookahead", type=float, default=45.0)
    p.add_argument("--block", type=int, default=15)
    p.add_argument("--replicates", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    return parser


def _prescan(argv):
    """``(config path, verb)`` without triggering required-flag checks."""
    config = verb = None
    i = 0
    while i < len(argv):
        a = argv[i]
        if a == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
            i += 2
            continue
        if a.startswith("--config="):
            config = a.split("=", 1)[1]
        elif not a.startswith("-") and verb is None:
            verb = a
        i += 1
    return config, verb


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices.get(name)
    return None


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        config_path, verb_name = _prescan(argv)
        if config_path:
            sp = _subparser(parser, verb_name)
            if sp is not None:
                values = _coerce(sp, read_config(config_path))
                for action in sp._actions:
                    if action.dest in values:
                        action.required = False
                sp.set_defaults(**values)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"relpairs: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (InputError, OSError) as exc:
        print(f"relpairs: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if not args.verb:
        parser.print_help(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (InputError, PriorError, GraphError, TrafficError, MessageParseError) as exc:
        log.error("%s", exc)
        print(f"relpairs: error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001
        log.exception("internal error")
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
