"""``tsorsim``: run workloads on simulated clusters, dump tables, check criteria."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from typing import Optional, Sequence

from . import metrics
from .controlplane import load_scenario
from .errors import ScenarioError
from .sim import Cluster
from .workloads import WORKLOADS, run_workload

log = logging.getLogger("tsor.cli")

WORKLOAD_NAMES = sorted([*WORKLOADS, "ingress-echo"])
TABLES = ("routes", "services", "ingress", "policies")
THREADED_ONLY = {"ingress-echo"}


def _kv(text: str) -> tuple[str, str]:
    key, sep, val = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected k=v, got {text!r}")
    return key.strip(), val.strip()


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tsorsim", description="Simulated socket-over-RDMA cluster.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="run a workload and report counters")
    run.add_argument("--scenario", required=True, help="scenario file or bundled name (ingress-demo, two-node, ...)")
    run.add_argument("--workload", required=True, choices=WORKLOAD_NAMES)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--param", type=_kv, action="append", default=[], metavar="K=V")
    run.add_argument("--report", metavar="OUT.json", help="write the JSON report here")
    run.add_argument("--csv", metavar="OUT.csv", help="write the latency histogram as CSV")
    run.add_argument("--threaded", action="store_true",
                     help="one thread per node service instead of the deterministic inline driver")
    run.add_argument("--quiet", action="store_true", help="no text summary on stdout")

    dump = sub.add_parser("dump", help="print a canonical table")
    dump.add_argument("--scenario", required=True)
    dump.add_argument("--table", required=True, choices=TABLES)
    dump.add_argument("--node", help="only this node (route tables differ per node)")

    chk = sub.add_parser("check", help="run acceptance criteria")
    chk.add_argument("criteria", nargs="*", default=["all"], help="numbers or names; default all")
    chk.add_argument("--list", action="store_true")
    return ap


def execute(scenario: str, workload: str, params: Optional[dict] = None, seed: int = 0,
            threaded: bool = False) -> dict:
    """Run one workload on a fresh cluster and return its report."""
    params = dict(params or {})
    threaded = threaded or workload in THREADED_ONLY
    state = load_scenario(scenario)
    t0 = time.perf_counter()
    cluster = Cluster(state, threaded=threaded)
    violations: list[str] = []
    try:
        try:
            results, lat, used = run_workload(cluster, workload, params, seed)
        except (ValueError, KeyError):
            raise
        except Exception as exc:  # noqa: BLE001 - reported as an invariant failure
            log.exception("workload failed")
            results, lat, used = {"error": repr(exc)}, [], params
            violations.append(f"workload raised {exc!r}")
        cluster.settle()
        violations += cluster.check_invariants()
    finally:
        cluster.stop()
    return metrics.build_report(cluster, scenario=str(scenario), workload=workload, params=used, seed=seed,
                                results=results, latency_us=lat, elapsed_s=time.perf_counter() - t0,
                                violations=violations)


def cmd_run(args) -> int:
    try:
        report = execute(args.scenario, args.workload, dict(args.param), args.seed, args.threaded)
    except (ValueError, KeyError) as exc:
        print(f"tsorsim: {exc}", file=sys.stderr)
        return 2
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(metrics.dumps(report))
    if args.csv:
        h = report["histograms"].get("latency_us") or report["wall_clock"]["latency_us"]
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(metrics.histogram_csv(h))
    if not args.quiet:
        sys.stdout.write(metrics.render_text(report))
    violations = report["invariants"]["violations"]
    for v in violations:
        print(f"tsorsim: invariant violated: {v}", file=sys.stderr)
    return 1 if violations else 0


def dump_tables(scenario, table: str, node: Optional[str] = None) -> str:
    cluster = Cluster(load_scenario(scenario) if isinstance(scenario, str) else scenario)
    try:
        if table not in TABLES:
            raise ValueError(f"unknown table {table!r}; choose from {', '.join(TABLES)}")
        names = [node] if node else list(cluster.services)
        if node and node not in cluster.services:
            raise ScenarioError(f"unknown node {node!r}")
        if table == "routes" and not node and len(names) > 1:
            return "".join(f"[{n}]\n{cluster.services[n].dump_table(table)}" for n in names)
        return cluster.services[names[0]].dump_table(table) if names else ""
    finally:
        cluster.stop()


def cmd_dump(args) -> int:
    sys.stdout.write(dump_tables(args.scenario, args.table, args.node))
    return 0


def cmd_check(args) -> int:
    from . import acceptance
    if args.list:
        for c in acceptance.CRITERIA.values():
            print(f"{c.number:>2} {c.name}")
        return 0
    selected = acceptance.select(args.criteria)
    failed = 0
    for c in selected:
        res = acceptance.run_criterion(c)
        print(res.line(), flush=True)
        failed += not res.ok
    return 1 if failed else 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return {"run": cmd_run, "dump": cmd_dump, "check": cmd_check}[args.cmd](args)
    except (ScenarioError, OSError) as exc:
        print(f"tsorsim: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
