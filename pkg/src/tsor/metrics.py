"""Run reports: JSON (schema ``tsorsim-report/1``), text summary, histogram CSV.

Everything outside ``wall_clock`` is a pure function of scenario, workload,
parameters and seed when the cluster runs inline. Threaded runs move their
schedule-dependent counters into ``wall_clock.nondeterministic``.
"""

from __future__ import annotations

import io
import json
from typing import Optional

import numpy as np

__all__ = ["SCHEMA", "build_report", "dumps", "histogram", "histogram_csv", "render_text",
           "SCHEDULE_DEPENDENT"]

SCHEMA = "tsorsim-report/1"

# log2-spaced latency bins in microseconds
LATENCY_EDGES_US = [0.0] + [float(2 ** k) for k in range(0, 24)]

# counters whose values depend on thread interleaving in threaded runs
SCHEDULE_DEPENDENT = frozenset({
    "poll_iterations", "max_idle_run", "sleeps", "wakes", "sq_writereq", "sq_msgs", "cq_readready",
    "credit_msgs", "credit_min_amount", "credit_stalls", "data_writes", "control_msgs", "ctrl_acks",
    "cq_overflow", "client_credit_hints", "client_readready_popped", "client_write_transitions",
    "client_writereq_sent", "client_writeready_popped", "client_sq_full_retries",
})


def histogram(samples, edges=LATENCY_EDGES_US) -> dict:
    values = np.asarray(list(samples), dtype=float)
    counts, _ = np.histogram(values, bins=np.asarray(edges, dtype=float))
    out = {"unit": "us", "edges": [float(e) for e in edges], "counts": [int(c) for c in counts],
           "n": int(values.size)}
    if values.size:
        out["min"] = round(float(values.min()), 6)
        out["p50"] = round(float(np.percentile(values, 50)), 6)
        out["p99"] = round(float(np.percentile(values, 99)), 6)
        out["max"] = round(float(values.max()), 6)
    return out


def histogram_csv(hist: dict) -> str:
    buf = io.StringIO()
    buf.write("lo_us,hi_us,count\n")
    edges = hist["edges"]
    for lo, hi, c in zip(edges, edges[1:], hist["counts"]):
        buf.write(f"{lo:g},{hi:g},{c}\n")
    return buf.getvalue()


def _split(counters: dict, threaded: bool) -> tuple[dict, dict]:
    if not threaded:
        return dict(counters), {}
    keep, moved = {}, {}
    for k, v in counters.items():
        (moved if k in SCHEDULE_DEPENDENT else keep)[k] = v
    return keep, moved


def _balanced(rows: list[dict]) -> bool:
    ends: dict = {}
    for r in rows:
        ends.setdefault(tuple(r["flow"]), {})[r["initiator"]] = r
    return all(len(e) != 2 or (e[True]["bytes_tx"] == e[False]["bytes_rx"]
                               and e[False]["bytes_tx"] == e[True]["bytes_rx"]) for e in ends.values())


def build_report(cluster, *, scenario: str, workload: str, params: dict, seed: int, results: dict,
                 latency_us: list, elapsed_s: float, violations: Optional[list] = None) -> dict:
    threaded = cluster.threaded
    totals, nd_totals = _split(cluster.totals(), threaded)
    nodes, nd_nodes = {}, {}
    for name, svc in cluster.services.items():
        keep, moved = _split(dict(sorted(svc.stats().items())), threaded)
        nodes[name] = keep
        if moved:
            nd_nodes[name] = moved
    channels = []
    for svc in cluster.services.values():
        for f in svc.flow_stats():
            row = {"flow": f["flow"], "node": cluster.state.nodes[f["node"]].name if f["node"] in cluster.state.nodes
                   else f["node"], "initiator": f["initiator"], "bytes_tx": f["bytes_tx"], "bytes_rx": f["bytes_rx"]}
            if not threaded:
                row["credits"] = f["credits"]
            channels.append(row)
    channels.sort(key=lambda r: (r["flow"], r["initiator"]))
    hist = histogram(latency_us)
    wall: dict = {"elapsed_s": round(elapsed_s, 6)}
    if threaded:
        # channel keys depend on the order connections raced to each link
        wall["latency_us"] = hist
        wall["nondeterministic"] = {"totals": nd_totals, "nodes": nd_nodes, "channels": channels}
        channels = [{"flows": len(channels),
                     "balanced": _balanced(channels)}]
    report = {
        "schema": SCHEMA,
        "run": {
            "scenario": scenario,
            "scenario_sha256": cluster.state.source_sha256,
            "workload": workload,
            "seed": seed,
            "params": {k: params[k] for k in sorted(params)},
            "driver": "threaded" if threaded else "inline",
            "hop_us": cluster.state.options.hop_us,
        },
        "results": results,
        "totals": totals,
        "nodes": nodes,
        "channels": channels,
        "histograms": {} if threaded else {"latency_us": hist},
        "invariants": {"ok": not violations, "violations": list(violations or [])},
        "wall_clock": wall,
    }
    return report


def dumps(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def render_text(report: dict) -> str:
    run = report["run"]
    lines = [f"workload {run['workload']} on {run['scenario']} (seed {run['seed']}, {run['driver']})"]
    for k, v in report["results"].items():
        lines.append(f"  {k:<32} {v}")
    lines.append("totals:")
    for k, v in report["totals"].items():
        lines.append(f"  {k:<32} {v}")
    h = report["histograms"].get("latency_us") or report["wall_clock"].get("latency_us")
    if h and h["n"]:
        lines.append(f"latency_us: n={h['n']} min={h['min']} p50={h['p50']} p99={h['p99']} max={h['max']}")
    inv = report["invariants"]
    lines.append("invariants: " + ("ok" if inv["ok"] else "VIOLATED"))
    lines += [f"  - {v}" for v in inv["violations"]]
    lines.append(f"elapsed {report['wall_clock']['elapsed_s']:.3f}s")
    return "\n".join(lines) + "\n"
