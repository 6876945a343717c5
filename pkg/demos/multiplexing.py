"""Thousands of sockets between two nodes ride one fabric connection.

Each socket gets its own pair of data buffers, but the node-to-node
connection is set up once, on first use, and shared from then on.
"""

import sys

from tsor.cli import execute

sockets = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
report = execute("two-node", "echo", {"sockets": str(sockets), "size": "256"}, seed=1)
res, tot = report["results"], report["totals"]
print(f"{res['round_trips_ok']}/{sockets} echo round trips ok")
print(f"fabric connections: {tot['fabric_connections']}")
print(f"channels opened:    {tot['channels_opened']}  (one per socket end)")
h = report["histograms"]["latency_us"]
print(f"round-trip latency: p50={h['p50']} us  p99={h['p99']} us  (simulated)")
