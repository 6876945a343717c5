from tsor import metrics
from tsor.cli import execute


def test_histogram_bins_and_quantiles():
    h = metrics.histogram([0.5, 1.5, 3, 3, 1000])
    assert h["n"] == 5 and sum(h["counts"]) == 5
    assert h["counts"][:3] == [1, 1, 2]
    assert h["min"] == 0.5 and h["max"] == 1000 and h["p50"] == 3
    assert len(h["edges"]) == len(h["counts"]) + 1


def test_empty_histogram():
    h = metrics.histogram([])
    assert h["n"] == 0 and "p50" not in h and not any(h["counts"])


def test_csv_roundtrip():
    rows = metrics.histogram_csv(metrics.histogram([2.0, 2.5])).splitlines()
    assert rows[0] == "lo_us,hi_us,count"
    assert "2,4,2" in rows


def test_inline_report_shape():
    r = execute("two-node", "echo", {"sockets": "4"}, seed=1)
    assert set(r) == {"schema", "run", "results", "totals", "nodes", "channels", "histograms",
                      "invariants", "wall_clock"}
    assert r["invariants"] == {"ok": True, "violations": []}
    assert set(r["nodes"]) == {"Node1", "Node2"}
    assert all("credits" in row for row in r["channels"])
    assert len(r["run"]["scenario_sha256"]) == 64
    assert metrics.dumps(r).endswith("\n")


def test_threaded_report_moves_schedule_data():
    r = execute("two-node", "echo", {"sockets": "4"}, seed=1, threaded=True)
    assert r["run"]["driver"] == "threaded"
    assert r["histograms"] == {}
    assert not metrics.SCHEDULE_DEPENDENT & set(r["totals"])
    nd = r["wall_clock"]["nondeterministic"]
    assert "poll_iterations" in nd["totals"]
    assert r["channels"] == [{"flows": len(nd["channels"]), "balanced": True}]
    assert r["wall_clock"]["latency_us"]["n"] == 4


def test_render_text_mentions_violations():
    r = execute("two-node", "echo", {"sockets": "2"})
    r["invariants"] = {"ok": False, "violations": ["boom"]}
    text = metrics.render_text(r)
    assert "VIOLATED" in text and "  - boom" in text
