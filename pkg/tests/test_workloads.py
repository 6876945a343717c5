import pytest

from tsor.cli import execute
from tsor.sim import Cluster
from tsor.workloads import Params, run_workload


def run(scenario, workload, seed=0, **params):
    with Cluster(scenario) as cl:
        results, lat, used = run_workload(cl, workload, {k: str(v) for k, v in params.items()}, seed)
        cl.settle()
        assert cl.check_invariants() == []
        return results, lat, cl.totals()


def test_params_typed_and_tracked():
    p = Params({"n": "7", "flag": "yes", "x": "0.5"})
    assert p.get("n", 1) == 7
    assert p.get("flag", False) is True
    assert p.get("x", 0.0) == 0.5
    assert p.get("missing", "d") == "d"
    assert p.unknown() == []
    assert Params({"zzz": "1"}).unknown() == ["zzz"]


def test_params_bad_value():
    with pytest.raises(ValueError, match="not a valid int"):
        Params({"n": "seven"}).get("n", 1)


def test_unknown_workload_and_param():
    with Cluster("two-node") as cl:
        with pytest.raises(KeyError):
            run_workload(cl, "nope")
    with Cluster("two-node") as cl:
        with pytest.raises(ValueError, match="bogus"):
            run_workload(cl, "echo", {"sockets": "2", "bogus": "1"})


def test_echo_small():
    res, lat, totals = run("two-node", "echo", sockets=20, size=100)
    assert res["round_trips_ok"] == 20
    assert len(lat) == 20 and min(lat) > 0
    assert totals["fabric_connections"] == 1


def test_stream_checksums():
    res, _, totals = run("two-node", "stream", sockets=2, bytes=200_000, chunk_min=1, chunk_max=3000,
                         read_prob=0.3, read_min=1, read_max=5000, buffer_size=4096)
    assert res["checksums_matched"] == 2 and res["lengths_matched"] == 2
    assert totals["overwrites"] == 0 and totals["credit_violations"] == 0


def test_stream_spread_uses_every_link():
    res, _, totals = run("three-node", "stream", sockets=3, bytes=50_000, spread=True)
    assert res["checksums_matched"] == 3
    assert totals["fabric_connections"] == 3


@pytest.mark.parametrize("gap,coalesced", [(0, True), (2, False)])
def test_gap_controls_coalescing(gap, coalesced):
    with Cluster("two-node") as cl:
        res, _, _ = run_workload(cl, "stream", {"bytes": str(64 * 128), "chunk": "64", "burst": "8",
                                                "gap": str(gap)})
        c = cl.totals()
    assert res["chunks"] == 128
    sent = c["client_writereq_sent"]
    assert sent == c["client_write_transitions"]
    assert (sent * 10 <= res["chunks"]) is coalesced


def test_pingpong_latency_is_hop_multiple():
    res, lat, _ = run("two-node", "pingpong", rounds=10)
    assert res["rounds"] == 10 and len(lat) == 10
    assert res["hops_min"] >= 2


def test_connsetup_counts():
    res, _, _ = run("two-node", "connsetup", count=50, refused=10, batch=8)
    assert res["handshake_msgs_connect"] == 100
    assert res["refused_observed"] == 10
    assert res["handshake_msgs_refused"] == 20
    assert res["data_writes_before_accept_max"] == 0


@pytest.mark.parametrize("workload,params", [
    ("echo", {"sockets": "30"}),
    ("stream", {"bytes": "100000", "chunk_min": "1", "chunk_max": "2000", "read_prob": "0.5",
                "read_min": "1", "read_max": "3000"}),
])
def test_inline_runs_are_reproducible(workload, params):
    a = execute("two-node", workload, params, seed=5)
    b = execute("two-node", workload, params, seed=5)
    a.pop("wall_clock"), b.pop("wall_clock")
    assert a == b
    c = execute("two-node", workload, params, seed=6)
    c.pop("wall_clock")
    assert c["invariants"]["ok"]
