"""One test per acceptance criterion; each prints a PASS/FAIL line with what it measured."""

import pytest

from conftest import ACCEPTANCE_LINES
from tsor.acceptance import CRITERIA, run_criterion

# thresholds restated here so a drift in the criterion code cannot silently relax them
CHECKS = {
    1: lambda m: m["sockets"] == 10_000 and m["round_trips_ok"] == 10_000 and m["fabric_connections"] == 1,
    2: lambda m: m["handshake_msgs_connect"] == 2 * 1000 and m["handshake_msgs_refused"] == 2 * 1000
    and m["data_writes_before_accept_max"] == 0,
    3: lambda m: m["overwrites"] == 0 and m["credit_violations"] == 0 and m["checksum_ok"],
    4: lambda m: m["credit_msgs"] <= m["bound"] and m["min_credit_bytes"] > m["half_buffer"],
    5: lambda m: m["gap0"].split("/")[1:] == ["1req", "1transitions"],
    6: lambda m: m["lost_wakeups"] == 0 and m["max_idle_run"] <= m["spin_budget"] and m["inline_sleeps"] >= 1,
    7: lambda m: m["checksums_matched"] == m["sockets"] == 100,
    8: lambda m: m["pod1"] == "10.244.1.1" and m["ingress"] == "10.5.6.7:546",
    9: lambda m: m["mutations_after_churn"] == 0 and set(m["mutations_per_node_on_join"]) == {1},
    10: lambda m: m["mismatches"] == 0 and m["cross_denied"] == m["cross_tenant_connects"]
    and m["cross_fabric_writes"] == 0,
    11: lambda m: m["ingress_ok"] == m["egress_ok"] == m["sessions"] == 50 and m["leaked_sessions"] == 0,
    12: lambda m: abs(m["service_bytes_1s"] - m["target"]) <= m["quantum"]
    and abs(m["bucket_granted"] - m["target"]) <= m["service_burst"],
    13: lambda m: all(v == "identical" for k, v in m.items()),
}


def test_every_criterion_has_a_check():
    assert set(CHECKS) == set(CRITERIA)


@pytest.mark.slow
@pytest.mark.parametrize("number", sorted(CRITERIA), ids=[CRITERIA[n].key for n in sorted(CRITERIA)])
def test_criterion(number, request):
    outcome = run_criterion(CRITERIA[number])
    print("\n" + outcome.line())
    request.config.stash.setdefault(ACCEPTANCE_LINES, []).append(outcome.line())
    assert outcome.ok, outcome.line()
    assert CHECKS[number](outcome.measured), outcome.line()
