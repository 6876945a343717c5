import pathlib

import pytest

from tsor.acceptance import POLICY_PROBES, policy_cases, policy_oracle
from tsor.controlplane import scenario_path
from tsor.endpoint import Endpoint
from tsor.policy import PolicyRule, TokenBucket, enforce, parse_rule
from tsor.sim import Cluster

# verdicts of the independent oracle over policy_cases(seed=10), 1 = allowed
FROZEN_VERDICTS = "01010010001010011101100000100011111111111000101110"


@pytest.fixture(scope="module")
def tenants():
    with Cluster("tenants") as cl:
        yield cl


def test_rule_parsing_round_trips():
    r = parse_rule("deny tenant=acme src=10.244.1.0/24 port=22", {"acme": 2})
    assert r == PolicyRule("deny", 2, src=r.src, port=22)
    assert str(r) == "deny tenant=2 src=10.244.1.0/24 port=22"
    with pytest.raises(ValueError):
        parse_rule("drop port=1")
    with pytest.raises(ValueError):
        parse_rule("deny colour=red")


def test_first_match_wins_and_default_allows():
    rules = [parse_rule("allow port=80"), parse_rule("deny dst=10.0.0.0/8")]
    src = Endpoint(1, "10.1.1.1", 5000)
    assert enforce(rules, src, Endpoint(1, "10.2.2.2", 80))
    assert not enforce(rules, src, Endpoint(1, "10.2.2.2", 81))
    assert enforce(rules, src, Endpoint(1, "11.2.2.2", 81))


def test_tenant_isolation_precedes_rules():
    v = enforce([parse_rule("allow")], Endpoint(1, "10.1.1.1", 1), Endpoint(1, "10.1.1.2", 1), {2})
    assert not v and v.reason == "cross-tenant"


def test_oracle_matches_frozen_truth_table(tenants):
    text = pathlib.Path(scenario_path("tenants")).read_text()
    oracle = policy_oracle(text)
    owner = {str(p.ip): p.tenant for p in tenants.state.pods.values()}
    got = ""
    for pod, ip, port in policy_cases(tenants.state):
        src = tenants.state.pods[pod]
        got += "1" if oracle(src.tenant, str(src.ip), owner.get(ip, 0), ip, port) else "0"
    assert got == FROZEN_VERDICTS


def test_service_enforcement_matches_truth_table(tenants):
    got = ""
    for pod, ip, port in policy_cases(tenants.state):
        src = tenants.state.pods[pod]
        v = tenants.service_of(pod).enforce(Endpoint(src.tenant, src.ip, 40000), Endpoint(src.tenant, ip, port))
        got += "1" if v else "0"
    assert got == FROZEN_VERDICTS


def test_each_probe_stops_at_its_rule(tenants):
    for i, (pod, ip, port) in enumerate(POLICY_PROBES):
        src = tenants.state.pods[pod]
        v = tenants.service_of(pod).enforce(Endpoint(src.tenant, src.ip, 40000), Endpoint(src.tenant, ip, port))
        rule = tenants.state.policies[i]
        assert bool(v) == (rule.action == "allow")
        if not v:
            assert v.reason.startswith(f"rule {i}:")


def test_bucket_grants_rate_over_one_second():
    b = TokenBucket(1_000_000, 1000)
    total = sum(b.take(1 << 30, k / 1000) for k in range(1001))
    assert abs(total - 1_000_000) <= 1000


def test_bucket_starts_full_and_caps_at_burst():
    b = TokenBucket(100, 50)
    assert b.take(80, 0.0) == 50
    assert b.take(80, 10.0) == 50
    assert b.time_until(25, 10.0) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        TokenBucket(0, 1)
