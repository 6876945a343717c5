from ipaddress import IPv4Address, IPv4Network

import pytest

from tsor.controlplane import (HEADER, ControlPlane, NodeJoined, PodAdded, PodRemoved, Snapshot, load_scenario,
                               parse_scenario)
from tsor.errors import ScenarioError


def scenario(*lines):
    return "\n".join([HEADER, *lines]) + "\n"


def test_defaults_and_allocation():
    st = parse_scenario(scenario("[nodes]", "A", "B", "[pods]", "p A", "q A", "r B"))
    assert [n.cidr for n in st.nodes_by_join()] == [IPv4Network("10.244.1.0/24"), IPv4Network("10.244.2.0/24")]
    assert [str(st.pods[p].ip) for p in "pqr"] == ["10.244.1.1", "10.244.1.2", "10.244.2.1"]
    assert st.options.buffer_size == 65536


def test_bundled_scenarios_load():
    for name in ("ingress-demo", "two-node", "three-node", "tenants", "qos", "empty"):
        assert load_scenario(name).source_sha256


@pytest.mark.parametrize("text,msg", [
    ("nonsense\n", "header"),
    (scenario("[wat]"), "section"),
    (scenario("[options]", "buffer_size = 1000"), "power of two"),
    (scenario("[options]", "colour = blue"), "unknown option"),
    (scenario("[nodes]", "A 10.0.0.0/24", "B 10.0.0.128/25"), "overlap"),
    (scenario("[nodes]", "A", "[pods]", "p Z"), "node"),
    (scenario("[nodes]", "A 10.0.0.0/24", "[pods]", "p A ip=10.1.0.1"), "host address"),
    (scenario("[nodes]", "A", "[pods]", "p A tenant=ghost"), "tenant"),
])
def test_bad_scenarios_are_rejected(text, msg):
    with pytest.raises(ScenarioError, match=msg):
        parse_scenario(text)


def test_services_resolve_pod_names():
    st = load_scenario("ingress-demo")
    svc = st.services["svc1"]
    assert str(svc.endpoint.ip) == "10.5.6.7" and svc.endpoint.port == 546
    assert [str(m.ip) for m in svc.members] == ["10.244.2.5"]
    assert [str(r.service.ip) for r in st.ingress] == ["10.5.6.7"]


def test_dump_is_reparseable():
    st = load_scenario("tenants")
    again = parse_scenario(st.dump())
    assert again.dump() == st.dump()


def test_watch_starts_with_snapshot_then_events():
    cp = ControlPlane(parse_scenario(scenario("[nodes]", "A")))
    w = cp.watch(1)
    (snap,) = w.poll()
    assert isinstance(snap, Snapshot) and list(snap.state.nodes) == [1]
    rec = cp.add_pod("p", "A")
    cp.remove_pod("p")
    cp.add_node("B")
    evs = w.poll()
    assert [type(e) for e in evs] == [PodAdded, PodRemoved, NodeJoined]
    assert evs[0].pod == rec and not w.pending()


def test_snapshot_is_isolated_from_later_changes():
    cp = ControlPlane(parse_scenario(scenario("[nodes]", "A")))
    snap = cp.snapshot()
    cp.add_pod("p", "A")
    assert "p" not in snap.pods


def test_released_ip_is_reused():
    cp = ControlPlane(parse_scenario(scenario("[nodes]", "A")))
    first = cp.add_pod("p", "A").ip
    cp.remove_pod("p")
    assert cp.add_pod("q", "A").ip == first == IPv4Address("10.244.1.1")


def test_unknown_node_cannot_watch():
    cp = ControlPlane()
    with pytest.raises(ScenarioError):
        cp.watch(5)
