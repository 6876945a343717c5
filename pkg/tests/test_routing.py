import pathlib
from ipaddress import IPv4Address

import pytest

from tsor.cli import dump_tables
from tsor.endpoint import Endpoint
from tsor.errors import NetUnreachable, NoBackends
from tsor.routing import (ConnTarget, EgressTarget, PodIpAllocator, RouteTable, RouteTables, ServiceHandler,
                          ingress_lookup, resolve, service_select)

GOLDEN = pathlib.Path(__file__).parent / "golden"


def test_longest_prefix_wins():
    rt = RouteTable()
    rt.set("0.0.0.0/0", EgressTarget())
    rt.set("10.244.0.0/16", ConnTarget(9, "wide"))
    rt.set("10.244.2.0/24", ConnTarget(2, "Node2"))
    assert rt.lookup("10.244.2.77") == ConnTarget(2, "Node2")
    assert rt.lookup("10.244.3.1") == ConnTarget(9, "wide")
    assert rt.lookup("8.8.8.8") == EgressTarget()


def test_only_real_changes_count_as_mutations():
    rt = RouteTable()
    rt.set("10.0.0.0/8", ServiceHandler())
    rt.set("10.0.0.0/8", ServiceHandler())
    rt.remove("11.0.0.0/8")
    assert rt.mutations == 1
    rt.remove("10.0.0.0/8")
    assert rt.mutations == 2 and len(rt) == 0


def test_service_select_round_robins():
    t = RouteTables()
    svc = Endpoint(1, "10.5.0.1", 80)
    members = [Endpoint(1, f"10.244.1.{i}", 8080) for i in (1, 2, 3)]
    t.services.set(svc, members)
    picks = [service_select(t, svc) for _ in range(7)]
    assert picks == members * 2 + members[:1]
    t.services.set(Endpoint(1, "10.5.0.2", 80), [])
    with pytest.raises(NoBackends):
        service_select(t, Endpoint(1, "10.5.0.2", 80))
    with pytest.raises(NetUnreachable):
        service_select(t, Endpoint(1, "10.5.0.3", 80))


def test_tables_reload_from_their_dump(ingress_demo):
    tables = ingress_demo.service("Node1").tables
    again = RouteTables.load(tables.dump("routes"), tables.dump("services"), tables.dump("ingress"),
                             node_ids=ingress_demo.state.node_ids())
    for what in ("routes", "services", "ingress"):
        assert again.dump(what) == tables.dump(what)


def test_ingress_demo_reference_facts(ingress_demo):
    st = ingress_demo.state
    tables = ingress_demo.service("Node1").tables
    t = st.pods["pod3"].tenant
    assert st.pods["pod1"].ip == IPv4Address("10.244.1.1")
    assert resolve(tables, Endpoint(t, "10.244.2.5", 546)) == ConnTarget(st.node_ids()["Node2"], "Node2")
    assert isinstance(resolve(tables, Endpoint(t, "10.5.6.7", 546)), ServiceHandler)
    assert ingress_lookup(tables, Endpoint(t, "202.2.3.4", 8080)) == Endpoint(t, "10.5.6.7", 546)
    assert service_select(tables, Endpoint(t, "10.5.6.7", 546)) == Endpoint(t, "10.244.2.5", 546)


@pytest.mark.parametrize("scenario,table,node,golden", [
    ("ingress-demo", "routes", "Node1", "ingress_demo_routes_Node1.txt"),
    ("ingress-demo", "routes", "Node2", "ingress_demo_routes_Node2.txt"),
    ("ingress-demo", "services", "Node1", "ingress_demo_services_Node1.txt"),
    ("ingress-demo", "ingress", "Node1", "ingress_demo_ingress_Node1.txt"),
    ("ingress-demo", "policies", "Node1", "ingress_demo_policies_Node1.txt"),
    ("tenants", "routes", None, "tenants_routes.txt"),
    ("tenants", "policies", None, "tenants_policies.txt"),
])
def test_dumps_match_golden_files(scenario, table, node, golden):
    assert dump_tables(scenario, table, node) == (GOLDEN / golden).read_text()


def test_ingress_demo_dump_lines():
    assert "10.244.2.0/24 -> conn(Node2)\n" in dump_tables("ingress-demo", "routes", "Node1")
    assert dump_tables("ingress-demo", "ingress") == "202.2.3.4:8080 -> 10.5.6.7:546\n"


@pytest.mark.parametrize("table", ["routes", "services", "ingress", "policies"])
def test_empty_scenario_has_empty_tables(table):
    assert dump_tables("empty", table) == ""


def test_unknown_table_is_rejected():
    with pytest.raises(ValueError):
        dump_tables("ingress-demo", "arp")


def test_allocator_hands_out_lowest_free_host():
    a = PodIpAllocator("10.244.1.0/29")
    got = [a.allocate(1) for _ in range(6)]
    assert got[0] == IPv4Address("10.244.1.1") and got[-1] == IPv4Address("10.244.1.6")
    with pytest.raises(ValueError):
        a.allocate(1)
    a.release(1, "10.244.1.3")
    assert a.allocate(1) == IPv4Address("10.244.1.3")


def test_shared_tenant_cidr_lets_tenants_overlap():
    a = PodIpAllocator("10.244.1.0/24", shared_tenant_cidr=True)
    assert a.allocate(1) == a.allocate(2)
    b = PodIpAllocator("10.244.1.0/24")
    assert b.allocate(1) != b.allocate(2)
