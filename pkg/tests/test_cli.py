import json

import pytest

from tsor import metrics
from tsor.cli import dump_tables, main

GOLDEN = __import__("pathlib").Path(__file__).parent / "golden"


def test_run_writes_report_and_csv(tmp_path, capsys):
    rep, csv = tmp_path / "r.json", tmp_path / "h.csv"
    rc = main(["run", "--scenario", "two-node", "--workload", "pingpong", "--param", "rounds=5",
               "--report", str(rep), "--csv", str(csv)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "invariants: ok" in out and "latency_us: n=5" in out
    report = json.loads(rep.read_text())
    assert report["schema"] == metrics.SCHEMA
    assert report["run"]["params"]["rounds"] == 5
    assert report["run"]["driver"] == "inline"
    rows = csv.read_text().splitlines()
    assert rows[0] == "lo_us,hi_us,count"
    assert sum(int(r.rsplit(",", 1)[1]) for r in rows[1:]) == 5


def test_run_quiet(capsys):
    assert main(["run", "--scenario", "two-node", "--workload", "echo", "--param", "sockets=3", "--quiet"]) == 0
    assert capsys.readouterr().out == ""


@pytest.mark.parametrize("param", ["bogus=1", "sockets=many"])
def test_bad_param_exits_2(param, capsys):
    assert main(["run", "--scenario", "two-node", "--workload", "echo", "--param", param]) == 2
    assert "tsorsim:" in capsys.readouterr().err


def test_missing_scenario_exits_2(capsys):
    assert main(["run", "--scenario", "no-such-file", "--workload", "echo"]) == 2


def test_param_syntax_rejected():
    with pytest.raises(SystemExit):
        main(["run", "--scenario", "two-node", "--workload", "echo", "--param", "novalue"])


def test_dump_matches_golden(capsys):
    assert main(["dump", "--scenario", "ingress-demo", "--table", "routes", "--node", "Node1"]) == 0
    assert capsys.readouterr().out == (GOLDEN / "ingress_demo_routes_Node1.txt").read_text()


def test_dump_all_nodes_has_headers():
    text = dump_tables("ingress-demo", "routes")
    assert text.startswith("[Node1]\n") and "[Node2]\n" in text


def test_dump_unknown_node(capsys):
    assert main(["dump", "--scenario", "ingress-demo", "--table", "routes", "--node", "Node9"]) == 2


def test_dump_empty_scenario():
    assert dump_tables("empty", "routes") == ""


def test_check_list(capsys):
    assert main(["check", "--list"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 13 and lines[0].split()[0] == "1"


def test_check_one_criterion(capsys):
    assert main(["check", "routing-golden"]) == 0
    assert capsys.readouterr().out.startswith("PASS  8 routing-golden")
