"""Tenants share nodes but cannot reach each other.

The ``tenants`` scenario puts pods of three tenants on the same three
nodes. A connect across tenants fails before any byte touches the fabric.
"""

from tsor.errors import PermissionDenied, TsorError
from tsor.sim import Cluster

with Cluster("tenants") as cl:
    pods = {name: cl.client(name) for name in ("a1", "a2", "g2", "d2")}
    for name, c in pods.items():
        if name != "a1":
            c.listen(8000)
    src = pods["a1"]
    for name in ("a2", "g2", "d2"):
        writes = cl.fabric.writes
        try:
            src.connect((str(pods[name].ip), 8000)).close()
            verdict = "connected"
        except PermissionDenied:
            verdict = "denied"
        except TsorError as exc:
            verdict = type(exc).__name__
        cl.settle()
        print(f"a1 (tenant {src.tenant}) -> {name} (tenant {pods[name].tenant}): {verdict:<10} "
              f"fabric writes {cl.fabric.writes - writes}")
    print()
    print(cl.services["Node1"].dump_table("policies"), end="")
