"""A plain TCP client reaches a pod through the ingress gateway.

The gateway listens on a loopback port for each external endpoint in the
ingress table and bridges every accepted connection onto a pod socket.
This needs the threaded driver, since real sockets block.
"""

import threading

from tsor.gateway import IngressGateway, serve_echo, tcp_roundtrip
from tsor.sim import Cluster

with Cluster("ingress-demo", threaded=True) as cl:
    stop = threading.Event()
    serve_echo(cl.client("pod3"), 546, stop)
    gw = IngressGateway(cl.client("pod1"))
    for ext, addr in gw.expose_all().items():
        print(f"{ext} is reachable at {addr[0]}:{addr[1]}")
        payload = b"x" * 100_000
        ok = tcp_roundtrip(addr, payload) == payload
        print(f"100 kB echoed through the cluster: {'ok' if ok else 'MISMATCH'}")
    for b in gw.bridges:
        b.wait(10)
    gw.close()
    stop.set()
