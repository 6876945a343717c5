"""Two pods on two nodes talk through the simulated fabric.

Run with ``python3 demos/quickstart.py``. Everything runs inline on a
simulated clock, so the output is identical on every run.
"""

from tsor.sim import Cluster

with Cluster("two-node") as cl:
    server = cl.client("server")
    client = cl.client("client")
    print(f"server pod at {server.ip}, client pod at {client.ip}")

    lst = server.listen(8080)
    sock = client.connect((str(server.ip), 8080))
    peer = lst.accept()
    print(f"connected {sock.local_ep} -> {sock.remote_ep}")

    sock.sendall(b"hello over rdma")
    msg = peer.recv_exactly(15)
    peer.sendall(msg.upper())
    print("reply:", sock.recv_exactly(15).decode())

    sock.close()
    peer.close()
    lst.close()
    cl.settle()

    t = cl.totals()
    for key in ("fabric_connections", "handshake_msgs", "data_writes", "credit_msgs", "channels_closed"):
        print(f"  {key:<20} {t.get(key, 0)}")
    print(f"simulated time: {cl.clock() * 1e6:.1f} us")
