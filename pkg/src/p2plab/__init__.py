"""Encrypted P2P transport lab.

Core pieces: the v2 packet codec and handshake (`transport`, `cipher`),
payload-length traffic classification (`classifier`), the address manager
(`addrman`), node behaviour (`node`), the deterministic network simulator
with in-path adversary (`netsim`), and scenario runners (`scenarios`).
A FastAPI service (`p2plab.service`) wraps the scenario runners; the
`p2plab` CLI is a thin client for it.
"""

__version__ = "0.1.0"
