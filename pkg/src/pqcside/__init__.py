"""Quantum-safe sidecar proxies for 5G service-based-interface signaling.

The package is organised by role:

* :mod:`pqcside.provider` and :mod:`pqcside.certs` hold the crypto suite
  registry, key material and the compact certificate format.
* :mod:`pqcside.handshake` and :mod:`pqcside.record` implement the tunnel
  protocol as pure message-in/message-out state machines.
* :mod:`pqcside.proxy`, :mod:`pqcside.sba` and :mod:`pqcside.wrapper` are the
  network services.
* :mod:`pqcside.stats` and :mod:`pqcside.harness` run and summarise the
  latency benchmark.
"""

__version__ = "0.1.0"
