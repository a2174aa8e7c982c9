"""MQTT over a QUIC-style secure transport.

The package bundles the transport (handshake, packet crypto, streams,
migration), the agent layer bridging MQTT and the transport, a minimal MQTT
broker, a deterministic discrete-event network simulator, and a benchmark
CLI for the connection-overhead, head-of-line-blocking, half-open-connection,
and migration experiments.
"""

__version__ = "0.1.0"
