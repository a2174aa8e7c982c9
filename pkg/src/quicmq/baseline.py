"""Scripted TCP/TLS1.2 baseline: hand-enumerated packet ladders for the
connection-establishment comparison, an ordered-delivery latency model for
the head-of-line experiments, and state/throughput series for the half-open
and migration experiments.

This is an analytical model, not a TCP implementation: ladders are replayed
through the simulator datagram by datagram so packet counts always come out
of traces, and delivery ordering is computed exactly, but congestion control
and ack coalescing are reduced to a documented per-loss cost (each dropped
datagram costs one retransmission, one duplicate/probe ack from the peer,
and one ack elicited by the retransmission - TCP acks every recovered
segment, where the QUIC side coalesces ack information into packets it is
sending anyway).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .netsim import Address, SimNetwork

# Hand-enumerated connect/subscribe/disconnect ladders. Direction "c" is
# client to broker, "s" broker to client; sizes are representative on-wire
# bytes (they do not affect any acceptance number).

_SETUP_FULL = [
    ("c", "syn", 74),
    ("s", "syn_ack", 74),
    ("c", "ack", 66),
    ("c", "tls_client_hello", 280),
    ("s", "ack", 66),
    ("s", "tls_server_hello_cert_done", 1200),
    ("c", "tls_key_exchange_ccs_finished", 192),
    ("s", "tls_ccs_finished", 117),
    ("c", "mqtt_connect", 110),
    ("s", "mqtt_connack", 70),
    ("c", "ack", 66),
]

_SETUP_RESUMED = [
    ("c", "syn", 74),
    ("s", "syn_ack", 74),
    ("c", "ack", 66),
    ("c", "tls_client_hello_ticket", 360),
    ("s", "tls_server_hello_ccs_finished", 180),
    ("c", "tls_ccs_finished", 117),
    ("c", "mqtt_connect", 110),
    ("s", "mqtt_connack", 70),
    ("c", "ack", 66),
]

_SUBSCRIBE_PHASE = [
    ("c", "mqtt_subscribe", 90),
    ("s", "ack", 66),
    ("s", "mqtt_suback", 71),
    ("c", "ack", 66),
]

_TEARDOWN = [
    ("c", "mqtt_disconnect", 68),
    ("c", "fin", 66),
    ("s", "fin_ack", 66),
    ("c", "ack", 66),
]

LADDERS = {
    # Full TCP+TLS1.2 handshake: the baseline the reduction table uses.
    ("1rtt_equiv", "publisher"): _SETUP_FULL + _TEARDOWN,
    ("1rtt_equiv", "subscriber"): _SETUP_FULL + _SUBSCRIBE_PHASE + _TEARDOWN,
    # Reconnection with a TLS session ticket (abbreviated handshake).
    ("repeat_connect", "publisher"): _SETUP_RESUMED + _TEARDOWN,
    ("repeat_connect", "subscriber"): _SETUP_RESUMED + _SUBSCRIBE_PHASE + _TEARDOWN,
}


class BaselineError(Exception):
    pass


def baseline_packet_count(scenario: str, role: str) -> int:
    """Datagrams the role sees (sent plus received) for one lossless ladder.
    The broker is the far end of both the publisher and subscriber ladders."""
    if role == "broker":
        return (baseline_packet_count(scenario, "publisher")
                + baseline_packet_count(scenario, "subscriber"))
    try:
        return len(LADDERS[(scenario, role)])
    except KeyError:
        raise BaselineError(f"unknown scenario/role {scenario!r}/{role!r}") from None


@dataclass
class TcpLadderRunner:
    """Replay one client's ladder through the simulator so its packet counts
    are trace-derived, applying the documented per-loss cost model."""

    net: SimNetwork
    client_addr: Address
    broker_addr: Address
    ladder: list
    rto_s: float = 0.2
    done: bool = False
    _step: int = 0

    def start(self) -> None:
        self._advance()

    def _endpoints(self, direction: str) -> tuple[Address, Address]:
        if direction == "c":
            return self.client_addr, self.broker_addr
        return self.broker_addr, self.client_addr

    def _advance(self) -> None:
        if self._step >= len(self.ladder):
            self.done = True
            return
        direction, label, size = self.ladder[self._step]
        self._step += 1
        self._send_step(direction, label, size)

    def _send_step(self, direction: str, label: str, size: int) -> None:
        src, dst = self._endpoints(direction)
        delivered = self._send(size, src, dst, f"tcp {label}")
        if delivered:
            delay = self.net.config.delay_ms / 1000.0
            self.net.schedule(delay, self._advance)
        else:
            self.net.schedule(self.rto_s, lambda: self._recover(direction, label, size))

    def _recover(self, direction: str, label: str, size: int) -> None:
        """Timeout recovery for one lost datagram. Both ends of the stalled
        exchange retransmit (the classic crossed-timer duplicate), the peer
        emits its probe/duplicate ack, and the recovered segment gets its
        own cumulative ack: four datagrams per loss event."""
        src, dst = self._endpoints(direction)
        self._send(66, dst, src, f"tcp dup_ack {label}")
        if self._step > 1:
            pdir, plabel, psize = self.ladder[self._step - 2]
            psrc, pdst = self._endpoints(pdir)
            self._send(psize, psrc, pdst, f"tcp {plabel} spurious_retx")
        delivered = self._send(size, src, dst, f"tcp {label} retx")
        if not delivered:
            self.net.schedule(self.rto_s, lambda: self._recover(direction, label, size))
            return
        delay = self.net.config.delay_ms / 1000.0
        self._send(66, dst, src, f"tcp ack_of_retx {label}")
        self.net.schedule(delay, self._advance)

    def _send(self, size: int, src: Address, dst: Address, annotation: str) -> bool:
        self.net.send(b"\x00" * size, src, dst, annotation)
        return self.net.trace[-1].event != "drop"


def run_tcp_ladders(net: SimNetwork, broker_addr: Address,
                    endpoints: list[tuple[Address, str]],
                    scenario: str = "1rtt_equiv", rto_s: float = 0.2) -> None:
    """Replay the ladders for several client endpoints; the broker address
    is registered as a sink. Runs the network to completion."""
    registered = set()
    if broker_addr not in registered:
        net.register(broker_addr, lambda payload, src: None)
        registered.add(broker_addr)
    runners = []
    for addr, role in endpoints:
        net.register(addr, lambda payload, src: None)
        runner = TcpLadderRunner(net, addr, broker_addr,
                                 LADDERS[(scenario, role)], rto_s=rto_s)
        runners.append(runner)
        runner.start()
    net.run()


# ---------------------------------------------------------------------------
# Head-of-line latency model
# ---------------------------------------------------------------------------

def hol_latency_trace(message_count: int, send_interval_s: float,
                      one_way_delay_s: float, drop_every_n: int,
                      rto_s: float, second_hop_delay_s: float | None = None
                      ) -> list[float]:
    """Per-message delivery latency under ordered (in-sequence) delivery.

    Message ``i`` leaves at ``i * T``; every ``drop_every_n``-th original is
    lost and retransmitted once after ``rto_s`` (retransmissions are not
    re-dropped, matching the targeted drop rule the QUIC side runs under).
    The receiver releases a message only once everything before it has
    arrived - the head-of-line stall - then forwards it over a lossless
    second hop.
    """
    if drop_every_n and drop_every_n < 2:
        raise BaselineError("drop_every_n must be >= 2 or 0")
    second_hop = one_way_delay_s if second_hop_delay_s is None else second_hop_delay_s
    latencies = []
    release_floor = 0.0
    for i in range(1, message_count + 1):
        sent = i * send_interval_s
        arrival = sent + one_way_delay_s
        if drop_every_n and i % drop_every_n == 0:
            arrival = sent + rto_s + one_way_delay_s
        release = max(arrival, release_floor)
        release_floor = release
        latencies.append(release + second_hop - sent)
    return latencies


# ---------------------------------------------------------------------------
# Half-open connection state model
# ---------------------------------------------------------------------------

def half_open_series(conns: int, restart_at_s: float, horizon_s: float,
                     keepalive_s: float | None = None,
                     sample_interval_s: float = 1.0) -> list[tuple[float, int]]:
    """Broker-side connection-state count over time for the TCP baseline.

    Without keep-alive the broker has no way to notice dead publishers, so
    the half-open entries survive the whole horizon. With keep-alive the
    entries drop once one and a half keep-alive periods elapse in silence.
    """
    series = []
    t = 0.0
    while t <= horizon_s:
        count = conns
        if keepalive_s is not None and t >= restart_at_s + 1.5 * keepalive_s:
            count = 0
        series.append((t, count))
        t += sample_interval_s
    return series


# ---------------------------------------------------------------------------
# Migration throughput model
# ---------------------------------------------------------------------------

@dataclass
class MigrationBaseline:
    throughput: list[tuple[float, int]]  # per-second delivered messages
    reestablishments: int
    zero_windows: list[tuple[float, float]]
    max_gap_s: float = field(default=0.0)


def migration_model(duration_s: float, change_interval_s: float,
                    publish_interval_s: float, rtt_s: float) -> MigrationBaseline:
    """Deliveries over time when every address change tears the connection
    down and a full TCP+TLS+MQTT ladder (three round trips) must complete
    before traffic resumes."""
    reestablish_s = 3.0 * rtt_s
    changes = [t for t in _frange(change_interval_s, duration_s, change_interval_s)]
    zero_windows = [(t, t + reestablish_s) for t in changes]
    deliveries = []
    t = publish_interval_s
    while t <= duration_s:
        arrival = t + rtt_s / 2.0
        for start, end in zero_windows:
            if start <= t < end:
                # Sent while down: queued until the connection is back.
                arrival = end + rtt_s / 2.0
                break
        deliveries.append(arrival)
        t += publish_interval_s
    deliveries.sort()
    series = []
    second = 0
    while second <= duration_s:
        count = sum(1 for d in deliveries if second <= d < second + 1)
        series.append((float(second), count))
        second += 1
    max_gap = 0.0
    for a, b in zip(deliveries, deliveries[1:]):
        max_gap = max(max_gap, b - a)
    return MigrationBaseline(series, len(changes), zero_windows, max_gap)


def _frange(start: float, stop: float, step: float) -> list[float]:
    out = []
    v = start
    while v < stop:
        out.append(v)
        v += step
    return out
