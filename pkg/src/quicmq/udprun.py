"""Thin real-UDP binding for manual runs.

Exposes the same duck-typed surface the agents use on the simulator
(register/send/schedule/clock), backed by one UDP socket and a monotonic
clock. Good enough to run a broker, publisher, and subscriber by hand on
loopback; the benchmarks always use the simulator.
"""

from __future__ import annotations

import heapq
import select
import socket
import time
from typing import Callable

from .netsim import Address, Timer


class _WallClock:
    def __init__(self):
        self._t0 = time.monotonic()

    @property
    def now_s(self) -> float:
        return time.monotonic() - self._t0

    @property
    def now_us(self) -> int:
        return int(self.now_s * 1_000_000)


class UdpNetwork:
    """One endpoint's UDP event loop."""

    def __init__(self):
        self.clock = _WallClock()
        self._sock: socket.socket | None = None
        self._handler: Callable[[bytes, Address], None] | None = None
        self._timers: list = []
        self._seq = 0
        self.trace: list[str] = []
        self.running = False

    def register(self, address: Address, handler: Callable[[bytes, Address], None]) -> None:
        if self._sock is not None:
            raise RuntimeError("one endpoint per UDP runner")
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.bind(address)
        self._sock.setblocking(False)
        self._handler = handler

    def unregister(self, address: Address) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def local_address(self) -> Address:
        return self._sock.getsockname()

    def change_address(self, old: Address, new: Address) -> None:
        handler = self._handler
        self.unregister(old)
        self.register(new, handler)

    def send(self, payload: bytes, src: Address, dst: Address, annotation: str = "") -> None:
        self.trace.append(f"{self.clock.now_us}\tsend\t{dst[0]}:{dst[1]}\t{len(payload)}\t{annotation}")
        if self._sock is not None:
            self._sock.sendto(payload, dst)

    def schedule(self, delay_s: float, fn: Callable[[], None]) -> Timer:
        timer = Timer(fn)
        self._seq += 1
        heapq.heappush(self._timers, (self.clock.now_s + max(0.0, delay_s), self._seq, timer))
        return timer

    def write_trace(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.trace) + ("\n" if self.trace else ""))

    # -- loop -------------------------------------------------------------

    def _fire_due_timers(self) -> float | None:
        while self._timers:
            at, _, timer = self._timers[0]
            if timer.cancelled:
                heapq.heappop(self._timers)
                continue
            now = self.clock.now_s
            if at <= now:
                heapq.heappop(self._timers)
                timer.fn()
                continue
            return at - now
        return None

    def run(self, until_s: float | None = None,
            stop: Callable[[], bool] | None = None) -> None:
        self.running = True
        try:
            while self.running:
                if stop is not None and stop():
                    return
                if until_s is not None and self.clock.now_s >= until_s:
                    return
                wait = self._fire_due_timers()
                if wait is None:
                    wait = 0.2
                if until_s is not None:
                    wait = min(wait, max(0.0, until_s - self.clock.now_s))
                if self._sock is None:
                    time.sleep(min(wait, 0.05))
                    continue
                ready, _, _ = select.select([self._sock], [], [], min(wait, 0.2))
                if ready:
                    for _ in range(64):
                        try:
                            payload, src = self._sock.recvfrom(65535)
                        except BlockingIOError:
                            break
                        except OSError:
                            return
                        self.trace.append(
                            f"{self.clock.now_us}\trecv\t{src[0]}:{src[1]}\t{len(payload)}\t")
                        if self._handler is not None:
                            self._handler(payload, src)
        finally:
            self.running = False

    def stop(self) -> None:
        self.running = False
