"""Message transports for gateway networks.

Two interchangeable modes:

* :class:`InMemoryNetwork` — a single-threaded discrete-event simulator with
  a virtual microsecond clock.  Latency, loss, reordering, partitions and
  node service times are all driven by one seeded RNG, so a fixed seed
  reproduces the exact same schedule, byte for byte.
* :class:`SocketNetwork` — real TCP on localhost with length-prefixed
  frames, one connection per directed pair, for wall-clock runs.

Nodes implement two callbacks::

    on_message(sender_id, frame, clock)
    on_timer(tag, clock)

``clock`` measures the handling: ``arrive_us`` is when the frame landed,
``now_us`` advances as the node spends simulated service time.  In the
simulator a node is a single server — work queues when frames arrive faster
than it spends time on them, which is how load shows up in the latency
metrics.  On sockets ``spend`` is a no-op and the clock reads wall time.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass
from enum import Enum
from random import Random
from typing import Iterable, Optional, Protocol

logger = logging.getLogger(__name__)

MS = 1000  # microseconds per millisecond

# Virtual clocks start at 0; chain timestamps are epoch milliseconds.  A fixed
# offset keeps simulated timestamps in a realistic range and, more to the
# point, identical across runs.
EPOCH_MS = 1_700_000_000_000


def wall_ms(now_us: int) -> int:
    """Map a virtual-clock reading to an epoch-millisecond timestamp."""
    return EPOCH_MS + now_us // MS


class UnknownEndpointError(Exception):
    """Message addressed to a node id that was never registered."""


class LivelockError(Exception):
    """The virtual-time limit passed with events still pending."""

    def __init__(self, message: str, pending: dict[str, int]):
        super().__init__(message)
        self.pending = pending


class ByzantineStrategy(Enum):
    """Misbehaviour profiles a gateway can be configured with."""

    EQUIVOCATE = "equivocate"
    MUTE_LEADER = "mute-leader"
    CORRUPT_PAYLOAD = "corrupt-payload"


@dataclass(frozen=True)
class Latency:
    """Fixed or uniformly distributed link delay, in microseconds."""

    min_us: int
    max_us: int

    @classmethod
    def fixed(cls, us: int) -> "Latency":
        return cls(us, us)

    @classmethod
    def uniform_ms(cls, lo_ms: float, hi_ms: float) -> "Latency":
        return cls(int(lo_ms * MS), int(hi_ms * MS))

    def __post_init__(self) -> None:
        if self.min_us < 0 or self.max_us < self.min_us:
            raise ValueError(f"invalid latency range [{self.min_us}, {self.max_us}]")

    def draw(self, rng: Random) -> int:
        if self.min_us == self.max_us:
            return self.min_us
        return rng.randint(self.min_us, self.max_us)


@dataclass(frozen=True)
class NetConfig:
    """Knobs for the simulated fabric.

    ``drop_rate``, ``reorder_window`` and ``partitions`` apply to
    gateway-to-gateway links only; device links are considered local and
    lossless.  ``byzantine`` names gateways that deviate from the protocol
    and how (the gateway node interprets the strategy).
    """

    latency: Latency = Latency.uniform_ms(1, 5)
    device_latency: Latency = Latency.fixed(0)
    drop_rate: float = 0.0
    reorder_window: int = 0
    partitions: tuple[frozenset[str], ...] = ()
    byzantine: tuple[tuple[str, ByzantineStrategy], ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_rate <= 1.0:
            raise ValueError("drop_rate must be within [0, 1]")
        if self.reorder_window < 0:
            raise ValueError("reorder_window must be non-negative")
        flat: set[str] = set()
        for group in self.partitions:
            overlap = flat & group
            if overlap:
                raise ValueError(f"partitions overlap on {sorted(overlap)}")
            flat |= group

    def strategy_of(self, node_id: str) -> Optional[ByzantineStrategy]:
        for name, strategy in self.byzantine:
            if name == node_id:
                return strategy
        return None


class WorkClock:
    """Virtual clock handed to a node while it handles one event."""

    __slots__ = ("arrive_us", "start_us", "_now")

    def __init__(self, arrive_us: int, start_us: int):
        self.arrive_us = arrive_us
        self.start_us = start_us
        self._now = start_us

    @property
    def now_us(self) -> int:
        return self._now

    def spend(self, us: int) -> None:
        """Consume ``us`` microseconds of service time."""
        if us < 0:
            raise ValueError("cannot spend negative time")
        self._now += us


class WallClock:
    """Socket-mode stand-in: reads the monotonic clock, ignores spend()."""

    __slots__ = ("arrive_us",)

    def __init__(self, arrive_us: int):
        self.arrive_us = arrive_us

    @property
    def start_us(self) -> int:
        return self.arrive_us

    @property
    def now_us(self) -> int:
        return time.monotonic_ns() // 1000

    def spend(self, us: int) -> None:
        pass


class Node(Protocol):
    node_id: str

    def on_message(self, sender: str, frame: bytes, clock: WorkClock) -> None: ...

    def on_timer(self, tag: object, clock: WorkClock) -> None: ...


@dataclass
class NetStats:
    sent: int = 0
    delivered: int = 0
    dropped_random: int = 0
    dropped_partition: int = 0
    timers_fired: int = 0


_DELIVERY = 0
_TIMER = 1


class InMemoryNetwork:
    """Deterministic discrete-event fabric with a virtual microsecond clock."""

    def __init__(self, cfg: NetConfig = NetConfig(), *, record_trace: bool = False):
        self.cfg = cfg
        self.stats = NetStats()
        self.trace: list[tuple[int, str, str, int, int]] = []
        self._record_trace = record_trace
        self._rng = Random(cfg.seed)
        self._nodes: dict[str, Node] = {}
        self._kinds: dict[str, str] = {}
        self._groups: dict[str, int] = {}
        self._queue: list[list] = []
        self._seq = itertools.count()
        self._now = 0
        self._busy: dict[str, int] = {}
        self._cancelled: set[int] = set()
        self._timer_ids = itertools.count(1)
        self._active_clock: Optional[WorkClock] = None
        self._recent: dict[str, list[list]] = {}

    # -- registration -------------------------------------------------

    def register(self, node: Node, *, kind: str = "gateway") -> None:
        if node.node_id in self._nodes:
            raise ValueError(f"node id {node.node_id!r} already registered")
        self._nodes[node.node_id] = node
        self._kinds[node.node_id] = kind
        if kind == "gateway":
            for i, group in enumerate(self.cfg.partitions):
                if node.node_id in group:
                    self._groups[node.node_id] = i
                    break
            else:
                self._groups[node.node_id] = len(self.cfg.partitions)

    @property
    def now_us(self) -> int:
        clock = self._active_clock
        return clock.now_us if clock is not None else self._now

    # -- sending ------------------------------------------------------

    def send(self, src: str, dst: str, frame: bytes) -> None:
        if dst not in self._nodes:
            raise UnknownEndpointError(f"unknown endpoint {dst!r}")
        if src not in self._nodes:
            raise UnknownEndpointError(f"unknown endpoint {src!r}")
        self.stats.sent += 1
        gateway_link = (
            self._kinds[src] == "gateway" and self._kinds[dst] == "gateway"
        )
        if gateway_link:
            if self._groups.get(src) != self._groups.get(dst):
                self.stats.dropped_partition += 1
                return
            if self.cfg.drop_rate > 0.0 and self._rng.random() < self.cfg.drop_rate:
                self.stats.dropped_random += 1
                return
            latency = self.cfg.latency.draw(self._rng)
        else:
            latency = self.cfg.device_latency.draw(self._rng)
        record = [self.now_us + latency, next(self._seq), _DELIVERY, dst, src, frame]
        heapq.heappush(self._queue, record)
        if gateway_link and self.cfg.reorder_window > 0:
            self._maybe_reorder(dst, record)

    def _maybe_reorder(self, dst: str, record: list) -> None:
        # Swap payloads (not schedule slots) with a recent in-flight frame to
        # the same destination: contents trade places, so one message
        # overtakes at most reorder_window predecessors.
        recent = self._recent.setdefault(dst, [])
        recent[:] = [r for r in recent if r[2] == _DELIVERY][
            -self.cfg.reorder_window:
        ]
        if recent and self._rng.random() < 0.5:
            other = recent[self._rng.randrange(len(recent))]
            record[4], other[4] = other[4], record[4]
            record[5], other[5] = other[5], record[5]
        recent.append(record)

    def broadcast(self, src: str, dsts: Iterable[str], frame: bytes) -> None:
        for dst in dsts:
            if dst != src:
                self.send(src, dst, frame)

    # -- timers -------------------------------------------------------

    def set_timer(self, node_id: str, delay_us: int, tag: object) -> int:
        if node_id not in self._nodes:
            raise UnknownEndpointError(f"unknown endpoint {node_id!r}")
        if delay_us < 0:
            raise ValueError("delay_us must be non-negative")
        timer_id = next(self._timer_ids)
        heapq.heappush(
            self._queue,
            [self.now_us + delay_us, next(self._seq), _TIMER, node_id, timer_id, tag],
        )
        return timer_id

    def cancel_timer(self, timer_id: int) -> None:
        self._cancelled.add(timer_id)

    # -- event loop ---------------------------------------------------

    def _dispatch(self, record: list) -> None:
        at = record[0]
        node = self._nodes[record[3]]
        start = max(at, self._busy.get(record[3], 0))
        clock = WorkClock(at, start)
        self._active_clock = clock
        try:
            if record[2] == _DELIVERY:
                self.stats.delivered += 1
                if self._record_trace:
                    frame = record[5]
                    self.trace.append(
                        (at, record[4], record[3], frame[0] if frame else -1, len(frame))
                    )
                node.on_message(record[4], record[5], clock)
            else:
                self.stats.timers_fired += 1
                node.on_timer(record[5], clock)
        finally:
            self._active_clock = None
        record[2] = -1  # consumed; excludes it from future reorder swaps
        self._busy[record[3]] = clock.now_us

    def _pending_summary(self) -> dict[str, int]:
        summary: dict[str, int] = {}
        for record in self._queue:
            if record[2] == _TIMER and record[4] in self._cancelled:
                continue
            summary[record[3]] = summary.get(record[3], 0) + 1
        return summary

    def run_until_quiescent(self, limit_us: int = 3_600_000 * MS) -> int:
        """Process events until none remain; returns elapsed virtual µs.

        Raises :class:`LivelockError` if virtual time would pass
        ``limit_us`` with events still queued.
        """
        while self._queue:
            record = self._queue[0]
            if record[2] == _TIMER and record[4] in self._cancelled:
                heapq.heappop(self._queue)
                self._cancelled.discard(record[4])
                continue
            if record[0] > limit_us:
                raise LivelockError(
                    f"virtual-time limit {limit_us}us exceeded with "
                    f"{len(self._queue)} events pending",
                    self._pending_summary(),
                )
            heapq.heappop(self._queue)
            self._now = record[0]
            self._dispatch(record)
        return self._now

    def run_until(self, deadline_us: int) -> None:
        """Process events scheduled up to ``deadline_us`` and stop there."""
        while self._queue and self._queue[0][0] <= deadline_us:
            record = heapq.heappop(self._queue)
            if record[2] == _TIMER and record[4] in self._cancelled:
                self._cancelled.discard(record[4])
                continue
            self._now = record[0]
            self._dispatch(record)
        self._now = max(self._now, deadline_us)


_LENGTH = struct.Struct(">I")


class SocketNetwork:
    """TCP transport: length-prefixed frames over one connection per
    directed pair, every node serialized by its own lock.

    Device fleets share one connection via an envelope frame carrying the
    device id (see :class:`~appendchain.devices.DeviceHub`); gateway logic
    is unaffected because the dispatcher unwraps before delivery.
    """

    ENVELOPE = 0x41
    HELLO = 0x40

    def __init__(self, cfg: NetConfig = NetConfig(), host: str = "127.0.0.1"):
        self.cfg = cfg
        self.host = host
        self.stats = NetStats()
        self._nodes: dict[str, Node] = {}
        self._aliases: dict[str, str] = {}  # device id -> hub node id
        self._ports: dict[str, int] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._listeners: dict[str, socket.socket] = {}
        self._outbound: dict[tuple[str, str], socket.socket] = {}
        self._outbound_lock = threading.Lock()
        self._threads: list[threading.Thread] = []
        self._timers: dict[int, threading.Timer] = {}
        self._timer_ids = itertools.count(1)
        self._closing = threading.Event()
        self.activity = 0

    @property
    def now_us(self) -> int:
        return time.monotonic_ns() // 1000

    def register(self, node: Node, *, kind: str = "gateway") -> None:
        if node.node_id in self._nodes:
            raise ValueError(f"node id {node.node_id!r} already registered")
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self.host, 0))
        listener.listen(32)
        self._nodes[node.node_id] = node
        self._ports[node.node_id] = listener.getsockname()[1]
        self._locks[node.node_id] = threading.Lock()
        self._listeners[node.node_id] = listener
        thread = threading.Thread(
            target=self._accept_loop, args=(node.node_id, listener), daemon=True
        )
        thread.start()
        self._threads.append(thread)

    def register_alias(self, device_id: str, hub_id: str) -> None:
        """Route frames for ``device_id`` over ``hub_id``'s connection."""
        self._aliases[device_id] = hub_id

    # -- wire helpers -------------------------------------------------

    @staticmethod
    def _write_frame(sock: socket.socket, frame: bytes) -> None:
        sock.sendall(_LENGTH.pack(len(frame)) + frame)

    @staticmethod
    def _read_exact(sock: socket.socket, n: int) -> Optional[bytes]:
        buf = bytearray()
        while len(buf) < n:
            chunk = sock.recv(n - len(buf))
            if not chunk:
                return None
            buf.extend(chunk)
        return bytes(buf)

    @classmethod
    def _read_frame(cls, sock: socket.socket) -> Optional[bytes]:
        head = cls._read_exact(sock, 4)
        if head is None:
            return None
        (length,) = _LENGTH.unpack(head)
        if length > 64 * 1024 * 1024:
            return None
        return cls._read_exact(sock, length)

    # -- receive path -------------------------------------------------

    def _accept_loop(self, node_id: str, listener: socket.socket) -> None:
        while not self._closing.is_set():
            try:
                conn, _ = listener.accept()
            except OSError:
                return
            thread = threading.Thread(
                target=self._recv_loop, args=(node_id, conn), daemon=True
            )
            thread.start()
            self._threads.append(thread)

    def _recv_loop(self, node_id: str, conn: socket.socket) -> None:
        peer = None
        try:
            hello = self._read_frame(conn)
            if not hello or hello[0] != self.HELLO:
                return
            peer = hello[1:].decode("utf-8", errors="replace")
            while not self._closing.is_set():
                frame = self._read_frame(conn)
                if frame is None:
                    return
                sender = peer
                if frame and frame[0] == self.ENVELOPE and len(frame) >= 5:
                    (id_len,) = _LENGTH.unpack(frame[1:5])
                    if 5 + id_len <= len(frame):
                        sender = frame[5:5 + id_len].decode(
                            "utf-8", errors="replace"
                        )
                        frame = frame[5 + id_len:]
                self._deliver(sender, node_id, frame)
        except OSError:
            return
        finally:
            conn.close()

    def _deliver(self, sender: str, node_id: str, frame: bytes) -> None:
        node = self._nodes.get(node_id)
        if node is None:
            return
        clock = WallClock(self.now_us)
        with self._locks[node_id]:
            self.activity += 1
            self.stats.delivered += 1
            try:
                node.on_message(sender, frame, clock)
            except Exception:
                logger.exception("handler failed on %s", node_id)

    # -- send path ----------------------------------------------------

    def _connection(self, src: str, dst: str) -> socket.socket:
        key = (src, dst)
        with self._outbound_lock:
            sock = self._outbound.get(key)
            if sock is None:
                sock = socket.create_connection(
                    (self.host, self._ports[dst]), timeout=10
                )
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._write_frame(
                    sock, bytes([self.HELLO]) + src.encode("utf-8")
                )
                self._outbound[key] = sock
            return sock

    def send(self, src: str, dst: str, frame: bytes) -> None:
        real_dst = self._aliases.get(dst, dst)
        real_src = self._aliases.get(src, src)
        if real_dst not in self._nodes:
            raise UnknownEndpointError(f"unknown endpoint {dst!r}")
        if real_dst != dst:
            # wrap so the hub can route to the individual device
            frame = (
                bytes([self.ENVELOPE])
                + _LENGTH.pack(len(dst.encode("utf-8")))
                + dst.encode("utf-8")
                + frame
            )
        elif real_src != src:
            frame = (
                bytes([self.ENVELOPE])
                + _LENGTH.pack(len(src.encode("utf-8")))
                + src.encode("utf-8")
                + frame
            )
        self.stats.sent += 1
        try:
            self._write_frame(self._connection(real_src, real_dst), frame)
        except OSError as exc:
            logger.warning("send %s->%s failed: %s", src, dst, exc)
            with self._outbound_lock:
                self._outbound.pop((real_src, real_dst), None)

    def broadcast(self, src: str, dsts: Iterable[str], frame: bytes) -> None:
        for dst in dsts:
            if dst != src:
                self.send(src, dst, frame)

    # -- timers -------------------------------------------------------

    def set_timer(self, node_id: str, delay_us: int, tag: object) -> int:
        timer_id = next(self._timer_ids)
        real_id = self._aliases.get(node_id, node_id)

        def fire() -> None:
            node = self._nodes.get(real_id)
            if node is None or self._closing.is_set():
                return
            clock = WallClock(self.now_us)
            with self._locks[real_id]:
                self.activity += 1
                self._timers.pop(timer_id, None)
                try:
                    if real_id != node_id:
                        node.on_device_timer(node_id, tag, clock)  # type: ignore[attr-defined]
                    else:
                        node.on_timer(tag, clock)
                except Exception:
                    logger.exception("timer handler failed on %s", node_id)

        timer = threading.Timer(delay_us / 1_000_000, fire)
        timer.daemon = True
        self._timers[timer_id] = timer
        timer.start()
        return timer_id

    def cancel_timer(self, timer_id: int) -> None:
        timer = self._timers.pop(timer_id, None)
        if timer is not None:
            timer.cancel()

    # -- lifecycle ----------------------------------------------------

    def run_until_quiescent(
        self, limit_us: int = 600 * 1_000_000, settle_us: int = 500 * MS
    ) -> int:
        """Wait until no handler has run for ``settle_us`` and no timer is
        armed; returns elapsed wall-clock µs.  Raises
        :class:`LivelockError` past ``limit_us``."""
        started = self.now_us
        last_activity = self.activity
        last_change = self.now_us
        while True:
            time.sleep(0.05)
            now = self.now_us
            if self.activity != last_activity:
                last_activity = self.activity
                last_change = now
            elif not self._timers and now - last_change >= settle_us:
                # a quiet stretch with an armed timer is just a lull before
                # scheduled work (e.g. staggered device starts), not the end
                return now - started
            if now - started > limit_us:
                raise LivelockError(
                    f"wall-clock limit {limit_us}us exceeded", {}
                )

    def close(self) -> None:
        self._closing.set()
        for timer in list(self._timers.values()):
            timer.cancel()
        self._timers.clear()
        for listener in self._listeners.values():
            try:
                listener.close()
            except OSError:
                pass
        with self._outbound_lock:
            for sock in self._outbound.values():
                try:
                    sock.close()
                except OSError:
                    pass
            self._outbound.clear()

    def __enter__(self) -> "SocketNetwork":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()
