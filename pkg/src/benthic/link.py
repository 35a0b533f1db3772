"""Wire protocol and deterministic ship-to-shore link emulation.

Three channels share one impaired pipe: CMD_RELIABLE carries commands
under an ARQ scheme (exactly-once, in-order), TELEMETRY carries droppable
state snapshots (stale ones are replaced before emission), BULK carries
low-priority transfers. A strict-priority scheduler enforces the
bandwidth budget over a sliding 1 s window, and the emulator applies
serialization delay, latency, jitter, random loss, and outages — all
driven by a virtual clock and a seeded RNG, so runs are reproducible.

Frame layout (big-endian, normative):
    magic 0xA5 (1) | version (1) | channel (1) | flags (1)
    seq (2) | ack (2) | len (2) | payload (len) | crc32 (4)
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

FRAME_MAGIC = 0xA5
PROTOCOL_VERSION = 1

CH_CMD = 0
CH_TELEMETRY = 1
CH_BULK = 2

FLAG_ACK = 0x01
FLAG_FIN = 0x02

HEADER = ">BBBBHHH"
HEADER_LEN = struct.calcsize(HEADER)  # 10
CRC_LEN = 4
MAX_FRAME = 1024
MAX_PAYLOAD = MAX_FRAME - HEADER_LEN - CRC_LEN

SEQ_MOD = 1 << 16
WINDOW = 256

RTO_MULT = 1.5
RTO_BACKOFF = 2.0
MAX_ATTEMPTS = 8


class FrameError(ValueError):
    pass


class BadMagic(FrameError):
    pass


class BadCrc(FrameError):
    pass


class TruncatedFrame(FrameError):
    pass


class DeliveryTimeout(RuntimeError):
    def __init__(self, seq):
        super().__init__(f"payload seq {seq} undelivered after {MAX_ATTEMPTS} attempts")
        self.seq = seq


@dataclass(frozen=True)
class Frame:
    channel: int
    seq: int = 0
    ack: int = 0
    flags: int = 0
    payload: bytes = b""
    version: int = PROTOCOL_VERSION

    def __post_init__(self):
        if len(self.payload) > MAX_PAYLOAD:
            raise FrameError(f"payload exceeds {MAX_PAYLOAD} bytes")
        if not (0 <= self.seq < SEQ_MOD and 0 <= self.ack < SEQ_MOD):
            raise FrameError("seq/ack out of 16-bit range")


def encode_frame(frame: Frame) -> bytes:
    head = struct.pack(
        HEADER,
        FRAME_MAGIC,
        frame.version,
        frame.channel,
        frame.flags,
        frame.seq,
        frame.ack,
        len(frame.payload),
    )
    body = head + frame.payload
    return body + struct.pack(">I", zlib.crc32(body))


def decode_frame(data: bytes) -> Frame:
    if len(data) < HEADER_LEN + CRC_LEN:
        raise TruncatedFrame(f"{len(data)} bytes is below the minimum frame size")
    magic, version, channel, flags, seq, ack, length = struct.unpack(HEADER, data[:HEADER_LEN])
    if magic != FRAME_MAGIC:
        raise BadMagic(f"bad magic byte 0x{magic:02X}")
    total = HEADER_LEN + length + CRC_LEN
    if len(data) < total:
        raise TruncatedFrame(f"need {total} bytes, have {len(data)}")
    body = data[: HEADER_LEN + length]
    (crc,) = struct.unpack(">I", data[HEADER_LEN + length : total])
    if zlib.crc32(body) != crc:
        raise BadCrc("crc mismatch")
    return Frame(channel=channel, seq=seq, ack=ack, flags=flags, payload=bytes(data[HEADER_LEN:HEADER_LEN + length]), version=version)


# ---------------------------------------------------------------------------
# sequence arithmetic (16-bit wrap-around)


def seq_lt(a: int, b: int) -> bool:
    return a != b and ((b - a) & 0xFFFF) < 0x8000


def seq_add(a: int, n: int) -> int:
    return (a + n) % SEQ_MOD


# ---------------------------------------------------------------------------
# link profile / emulator


@dataclass(frozen=True)
class LinkProfile:
    bandwidth_bps: float = 64000.0
    rtt_s: float = 1.5
    jitter_s: float = 0.2
    loss: float = 0.05
    outages: tuple = ()  # ((start_s, end_s), ...)
    rng_seed: int = 0

    def __post_init__(self):
        if self.bandwidth_bps <= 0:
            raise ValueError("bandwidth must be positive")
        if not 0.0 <= self.loss <= 1.0:
            raise ValueError("loss must be in [0, 1]")
        spans = sorted(tuple(o) for o in self.outages)
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            if b0 < a1:
                raise ValueError("outage intervals must be disjoint")
        object.__setattr__(self, "outages", tuple(tuple(o) for o in self.outages))

    def in_outage(self, t: float) -> bool:
        return any(a <= t < b for a, b in self.outages)


def profile_from_dict(d: dict) -> LinkProfile:
    return LinkProfile(
        bandwidth_bps=float(d.get("bandwidth_bps", 64000.0)),
        rtt_s=float(d.get("rtt_s", 1.5)),
        jitter_s=float(d.get("jitter_s", 0.2)),
        loss=float(d.get("loss", 0.05)),
        outages=tuple(tuple(o) for o in d.get("outages", [])),
        rng_seed=int(d.get("rng_seed", 0)),
    )


def load_profile(path) -> LinkProfile:
    with open(path) as f:
        return profile_from_dict(json.load(f))


DEFAULT_MISSION_PROFILE = LinkProfile(
    bandwidth_bps=64000.0, rtt_s=1.5, jitter_s=0.2, loss=0.05, outages=((30.0, 50.0),), rng_seed=0
)

ZERO_IMPAIRMENT = LinkProfile(bandwidth_bps=1e9, rtt_s=0.0, jitter_s=0.0, loss=0.0, outages=(), rng_seed=0)


class LinkEmulator:
    """One direction of an impaired pipe.

    Deterministic given (profile, submissions, seed). Non-dropped frames
    of the same channel arrive in submission order (FIFO pipe).
    """

    def __init__(self, profile: LinkProfile, seed_salt: int = 0):
        self.profile = profile
        self.rng = np.random.default_rng((profile.rng_seed, seed_salt))
        self.link_free_at = 0.0
        self.last_arrival = {}
        self.in_flight = []  # (arrival_time, serial, frame_bytes)
        self._serial = 0
        self.bytes_carried = 0
        self.frames_dropped = 0

    def submit(self, data: bytes, now: float, channel: int | None = None):
        """Queue an encoded frame for transmission at virtual time `now`."""
        depart = max(now, self.link_free_at)
        serialization = len(data) * 8 / self.profile.bandwidth_bps
        self.link_free_at = depart + serialization
        # loss draw happens for every frame to keep the stream deterministic
        lost = self.rng.random() < self.profile.loss
        jitter = self.rng.uniform(-self.profile.jitter_s, self.profile.jitter_s) if self.profile.jitter_s else 0.0
        if lost or self.profile.in_outage(now):
            self.frames_dropped += 1
            return None
        arrival = self.link_free_at + self.profile.rtt_s / 2.0 + jitter
        key = channel if channel is not None else -1
        arrival = max(arrival, self.last_arrival.get(key, 0.0))  # FIFO per channel
        self.last_arrival[key] = arrival
        self.in_flight.append((arrival, self._serial, data))
        self._serial += 1
        self.bytes_carried += len(data)
        return arrival

    def due(self, now: float) -> list:
        """Frames whose arrival time has passed, in arrival order."""
        ready = sorted(f for f in self.in_flight if f[0] <= now)
        self.in_flight = [f for f in self.in_flight if f[0] > now]
        return [data for _, _, data in ready]


# ---------------------------------------------------------------------------
# scheduler: strict priority + sliding-window budget


class Scheduler:
    """Strict-priority (CMD > TELEMETRY > BULK) emitter under a bits/s
    budget measured over a sliding 1 s window. Telemetry entries carry a
    stream key; a newer snapshot for the same key replaces a queued stale
    one instead of lining up behind it."""

    def __init__(self, budget_bps: float, window_s: float = 1.0):
        if budget_bps <= 0:
            raise ValueError("budget must be positive")
        self.budget_bps = budget_bps
        self.window_s = window_s
        self.cmd = []
        self.telemetry = {}  # stream key -> encoded frame
        self.telemetry_order = []
        self.bulk = []
        self.emitted = []  # (time, bits)
        self.bulk_starved_ticks = 0

    def queue_cmd(self, data: bytes):
        self.cmd.append(data)

    def queue_telemetry(self, data: bytes, stream: str = "default"):
        if stream not in self.telemetry:
            self.telemetry_order.append(stream)
        self.telemetry[stream] = data

    def queue_bulk(self, data: bytes):
        self.bulk.append(data)

    def _window_bits(self, now: float) -> float:
        self.emitted = [(t, b) for t, b in self.emitted if t > now - self.window_s]
        return sum(b for _, b in self.emitted)

    def emit(self, now: float) -> list:
        """Frames to put on the wire this tick, within budget."""
        out = []
        used = self._window_bits(now)
        cap = self.budget_bps * self.window_s

        def try_emit(data):
            nonlocal used
            bits = len(data) * 8
            if used + bits > cap:
                return False
            used += bits
            self.emitted.append((now, bits))
            out.append(data)
            return True

        while self.cmd and try_emit(self.cmd[0]):
            self.cmd.pop(0)
        while self.telemetry_order:
            stream = self.telemetry_order[0]
            if try_emit(self.telemetry[stream]):
                self.telemetry_order.pop(0)
                del self.telemetry[stream]
            else:
                break
        if self.bulk and not self.telemetry_order:
            while self.bulk and try_emit(self.bulk[0]):
                self.bulk.pop(0)
        elif self.bulk:
            self.bulk_starved_ticks += 1
        return out


# ---------------------------------------------------------------------------
# reliable channel (ARQ)


@dataclass
class _Pending:
    frame: Frame
    first_sent: float
    next_retry: float
    attempts: int
    rto: float


class ReliableSender:
    def __init__(self, channel: int, rtt_estimate: float):
        self.channel = channel
        self.next_seq = 0
        self.base_rto = RTO_MULT * max(rtt_estimate, 1e-3)
        self.pending = {}  # seq -> _Pending
        self.order = []
        self.failed = []

    def send(self, payload: bytes, now: float) -> Frame:
        frame = Frame(channel=self.channel, seq=self.next_seq, payload=payload)
        self.pending[self.next_seq] = _Pending(frame, now, now + self.base_rto, 1, self.base_rto)
        self.order.append(self.next_seq)
        self.next_seq = seq_add(self.next_seq, 1)
        return frame

    def on_ack(self, ack: int):
        """Cumulative ack: everything before `ack` is delivered."""
        for seq in list(self.order):
            if seq_lt(seq, ack):
                self.pending.pop(seq, None)
                self.order.remove(seq)

    def due_retransmits(self, now: float) -> list:
        out = []
        for seq in list(self.order):
            p = self.pending.get(seq)
            if p is None:
                continue
            if now >= p.next_retry:
                if p.attempts >= MAX_ATTEMPTS:
                    self.pending.pop(seq)
                    self.order.remove(seq)
                    self.failed.append(seq)
                    continue
                p.attempts += 1
                p.rto *= RTO_BACKOFF
                p.next_retry = now + p.rto
                out.append(p.frame)
        return out

    @property
    def in_flight(self) -> int:
        return len(self.pending)


class ReliableReceiver:
    def __init__(self, channel: int):
        self.channel = channel
        self.expected_seq = 0
        self.out_of_order = {}

    def on_frame(self, frame: Frame) -> list:
        """Returns payloads released to the application, in order.
        Duplicates are absorbed."""
        seq = frame.seq
        if seq_lt(seq, self.expected_seq):
            return []  # duplicate of something already delivered
        if seq != self.expected_seq:
            if ((seq - self.expected_seq) & 0xFFFF) < WINDOW:
                self.out_of_order[seq] = frame.payload
            return []
        released = [frame.payload]
        self.expected_seq = seq_add(self.expected_seq, 1)
        while self.expected_seq in self.out_of_order:
            released.append(self.out_of_order.pop(self.expected_seq))
            self.expected_seq = seq_add(self.expected_seq, 1)
        return released

    def ack_frame(self) -> Frame:
        return Frame(channel=self.channel, flags=FLAG_ACK, ack=self.expected_seq)


class Endpoint:
    """One side of the link: reliable CMD + BULK senders/receivers, lossy
    telemetry, and a budget scheduler. Drive with poll()/deliver()."""

    def __init__(self, profile: LinkProfile, budget_bps: float | None = None):
        self.sched = Scheduler(budget_bps if budget_bps is not None else profile.bandwidth_bps)
        self.cmd_tx = ReliableSender(CH_CMD, profile.rtt_s)
        self.cmd_rx = ReliableReceiver(CH_CMD)
        self.bulk_tx = ReliableSender(CH_BULK, profile.rtt_s)
        self.bulk_rx = ReliableReceiver(CH_BULK)
        self.telemetry_seq = 0
        self._cmd_backlog = []
        self._bulk_backlog = []
        self._acks = []
        self.delivered_cmd = []
        self.delivered_bulk = []
        self.delivered_telemetry = []

    def send_command(self, payload: bytes, now: float):
        # backlog keeps the in-flight window inside the receiver's reorder
        # window; drained in poll()
        self._cmd_backlog.append(payload)
        self._drain_backlog(now)

    def send_bulk(self, payload: bytes, now: float):
        self._bulk_backlog.append(payload)
        self._drain_backlog(now)

    def _drain_backlog(self, now: float):
        while self._cmd_backlog and self.cmd_tx.in_flight < WINDOW // 2:
            frame = self.cmd_tx.send(self._cmd_backlog.pop(0), now)
            self.sched.queue_cmd(encode_frame(frame))
        while self._bulk_backlog and self.bulk_tx.in_flight < WINDOW // 2:
            frame = self.bulk_tx.send(self._bulk_backlog.pop(0), now)
            self.sched.queue_bulk(encode_frame(frame))

    def send_telemetry(self, payload: bytes, stream: str = "default"):
        frame = Frame(channel=CH_TELEMETRY, seq=self.telemetry_seq, payload=payload)
        self.telemetry_seq = seq_add(self.telemetry_seq, 1)
        self.sched.queue_telemetry(encode_frame(frame), stream)

    def deliver(self, data: bytes):
        """Feed one encoded frame received from the wire."""
        frame = decode_frame(data)
        if frame.flags & FLAG_ACK:
            tx = self.cmd_tx if frame.channel == CH_CMD else self.bulk_tx
            tx.on_ack(frame.ack)
            return
        if frame.channel == CH_CMD:
            released = self.cmd_rx.on_frame(frame)
            self.delivered_cmd.extend(released)
            self._acks.append(encode_frame(self.cmd_rx.ack_frame()))
        elif frame.channel == CH_BULK:
            released = self.bulk_rx.on_frame(frame)
            self.delivered_bulk.extend(released)
            self._acks.append(encode_frame(self.bulk_rx.ack_frame()))
        else:
            self.delivered_telemetry.append(frame.payload)

    def poll(self, now: float) -> list:
        """Encoded frames to transmit this tick (acks bypass the budget
        queue ordering but still count against it via the scheduler)."""
        self._drain_backlog(now)
        for frame in self.cmd_tx.due_retransmits(now):
            self.sched.queue_cmd(encode_frame(frame))
        for frame in self.bulk_tx.due_retransmits(now):
            self.sched.queue_bulk(encode_frame(frame))
        for ack in self._acks:
            self.sched.queue_cmd(ack)
        self._acks = []
        return self.sched.emit(now)

    def take_failures(self) -> list:
        failed = self.cmd_tx.failed + self.bulk_tx.failed
        self.cmd_tx.failed = []
        self.bulk_tx.failed = []
        return failed


class LinkedPair:
    """Two endpoints joined by a pair of emulated unidirectional pipes,
    advanced on a shared virtual clock."""

    def __init__(self, profile: LinkProfile, tick_s: float = 0.01):
        self.profile = profile
        self.tick_s = tick_s
        self.now = 0.0
        self.a = Endpoint(profile)
        self.b = Endpoint(profile)
        self.pipe_ab = LinkEmulator(profile, seed_salt=1)
        self.pipe_ba = LinkEmulator(profile, seed_salt=2)

    def step(self, n_ticks: int = 1):
        for _ in range(n_ticks):
            for data in self.a.poll(self.now):
                self.pipe_ab.submit(data, self.now)
            for data in self.b.poll(self.now):
                self.pipe_ba.submit(data, self.now)
            self.now += self.tick_s
            for data in self.pipe_ab.due(self.now):
                self.b.deliver(data)
            for data in self.pipe_ba.due(self.now):
                self.a.deliver(data)

    def run_until_idle(self, max_s: float = 600.0):
        deadline = self.now + max_s
        while self.now < deadline:
            self.step()
            if all(
                ep.cmd_tx.in_flight == 0
                and ep.bulk_tx.in_flight == 0
                and not ep._cmd_backlog
                and not ep._bulk_backlog
                and not ep.sched.cmd
                and not ep.sched.bulk
                for ep in (self.a, self.b)
            ) and not self.pipe_ab.in_flight and not self.pipe_ba.in_flight:
                return True
        return False


def reliable_send(pair: LinkedPair, payload: bytes, max_s: float = 600.0) -> float:
    """Send one payload a -> b, advancing the pair until it is delivered.

    Returns the virtual delivery time; raises DeliveryTimeout if the ARQ
    gives up after its retry budget."""
    already = len(pair.b.delivered_cmd)
    pair.a.send_command(payload, pair.now)
    deadline = pair.now + max_s
    while pair.now < deadline:
        pair.step()
        if len(pair.b.delivered_cmd) > already and payload in pair.b.delivered_cmd[already:]:
            return pair.now
        failed = pair.a.take_failures()
        if failed:
            raise DeliveryTimeout(failed[0])
    raise DeliveryTimeout(-1)
