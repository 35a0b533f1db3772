import numpy as np
import pytest

from benthic.link import (
    BadCrc,
    BadMagic,
    CH_CMD,
    CH_TELEMETRY,
    DeliveryTimeout,
    Frame,
    FrameError,
    LinkEmulator,
    LinkProfile,
    LinkedPair,
    MAX_PAYLOAD,
    Scheduler,
    TruncatedFrame,
    decode_frame,
    encode_frame,
    reliable_send,
    seq_lt,
)

FAST = LinkProfile(bandwidth_bps=1e6, rtt_s=0.05, jitter_s=0.0, loss=0.0, outages=(), rng_seed=1)


class TestFrameCodec:
    def test_empty_cmd_frame_size(self):
        # 10-byte header + 4-byte crc; the layout's field list is normative
        data = encode_frame(Frame(channel=CH_CMD, seq=1, ack=0))
        assert len(data) == 14

    def test_round_trip_random_frames(self):
        rng = np.random.default_rng(3)
        for _ in range(10_000):
            f = Frame(
                channel=int(rng.integers(0, 3)),
                seq=int(rng.integers(0, 1 << 16)),
                ack=int(rng.integers(0, 1 << 16)),
                flags=int(rng.integers(0, 4)),
                payload=rng.bytes(int(rng.integers(0, 64))),
            )
            assert decode_frame(encode_frame(f)) == f

    def test_single_bit_flips_rejected(self):
        # exhaustive over a small frame: every corruption yields a typed error
        data = bytearray(encode_frame(Frame(channel=CH_CMD, seq=7, ack=3, payload=b"hi")))
        for byte in range(len(data)):
            for bit in range(8):
                corrupted = bytearray(data)
                corrupted[byte] ^= 1 << bit
                with pytest.raises((BadCrc, BadMagic, TruncatedFrame)):
                    decode_frame(bytes(corrupted))

    def test_oversize_payload_rejected(self):
        with pytest.raises(FrameError):
            Frame(channel=CH_CMD, payload=b"x" * (MAX_PAYLOAD + 1))

    def test_truncated(self):
        data = encode_frame(Frame(channel=CH_CMD, payload=b"hello"))
        with pytest.raises(TruncatedFrame):
            decode_frame(data[:-3])

    def test_decode_total_on_garbage(self):
        rng = np.random.default_rng(5)
        for _ in range(20_000):
            buf = rng.bytes(int(rng.integers(0, 40)))
            try:
                decode_frame(buf)
            except FrameError:
                pass

    def test_seq_comparison_wraps(self):
        assert seq_lt(65535, 0)
        assert seq_lt(0, 1)
        assert not seq_lt(1, 0)
        assert not seq_lt(5, 5)


class TestReliableDelivery:
    def test_lossless_first_attempt(self):
        pair = LinkedPair(FAST)
        t = reliable_send(pair, b"cmd")
        assert pair.b.delivered_cmd == [b"cmd"]
        assert t < 1.0

    def test_total_loss_times_out(self):
        dead = LinkProfile(bandwidth_bps=1e6, rtt_s=0.05, jitter_s=0.0, loss=1.0, outages=(), rng_seed=1)
        pair = LinkedPair(dead)
        with pytest.raises(DeliveryTimeout):
            reliable_send(pair, b"cmd", max_s=600.0)
        assert pair.b.delivered_cmd == []

    def test_lossy_exactly_once_in_order(self):
        lossy = LinkProfile(bandwidth_bps=1e6, rtt_s=0.1, jitter_s=0.02, loss=0.1, outages=(), rng_seed=42)
        pair = LinkedPair(lossy)
        payloads = [f"cmd-{i}".encode() for i in range(1000)]
        for p in payloads:
            pair.a.send_command(p, pair.now)
        assert pair.run_until_idle(max_s=600.0)
        assert pair.b.delivered_cmd == payloads  # exactly once, in order

    def test_survives_outage(self):
        prof = LinkProfile(bandwidth_bps=1e6, rtt_s=0.1, jitter_s=0.0, loss=0.0, outages=((0.5, 3.0),), rng_seed=2)
        pair = LinkedPair(prof)
        for i in range(20):
            pair.a.send_command(f"c{i}".encode(), pair.now)
            pair.step(10)  # 0.1 s between sends; some land inside the outage
        assert pair.run_until_idle(max_s=600.0)
        assert pair.b.delivered_cmd == [f"c{i}".encode() for i in range(20)]

    def test_determinism(self):
        prof = LinkProfile(bandwidth_bps=1e6, rtt_s=0.1, jitter_s=0.05, loss=0.2, outages=(), rng_seed=9)

        def run():
            pair = LinkedPair(prof)
            for i in range(100):
                pair.a.send_command(f"c{i}".encode(), pair.now)
            pair.run_until_idle(max_s=600.0)
            return (pair.b.delivered_cmd, pair.now, pair.pipe_ab.bytes_carried)

        assert run() == run()


class TestScheduler:
    def test_budget_caps_telemetry(self):
        sched = Scheduler(64_000.0)
        emitted_bytes = 0
        now = 0.0
        for i in range(200):
            sched.queue_telemetry(bytes(500), stream=f"s{i}")  # distinct streams: no replacement
        for _ in range(100):
            for data in sched.emit(now):
                emitted_bytes += len(data)
            now += 0.01
        assert emitted_bytes <= 8000 * 1.01  # 64 kbit/s = 8000 B/s over ~1 s

    def test_cmd_before_telemetry(self):
        sched = Scheduler(1e6)
        sched.queue_telemetry(b"t" * 10)
        sched.queue_cmd(b"c" * 10)
        out = sched.emit(0.0)
        assert out[0] == b"c" * 10

    def test_stale_telemetry_replaced(self):
        sched = Scheduler(1e6)
        sched.queue_telemetry(b"old", stream="scene")
        sched.queue_telemetry(b"new", stream="scene")
        out = sched.emit(0.0)
        assert out == [b"new"]

    def test_sliding_window_never_exceeded(self):
        rng = np.random.default_rng(11)
        sched = Scheduler(64_000.0)
        events = []
        now = 0.0
        for _ in range(500):
            if rng.random() < 0.5:
                sched.queue_cmd(rng.bytes(int(rng.integers(20, 400))))
            for data in sched.emit(now):
                events.append((now, len(data) * 8))
            now += 0.01
        for t, _ in events:
            window_bits = sum(b for tt, b in events if t - 1.0 < tt <= t)
            assert window_bits <= 64_000 * 1.0 + 1e-9


class TestEmulator:
    def test_zero_impairment_serialization_only(self):
        prof = LinkProfile(bandwidth_bps=8000.0, rtt_s=0.0, jitter_s=0.0, loss=0.0, outages=(), rng_seed=0)
        emu = LinkEmulator(prof)
        arrival = emu.submit(bytes(100), now=0.0)
        assert arrival == pytest.approx(100 * 8 / 8000.0)

    def test_burst_serialization_time(self):
        prof = LinkProfile(bandwidth_bps=64_000.0, rtt_s=0.0, jitter_s=0.0, loss=0.0, outages=(), rng_seed=0)
        emu = LinkEmulator(prof)
        last = 0.0
        for _ in range(8):
            last = emu.submit(bytes(1000), now=0.0)
        assert last >= 1.0  # 8000 bytes at 64 kbit/s

    def test_empirical_drop_rate(self):
        prof = LinkProfile(bandwidth_bps=1e9, rtt_s=0.0, jitter_s=0.0, loss=0.1, outages=(), rng_seed=123)
        emu = LinkEmulator(prof)
        n = 10_000
        for _ in range(n):
            emu.submit(bytes(10), now=0.0)
        rate = emu.frames_dropped / n
        assert abs(rate - 0.1) <= 0.01

    def test_outage_drops_everything(self):
        prof = LinkProfile(bandwidth_bps=1e9, rtt_s=0.0, jitter_s=0.0, loss=0.0, outages=((1.0, 2.0),), rng_seed=0)
        emu = LinkEmulator(prof)
        assert emu.submit(b"x", now=1.5) is None
        assert emu.submit(b"x", now=2.5) is not None

    def test_fifo_per_channel(self):
        prof = LinkProfile(bandwidth_bps=1e6, rtt_s=0.2, jitter_s=0.19, loss=0.0, outages=(), rng_seed=7)
        emu = LinkEmulator(prof)
        for i in range(50):
            emu.submit(bytes([i]), now=i * 0.001, channel=0)
        order = []
        t = 0.0
        while emu.in_flight:
            t += 0.001
            order.extend(emu.due(t))
        assert order == [bytes([i]) for i in range(50)]
