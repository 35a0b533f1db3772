import asyncio
import json
import time

import pytest

websockets = pytest.importorskip("websockets")

from benthic import fixture_path
from benthic.link import Endpoint, ZERO_IMPAIRMENT, decode_frame
from benthic.server import MissionServer
from benthic.service import Mission


class WsClient:
    """Minimal console-side stand-in: reliable endpoint over a websocket."""

    def __init__(self, ws):
        self.ws = ws
        self.ep = Endpoint(ZERO_IMPAIRMENT)
        self.now = 0.0
        self.sent_frames = []

    async def pump(self):
        for data in self.ep.poll(self.now):
            self.sent_frames.append(data)
            await self.ws.send(data)
        try:
            while True:
                msg = await asyncio.wait_for(self.ws.recv(), timeout=0.02)
                if isinstance(msg, (bytes, bytearray)):
                    self.ep.deliver(bytes(msg))
        except asyncio.TimeoutError:
            pass
        self.now += 0.05

    async def call(self, payload: dict, timeout_s: float = 10.0) -> dict:
        already = len(self.ep.delivered_cmd)
        self.ep.send_command(json.dumps(payload).encode(), self.now)
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            await self.pump()
            for raw in self.ep.delivered_cmd[already:]:
                msg = json.loads(raw.decode())
                if msg.get("mid") == payload["mid"]:
                    return msg
        raise TimeoutError(f"no reply to {payload}")


async def serve_session(scenario):
    mission = Mission(fixture_path("worksite.json"), ZERO_IMPAIRMENT, seed=0)
    server = MissionServer(mission)
    clock = asyncio.create_task(server.run_clock())
    try:
        async with websockets.serve(server.handle, "127.0.0.1", 0) as ws_server:
            port = ws_server.sockets[0].getsockname()[1]
            return await scenario(mission, port)
    finally:
        clock.cancel()


class TestServe:
    def test_hello_and_token_round_trip(self):
        async def scenario(mission, port):
            async with websockets.connect(f"ws://127.0.0.1:{port}") as ws:
                await ws.send(json.dumps({"operator": "alice", "name": "Alice"}))
                hello = json.loads(await ws.recv())
                assert hello["ok"]
                client = WsClient(ws)
                reply = await client.call({"type": "acquire_token", "mid": 1})
                assert reply["ok"] and reply["holder"] == "alice"
                assert mission.executive.token.holder == "alice"
                # every frame the client put on the wire decodes with the codec
                for data in client.sent_frames:
                    decode_frame(data)
            return True

        assert asyncio.run(serve_session(scenario))

    def test_duplicate_operator_refused(self):
        async def scenario(mission, port):
            async with websockets.connect(f"ws://127.0.0.1:{port}") as first:
                await first.send(json.dumps({"operator": "alice"}))
                assert json.loads(await first.recv())["ok"]
                async with websockets.connect(f"ws://127.0.0.1:{port}") as second:
                    await second.send(json.dumps({"operator": "alice"}))
                    refusal = json.loads(await second.recv())
                    assert refusal.get("error") == "DuplicateOperator"
            return True

        assert asyncio.run(serve_session(scenario))

    def test_disconnect_detaches_and_frees_token(self):
        async def scenario(mission, port):
            async with websockets.connect(f"ws://127.0.0.1:{port}") as ws:
                await ws.send(json.dumps({"operator": "alice"}))
                json.loads(await ws.recv())
                client = WsClient(ws)
                await client.call({"type": "acquire_token", "mid": 1})
            for _ in range(100):
                if "alice" not in mission.sessions:
                    break
                await asyncio.sleep(0.02)
            assert "alice" not in mission.sessions
            assert mission.executive.token.holder is None
            return True

        assert asyncio.run(serve_session(scenario))

    def test_snapshot_chunks_arrive_on_bulk(self):
        async def scenario(mission, port):
            async with websockets.connect(f"ws://127.0.0.1:{port}") as ws:
                await ws.send(json.dumps({"operator": "alice"}))
                json.loads(await ws.recv())
                client = WsClient(ws)
                deadline = time.monotonic() + 10.0
                while time.monotonic() < deadline:
                    await client.pump()
                    chunks = [p for p in client.ep.delivered_bulk if p and p[0] == 0x01]
                    if chunks and chunks[0][2] == len(chunks):
                        return True
            return False

        assert asyncio.run(serve_session(scenario))
