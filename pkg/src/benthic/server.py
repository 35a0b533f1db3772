"""WebSocket bridge for live operator consoles.

The wire format is the link module's frame codec: clients send and
receive binary encoded frames (with their own ARQ state), and every
frame crosses the same emulated degraded link the headless harness uses.
Session setup is the one exception: the first client message is a JSON
hello naming the operator, sent before any frames flow.
"""

from __future__ import annotations

import asyncio
import json
import logging

from .link import FrameError, decode_frame
from .service import DuplicateOperator, Mission

log = logging.getLogger(__name__)

TICK_REAL_S = 0.01  # virtual link ticks advance in real time while serving


class MissionServer:
    def __init__(self, mission: Mission):
        self.mission = mission
        self._clients: dict = {}  # operator_id -> websocket

    async def run_clock(self):
        while True:
            self.mission.tick()
            await self._flush()
            await asyncio.sleep(TICK_REAL_S)

    async def _flush(self):
        for operator_id, ws in list(self._clients.items()):
            session = self.mission.sessions.get(operator_id)
            if session is None:
                continue
            frames, session.outbox = session.outbox, []
            for data in frames:
                try:
                    await ws.send(data)
                except Exception:
                    break

    async def handle(self, ws):
        try:
            hello = json.loads(await ws.recv())
            operator_id = hello["operator"]
        except Exception:
            await ws.close(code=1002, reason="expected JSON hello")
            return
        try:
            session = self.mission.attach_operator(
                operator_id, hello.get("name", operator_id), hello.get("role", "commander")
            )
        except DuplicateOperator:
            await ws.send(json.dumps({"error": "DuplicateOperator"}))
            await ws.close(code=1008, reason="duplicate operator id")
            return
        session.live = True
        self._clients[operator_id] = ws
        await ws.send(json.dumps({"ok": True, "operator": operator_id}))
        log.info("operator %s attached", operator_id)
        try:
            async for message in ws:
                if isinstance(message, (bytes, bytearray)):
                    try:
                        decode_frame(bytes(message))  # reject junk before the pipe
                    except FrameError:
                        continue
                    self.mission.inject_wire_frame(session, bytes(message))
        finally:
            self._clients.pop(operator_id, None)
            self.mission.detach_operator(operator_id)
            log.info("operator %s detached", operator_id)


async def serve(mission: Mission, host: str = "127.0.0.1", port: int = 8765):
    import websockets

    server = MissionServer(mission)
    clock = asyncio.create_task(server.run_clock())
    async with websockets.serve(server.handle, host, port, max_size=1 << 20):
        log.info("mission service listening on ws://%s:%d", host, port)
        try:
            await asyncio.Future()
        finally:
            clock.cancel()
