"""Shipside mission service: sim + executive behind the degraded link.

Every operator (headless script runner or live console) talks to the
ship through the same message API carried in link frames — there is no
privileged side channel. Commands ride the reliable CMD channel as JSON
(fragmented when larger than one frame), scene/state telemetry rides the
lossy TELEMETRY channel, and bulk scene snapshots ride the reliable BULK
channel in tagged chunks.

Missions are fully deterministic given fixtures and seeds; the JSONL
event log is sufficient to re-run the mission and compare trace hashes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import fixture_path
from .command import (
    AmbiguousLabel,
    GestureEvent,
    GestureMiss,
    NoGestureInWindow,
    UnknownLabel,
    Utterance,
    goal_to_json,
    parse_utterance,
    resolve_referents,
)
from .executive import (
    Denied,
    Executive,
    IllegalPhase,
    NotTokenHolder,
    StalePreview,
    TOOL_DOWN,
)
from .kinematics import Pose, forward_kinematics, load_chain, solve_ik
from .link import DEFAULT_MISSION_PROFILE, LinkProfile, LinkedPair, ZERO_IMPAIRMENT, load_profile
from .planner import GoalUnreachable, PlanningTimeout, StartInCollision, proxies_from_chain_fixture
from .scenewire import encode_snapshot_bytes
from .sim import FixtureError, VehicleSim, load_worksite

EXEC_TICKS = 5  # executive runs at 20 Hz on the 100 Hz link clock
STATE_TICKS = 50  # state telemetry every 0.5 s
CMD_CHUNK = 700  # JSON payload slice carried per CMD frame
BULK_CHUNK = 900

TAG_SNAPSHOT = 0x01
TAG_STATE = 0x03

HOME_EE = (0.45, -0.1, -0.35)


class DuplicateOperator(RuntimeError):
    pass


class CorruptLog(ValueError):
    def __init__(self, index, reason):
        super().__init__(f"log record {index}: {reason}")
        self.index = index


class StepTimeout(RuntimeError):
    pass


RESOLUTION_ERRORS = (AmbiguousLabel, UnknownLabel, NoGestureInWindow, GestureMiss)
PLANNING_ERRORS = (GoalUnreachable, StartInCollision, PlanningTimeout)
AUTHORITY_ERRORS = (Denied, NotTokenHolder, IllegalPhase, StalePreview)


def home_config(chain):
    """Deterministic parked configuration with the tool pointed down."""
    target = Pose(np.array(HOME_EE, float), TOOL_DOWN)
    seeds = [np.array([0.0, 0.8, 1.6, 0.0, 0.7, 0.0])]
    rng = np.random.default_rng(99)
    seeds += [rng.uniform(chain.lower_limits, chain.upper_limits) for _ in range(15)]
    last = None
    for seed in seeds:
        try:
            return solve_ik(chain, target, seed).joints
        except Exception as exc:
            last = exc
    raise last


@dataclass
class OperatorSession:
    operator_id: str
    name: str
    role: str
    connected_at: float
    pair: LinkedPair
    rx_index: int = 0
    frag_buf: dict = field(default_factory=dict)
    revision_seen: int = -1
    live: bool = False  # wire frames bridged to a real client instead of pair.a
    outbox: list = field(default_factory=list)

    @property
    def ship(self):
        return self.pair.b

    @property
    def remote(self):
        return self.pair.a


class Mission:
    """One live mission: owns the sim, the executive, and all sessions."""

    def __init__(self, worksite_path, profile: LinkProfile, seed: int = 0, chain_path=None):
        chain_path = chain_path or fixture_path("arm6.json")
        self.worksite_ref = str(worksite_path)
        self.chain = load_chain(chain_path)
        self.proxies = proxies_from_chain_fixture(chain_path)
        try:
            self.worksite = load_worksite(worksite_path)
        except FixtureError as exc:
            raise FixtureError(f"{worksite_path}: {exc}") from exc
        self.profile = profile
        self.seed = int(seed)
        sim = VehicleSim(
            self.chain, self.worksite.scene, self.worksite.site, home_config(self.chain), rng_seed=seed
        )
        self.executive = Executive(self.chain, sim, self.proxies, planner_seed=seed)
        self.sessions: dict = {}
        self.now = 0.0
        self.tick_s = 0.01
        self._ticks = 0
        self._next_gesture_id = 1
        self._awaiting_result: tuple | None = None  # (session_id, mid)

    @property
    def sim(self):
        return self.executive.sim

    def state_hash(self) -> str:
        blob = json.dumps(
            {
                "q": [round(v, 9) for v in self.sim.q],
                "revision": self.sim.scene.revision,
                "phase": self.executive.phase,
            },
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()

    # -- sessions

    def attach_operator(self, operator_id: str, name: str = "", role: str = "commander") -> OperatorSession:
        if operator_id in self.sessions:
            raise DuplicateOperator(operator_id)
        # each operator rides their own emulated link with a distinct seed
        profile = replace(self.profile, rng_seed=self.profile.rng_seed + 1000 * (len(self.sessions) + 1))
        session = OperatorSession(operator_id, name or operator_id, role, self.now, LinkedPair(profile))
        session.pair.now = self.now
        self.sessions[operator_id] = session
        self._send_snapshot(session)
        return session

    def detach_operator(self, operator_id: str):
        self.sessions.pop(operator_id, None)
        if self.executive.token.holder == operator_id:
            self.executive.release_token(operator_id)

    # -- shipside message handling

    def _send_json(self, session: OperatorSession, payload: dict):
        data = json.dumps(payload, sort_keys=True)
        if len(data) <= CMD_CHUNK:
            session.ship.send_command(data.encode(), self.now)
            return
        mid = payload.get("mid", 0)
        chunks = [data[i : i + CMD_CHUNK] for i in range(0, len(data), CMD_CHUNK)]
        for i, chunk in enumerate(chunks):
            env = json.dumps({"frag": {"mid": mid, "i": i, "n": len(chunks)}, "data": chunk})
            session.ship.send_command(env.encode(), self.now)

    def _send_snapshot(self, session: OperatorSession):
        blob = encode_snapshot_bytes(self.sim.scene)
        chunks = [blob[i : i + BULK_CHUNK] for i in range(0, len(blob), BULK_CHUNK)]
        for i, chunk in enumerate(chunks):
            header = bytes([TAG_SNAPSHOT, i, len(chunks)])
            session.ship.send_bulk(header + chunk, self.now)
        session.revision_seen = self.sim.scene.revision

    def _handle(self, session: OperatorSession, msg: dict):
        mid = msg.get("mid", 0)
        kind = msg.get("type")
        op = session.operator_id
        try:
            if kind == "acquire_token":
                token = self.executive.acquire_token(op, self.now)
                self._send_json(session, {"type": "reply", "re": kind, "mid": mid, "ok": True, "holder": token.holder})
            elif kind == "release_token":
                self.executive.release_token(op)
                self._send_json(session, {"type": "reply", "re": kind, "mid": mid, "ok": True})
            elif kind == "abort":
                phase = self.executive.abort(op)
                self._send_json(session, {"type": "reply", "re": kind, "mid": mid, "ok": True, "phase": phase})
            elif kind == "utterance":
                self._handle_utterance(session, msg, mid)
            elif kind == "confirm":
                self.executive.confirm_and_execute(op, self.now)
                self._awaiting_result = (op, mid)
            else:
                self._send_json(session, {"type": "reply", "re": kind, "mid": mid, "ok": False, "error": "UnknownMessage"})
        except (AUTHORITY_ERRORS + PLANNING_ERRORS) as exc:
            self._send_json(
                session,
                {"type": "reply", "re": kind, "mid": mid, "ok": False,
                 "error": type(exc).__name__, "detail": str(exc), "phase": self.executive.phase},
            )

    def _handle_utterance(self, session: OperatorSession, msg: dict, mid: int):
        op = session.operator_id
        result = parse_utterance(Utterance(msg["text"], timestamp=self.now, operator_id=op))
        if not result.ok:
            d = result.diagnostic
            self._send_json(
                session,
                {"type": "reply", "re": "utterance", "mid": mid, "ok": False, "error": "ParseError",
                 "position": d.position, "expected": sorted(d.expected), "message": d.message},
            )
            return
        goal = result.goal
        if goal.kind == "abort":
            phase = self.executive.abort(op)
            self._send_json(session, {"type": "reply", "re": "utterance", "mid": mid, "ok": True, "phase": phase})
            return
        if goal.kind == "tune_xrf":
            try:
                params = self.executive.apply_tune(op, goal, self.now)
            except ValueError as exc:
                self._send_json(session, {"type": "reply", "re": "utterance", "mid": mid, "ok": False,
                                          "error": "TuneRejected", "detail": str(exc)})
                return
            self._send_json(
                session,
                {"type": "reply", "re": "utterance", "mid": mid, "ok": True, "phase": self.executive.phase,
                 "params": {"tube_voltage_kv": params.tube_voltage_kv, "tube_current_ua": params.tube_current_ua,
                            "integration_s": params.integration_s}},
            )
            return

        gestures = []
        if msg.get("gesture"):
            g = msg["gesture"]
            gestures.append(
                GestureEvent(
                    np.array(g["origin"], float),
                    np.array(g["direction"], float),
                    timestamp=self.now,
                    operator_id=op,
                    gesture_id=self._next_gesture_id,
                )
            )
            self._next_gesture_id += 1
        try:
            goal = resolve_referents(goal, self.sim.scene, gestures, utterance_time=self.now)
        except RESOLUTION_ERRORS as exc:
            self._send_json(session, {"type": "reply", "re": "utterance", "mid": mid, "ok": False,
                                      "error": type(exc).__name__, "detail": str(exc)})
            return
        self.executive.propose_goal(op, goal, self.now)
        traj = self.executive.build_preview()
        self._send_json(
            session,
            {"type": "reply", "re": "utterance", "mid": mid, "ok": True, "phase": self.executive.phase,
             "goal": goal_to_json(goal), "preview": self._preview_payload(traj),
             "revision": self.executive.preview_revision},
        )

    def _preview_payload(self, traj) -> dict:
        n = len(traj.times)
        idx = np.unique(np.linspace(0, n - 1, min(n, 50)).astype(int))
        path = []
        for i in idx:
            p = forward_kinematics(self.chain, traj.waypoints[i]).position
            path.append([round(v, 4) for v in p])
        return {
            "duration_s": round(traj.duration, 4),
            "guarded": traj.guarded,
            "waypoints": n,
            "ee_path": path,
        }

    # -- clock

    def tick(self):
        """Advance the mission one link tick (10 ms of virtual time)."""
        for session in self.sessions.values():
            self._drain(session)
        self._ticks += 1
        ex = self.executive
        if ex.phase in ("Executing", "Holding") and self._ticks % EXEC_TICKS == 0:
            ex.step(0.05)
            if ex.phase in ("Done", "Aborted") and self._awaiting_result:
                op, mid = self._awaiting_result
                self._awaiting_result = None
                session = self.sessions.get(op)
                if session is not None:
                    result = ex.result
                    self._send_json(
                        session,
                        {"type": "reply", "re": "confirm", "mid": mid, "ok": result.ok,
                         "phase": ex.phase, "result": {"kind": result.kind, **result.detail}},
                    )
        if self._ticks % STATE_TICKS == 0:
            self._broadcast_state()
        for session in self.sessions.values():
            if session.revision_seen != self.sim.scene.revision:
                self._send_snapshot(session)
            if session.live:
                self._step_live(session)
            else:
                session.pair.step()
        self.now += self.tick_s

    def _step_live(self, session: OperatorSession):
        """Advance a bridged session: the remote endpoint lives in a real
        client, so ship output goes to the outbox instead of pair.a."""
        pair = session.pair
        for data in session.ship.poll(pair.now):
            pair.pipe_ba.submit(data, pair.now)
        pair.now += pair.tick_s
        for data in pair.pipe_ab.due(pair.now):
            session.ship.deliver(data)
        session.outbox.extend(pair.pipe_ba.due(pair.now))

    def inject_wire_frame(self, session: OperatorSession, data: bytes):
        """Feed one encoded frame from a live client into the uplink pipe."""
        session.pair.pipe_ab.submit(data, session.pair.now)

    def run(self, n_ticks: int):
        for _ in range(n_ticks):
            self.tick()

    def _drain(self, session: OperatorSession):
        inbox = session.ship.delivered_cmd
        while session.rx_index < len(inbox):
            raw = inbox[session.rx_index]
            session.rx_index += 1
            try:
                msg = json.loads(raw.decode())
            except (UnicodeDecodeError, json.JSONDecodeError):
                continue
            if "frag" in msg:
                msg = self._reassemble(session, msg)
                if msg is None:
                    continue
            self._handle(session, msg)

    def _reassemble(self, session: OperatorSession, env: dict):
        frag = env["frag"]
        key = frag["mid"]
        buf = session.frag_buf.setdefault(key, {})
        buf[frag["i"]] = env["data"]
        if len(buf) < frag["n"]:
            return None
        data = "".join(buf[i] for i in range(frag["n"]))
        del session.frag_buf[key]
        return json.loads(data)

    def _broadcast_state(self):
        ex = self.executive
        state = {
            "phase": ex.phase,
            "clock": round(self.sim.clock, 3),
            "q": [round(v, 4) for v in self.sim.q],
            "ee": [round(v, 4) for v in self.sim.ee_position()],
            "contact": self.sim.contact,
            "token": ex.token.holder,
            "revision": self.sim.scene.revision,
        }
        if ex.phase == "Holding" and ex.hold_status:
            state["hold"] = {
                "deviation_m": round(ex.hold_status.deviation_m, 5),
                "elapsed_s": round(ex.hold_status.elapsed_s, 3),
                "required_s": ex.hold_status.required_s,
            }
        payload = bytes([TAG_STATE]) + json.dumps(state, sort_keys=True).encode()
        for session in self.sessions.values():
            session.ship.send_telemetry(payload, stream="state")

    @property
    def bytes_up(self) -> int:
        return sum(s.pair.pipe_ab.bytes_carried for s in self.sessions.values())

    @property
    def bytes_down(self) -> int:
        return sum(s.pair.pipe_ba.bytes_carried for s in self.sessions.values())


# ---------------------------------------------------------------------------
# operator-side client (used by the harness; mirrors what a console does)


class OperatorClient:
    """Drives one session's remote endpoint through the emulated link."""

    def __init__(self, mission: Mission, session: OperatorSession):
        self.mission = mission
        self.session = session
        self._mid = 0
        self._rx = 0
        self._frag: dict = {}
        self.replies: list = []

    def send(self, msg: dict) -> int:
        self._mid += 1
        msg = {**msg, "mid": self._mid}
        self.session.remote.send_command(json.dumps(msg, sort_keys=True).encode(), self.mission.now)
        return self._mid

    def _poll_replies(self):
        inbox = self.session.remote.delivered_cmd
        while self._rx < len(inbox):
            raw = inbox[self._rx]
            self._rx += 1
            msg = json.loads(raw.decode())
            if "frag" in msg:
                frag = msg["frag"]
                buf = self._frag.setdefault(frag["mid"], {})
                buf[frag["i"]] = msg["data"]
                if len(buf) < frag["n"]:
                    continue
                msg = json.loads("".join(buf[i] for i in range(frag["n"])))
                del self._frag[frag["mid"]]
            self.replies.append(msg)

    def wait_reply(self, mid: int, max_s: float = 900.0) -> dict:
        deadline = self.mission.now + max_s
        while self.mission.now < deadline:
            self.mission.tick()
            self._poll_replies()
            for reply in self.replies:
                if reply.get("mid") == mid:
                    return reply
        raise StepTimeout(f"no reply to message {mid} within {max_s} s of virtual time")

    def call(self, msg: dict, max_s: float = 900.0) -> dict:
        return self.wait_reply(self.send(msg), max_s)


# ---------------------------------------------------------------------------
# headless script harness


@dataclass(frozen=True)
class MetricsReport:
    steps: tuple
    completion_rate: float
    mean_position_error_m: float | None
    std_position_error_m: float | None
    total_mission_s: float
    bytes_up: int
    bytes_down: int

    def __post_init__(self):
        if not 0.0 <= self.completion_rate <= 1.0:
            raise ValueError("completion rate out of [0, 1]")

    def to_json(self) -> dict:
        return {
            "steps": list(self.steps),
            "completion_rate": self.completion_rate,
            "mean_position_error_m": self.mean_position_error_m,
            "std_position_error_m": self.std_position_error_m,
            "total_mission_s": self.total_mission_s,
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
        }

    def to_table(self) -> str:
        lines = [f"{'#':>2}  {'utterance':<44} {'phase':<9} {'dur s':>8} {'err m':>9}"]
        for i, s in enumerate(self.steps):
            err = "-" if s["position_error_m"] is None else f"{s['position_error_m']:.4f}"
            lines.append(f"{i:>2}  {s['utterance'][:44]:<44} {s['phase']:<9} {s['duration_s']:>8.2f} {err:>9}")
        lines.append(
            f"completion {self.completion_rate:.2f}  mission {self.total_mission_s:.1f} s"
            f"  up {self.bytes_up} B  down {self.bytes_down} B"
        )
        return "\n".join(lines)


def _resolve_profile(ref):
    if ref in (None, "default"):
        return DEFAULT_MISSION_PROFILE
    if ref == "none":
        return ZERO_IMPAIRMENT
    if isinstance(ref, dict):
        from .link import profile_from_dict

        return profile_from_dict(ref)
    return load_profile(ref)


def _resolve_fixture(ref):
    import os

    if os.path.exists(ref):
        return ref
    return fixture_path(ref)


def load_script(path) -> dict:
    with open(path) as f:
        script = json.load(f)
    if not script.get("steps"):
        raise FixtureError("mission script has no steps")
    return script


def position_error_from_result(result: dict) -> float | None:
    """Horizontal placement error recomputed from a result record."""
    if not result or "position" not in result or "target" not in result:
        return None
    p, t = result["position"], result["target"]
    return math.hypot(p[0] - t[0], p[1] - t[1])


def run_script(script: dict, log: list | None = None):
    """Execute a mission script headlessly; returns (MetricsReport, log)."""
    profile = _resolve_profile(script.get("profile"))
    worksite = _resolve_fixture(script.get("worksite", "worksite.json"))
    seed = int(script.get("seed", 0))
    mission = Mission(worksite, profile, seed=seed)
    session = mission.attach_operator("scripted", "Script Runner")
    client = OperatorClient(mission, session)

    log = [] if log is None else log
    log.append(
        {
            "record": "header",
            "worksite": script.get("worksite", "worksite.json"),
            "profile": script.get("profile", "default"),
            "seed": seed,
            "steps": script["steps"],
        }
    )

    steps_out = []
    for index, step in enumerate(script["steps"]):
        start = mission.now
        entry = {"index": index, "utterance": step["utterance"]}
        reply = client.call({"type": "acquire_token"})
        if not reply["ok"]:
            entry.update(phase="TokenDenied", completed=False, position_error_m=None)
        else:
            msg = {"type": "utterance", "text": step["utterance"], "gesture": step.get("gesture")}
            reply = client.call(msg)
            if reply.get("ok") and reply.get("phase") == "Previewed":
                reply = client.call({"type": "confirm"}, max_s=step.get("max_s", 900.0))
            phase = reply.get("phase", "Idle")
            result = reply.get("result", {})
            entry.update(
                phase=phase,
                completed=bool(reply.get("ok")) and phase == step.get("expect", "Done"),
                position_error_m=position_error_from_result(result),
                ok=bool(reply.get("ok")),
            )
            if result:
                entry["result"] = {k: v for k, v in result.items() if k not in ("counts", "partial_counts")}
            if not reply.get("ok"):
                entry["error"] = reply.get("error")
        entry["duration_s"] = round(mission.now - start, 6)
        steps_out.append(entry)
        log.append({"record": "step", **entry})
        if not entry["completed"] and step.get("critical"):
            break

    for event in mission.executive.history:
        record = dict(event)
        payload = dict(record.get("payload", {}))
        payload.pop("counts", None)
        payload.pop("partial_counts", None)
        record["payload"] = payload
        log.append({"record": "event", **record})

    errors = [s["position_error_m"] for s in steps_out if s["position_error_m"] is not None]
    report = MetricsReport(
        steps=tuple(steps_out),
        completion_rate=sum(1 for s in steps_out if s["completed"]) / len(script["steps"]),
        mean_position_error_m=(float(np.mean(errors)) if errors else None),
        std_position_error_m=(float(np.std(errors)) if errors else None),
        total_mission_s=round(mission.now, 6),
        bytes_up=mission.bytes_up,
        bytes_down=mission.bytes_down,
    )
    log.append({"record": "report", **report.to_json()})
    return report, log


# ---------------------------------------------------------------------------
# logs and replay


def log_to_jsonl(log: list) -> str:
    return "\n".join(json.dumps(r, sort_keys=True) for r in log) + "\n"


def trace_hash(log: list) -> str:
    return hashlib.sha256(log_to_jsonl(log).encode()).hexdigest()


def parse_log(text: str) -> list:
    records = []
    for index, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise CorruptLog(index, f"invalid JSON: {exc}") from exc
    return records


def replay(records: list) -> list:
    """Re-run the mission described by a log; returns the reconstructed log.

    The reconstruction must hash-equal the original (determinism contract);
    a mismatch means the log was edited or the fixtures changed.
    """
    if not records:
        return []
    header = records[0]
    if header.get("record") != "header":
        raise CorruptLog(0, "first record is not a header")
    if records[-1].get("record") != "report":
        raise CorruptLog(len(records) - 1, "log is truncated: no final report record")
    for i, r in enumerate(records):
        if "record" not in r:
            raise CorruptLog(i, "record type missing")
    script = {
        "worksite": header["worksite"],
        "profile": header["profile"],
        "seed": header["seed"],
        "steps": header["steps"],
    }
    _, rebuilt = run_script(script)
    return rebuilt
