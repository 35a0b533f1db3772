"""Mission state machine: propose, preview, confirm, execute, abort.

Single-writer design: every mutating call appends an event to the
mission history, and the history alone is enough to replay the mission
bit-for-bit (all randomness is seeded, the clock is virtual).

Arbitration is a single control token with a 120 s lease. Only the
holder may propose or confirm; abort is deliberately token-free so any
operator can stop the arm.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .command import ObjectRef, PointRef, TaskGoal
from .kinematics import KinematicChain, Pose, Unreachable, forward_kinematics, solve_ik
from .planner import (
    CollisionWorld,
    GoalUnreachable,
    PlanningTimeout,
    StartInCollision,
    Trajectory,
    plan_guarded_descent,
    plan_to_pose,
    time_parameterize,
    validate_trajectory,
)
from .sim import VehicleSim, XRFSourceParams

TOKEN_LEASE_S = 120.0
HOLD_GAIN = 2.0  # 1/s, proportional pull toward the contact point
HOLD_TICK_S = 0.05  # 20 Hz supervision
HOLD_TOL_M = 0.01
CONTACT_GRACE_TICKS = 1
CORE_DWELL_S = 2.0
HOVER_HEIGHT_M = 0.08
GRASP_STANDOFF_M = 0.10
TOOL_DOWN = np.array([0.0, 1.0, 0.0, 0.0])

PHASES = ("Idle", "GoalProposed", "Previewed", "Executing", "Holding", "Done", "Aborted")


class Denied(RuntimeError):
    def __init__(self, holder):
        super().__init__(f"control token held by {holder}")
        self.holder = holder


class NotTokenHolder(RuntimeError):
    pass


class IllegalPhase(RuntimeError):
    pass


class StalePreview(RuntimeError):
    pass


class ContactLostAbort(RuntimeError):
    pass


@dataclass
class ControlToken:
    holder: str | None = None
    acquired_at: float = 0.0
    lease_s: float = TOKEN_LEASE_S

    def live(self, now: float) -> bool:
        return self.holder is not None and now - self.acquired_at <= self.lease_s


@dataclass(frozen=True)
class ContactHoldStatus:
    in_contact: bool
    deviation_m: float
    elapsed_s: float
    required_s: float


@dataclass(frozen=True)
class GoalResult:
    kind: str
    ok: bool
    detail: dict


class Executive:
    def __init__(
        self,
        chain: KinematicChain,
        sim: VehicleSim,
        link_proxies,
        safety_margin: float = 0.02,
        stow_q=None,
        planner_seed: int = 0,
    ):
        self.chain = chain
        self.sim = sim
        self.link_proxies = link_proxies
        self.safety_margin = safety_margin
        self.stow_q = np.zeros(chain.dof) if stow_q is None else np.asarray(stow_q, float)
        self.planner_seed = planner_seed

        self.phase = "Idle"
        self.active_goal: TaskGoal | None = None
        self.preview: Trajectory | None = None
        self.preview_revision: int | None = None
        self.token = ControlToken()
        self.history: list = []
        self._seq = 0
        self.xrf_params = XRFSourceParams()
        self.result: GoalResult | None = None
        self.hold_status: ContactHoldStatus | None = None
        self._hold_point = None
        self._hold_elapsed = 0.0
        self._grace_left = CONTACT_GRACE_TICKS
        self._max_deviation = 0.0
        self._retracting = False
        self._pending_result: GoalResult | None = None

    # -- events

    def _log(self, operator, event, payload=None):
        self._seq += 1
        self.history.append(
            {
                "seq": self._seq,
                "timestamp": round(self.sim.clock, 9),
                "operator_id": operator,
                "event": event,
                "payload": payload or {},
            }
        )

    def history_jsonl(self) -> str:
        return "\n".join(json.dumps(e, sort_keys=True) for e in self.history) + "\n"

    def history_hash(self) -> str:
        return hashlib.sha256(self.history_jsonl().encode()).hexdigest()

    # -- arbitration

    def acquire_token(self, operator: str, now: float) -> ControlToken:
        if self.token.live(now) and self.token.holder != operator:
            self._log(operator, "token_denied", {"holder": self.token.holder})
            raise Denied(self.token.holder)
        self.token = ControlToken(holder=operator, acquired_at=now)
        self._log(operator, "token_acquired", {})
        return self.token

    def release_token(self, operator: str):
        if self.token.holder == operator:
            self.token = ControlToken()
            self._log(operator, "token_released", {})

    def _require_token(self, operator: str, now: float):
        if not (self.token.live(now) and self.token.holder == operator):
            raise NotTokenHolder(f"{operator} does not hold a live control token")

    # -- goal lifecycle

    def propose_goal(self, operator: str, goal: TaskGoal, now: float):
        self._require_token(operator, now)
        if self.phase not in ("Idle", "Done", "Aborted"):
            raise IllegalPhase(f"cannot propose during {self.phase}")
        if not goal.resolved:
            raise ValueError("goal referents must be resolved before proposal")
        self.phase = "GoalProposed"
        self.active_goal = goal
        self.preview = None
        self.result = None
        self._log(operator, "goal_proposed", {"goal": _goal_payload(goal)})
        return self.phase

    def apply_tune(self, operator: str, goal: TaskGoal, now: float) -> XRFSourceParams:
        """Instrument tuning bypasses planning; it moves no hardware."""
        self._require_token(operator, now)
        if goal.kind != "tune_xrf":
            raise ValueError("apply_tune takes tune_xrf goals only")
        fields = {
            "tube_voltage": "tube_voltage_kv",
            "tube_current": "tube_current_ua",
            "integration_time": "integration_s",
        }
        attr = fields[goal.param]
        current = getattr(self.xrf_params, attr)
        if goal.mode == "set":
            new = goal.value
        elif goal.mode == "increase":
            new = current + goal.value
        else:
            new = current - goal.value
        values = {f: getattr(self.xrf_params, f) for f in fields.values()}
        values[attr] = new
        try:
            self.xrf_params = XRFSourceParams(**values)
        except ValueError as exc:
            self._log(operator, "tune_rejected", {"param": goal.param, "value": new, "error": str(exc)})
            raise
        self._log(operator, "tune_applied", {"param": goal.param, "value": new})
        return self.xrf_params

    def build_preview(self, now: float | None = None) -> Trajectory:
        if self.phase != "GoalProposed":
            raise IllegalPhase(f"cannot preview during {self.phase}")
        goal = self.active_goal
        world = CollisionWorld(self.sim.scene, self.link_proxies, self.safety_margin)
        try:
            traj = self._plan(goal, world)
        except (GoalUnreachable, StartInCollision, PlanningTimeout) as exc:
            self.phase = "Idle"
            self.active_goal = None
            self._log("executive", "preview_failed", {"error": type(exc).__name__, "detail": str(exc)})
            raise
        report = validate_trajectory(self.chain, world, traj)
        if not report.collision_free:
            self.phase = "Idle"
            self.active_goal = None
            self._log("executive", "preview_failed", {"error": "ValidationFailed"})
            raise GoalUnreachable("planned trajectory failed dense validation")
        self.phase = "Previewed"
        self.preview = traj
        self.preview_revision = self.sim.scene.revision
        self._log(
            "executive",
            "preview_built",
            {
                "revision": self.preview_revision,
                "duration_s": round(traj.duration, 6),
                "waypoints": len(traj.times),
                "guarded": traj.guarded,
            },
        )
        return traj

    def _plan(self, goal: TaskGoal, world: CollisionWorld) -> Trajectory:
        q = self.sim.q
        seed = self.planner_seed
        if goal.kind == "stow":
            target = forward_kinematics(self.chain, self.stow_q)
            return plan_to_pose(self.chain, world, q, target, seed)
        point = self._target_point(goal)
        if goal.kind == "grasp_tool":
            # stand off above the tool so the gripper approaches from the top
            pose = Pose(point + np.array([0.0, 0.0, GRASP_STANDOFF_M]), TOOL_DOWN)
            return plan_to_pose(self.chain, world, q, pose, seed)
        if goal.kind == "move_to":
            pose = Pose(point, TOOL_DOWN)
            return plan_to_pose(self.chain, world, q, pose, seed)
        if goal.kind in ("xrf_measure", "push_core"):
            hover = Pose(point + np.array([0.0, 0.0, HOVER_HEIGHT_M]), TOOL_DOWN)
            transit = plan_to_pose(self.chain, world, q, hover, seed)
            descent = plan_guarded_descent(
                self.chain, world, transit.waypoints[-1], point, np.array([0.0, 0.0, -1.0])
            )
            return _concat(transit, descent)
        raise ValueError(f"goal kind {goal.kind} has no motion plan")

    def _target_point(self, goal: TaskGoal) -> np.ndarray:
        t = goal.target
        if isinstance(t, PointRef):
            return t.as_array()
        if isinstance(t, ObjectRef):
            for obj in self.sim.scene.objects:
                if obj.id == t.object_id:
                    return obj.pose.position.copy()
            raise GoalUnreachable(f"object {t.object_id} is no longer in the scene")
        raise ValueError("goal target is unresolved")

    def confirm_and_execute(self, operator: str, now: float):
        self._require_token(operator, now)
        if self.phase != "Previewed":
            raise IllegalPhase(f"cannot confirm during {self.phase}")
        if self.sim.scene.revision != self.preview_revision:
            raise StalePreview(
                f"scene moved from revision {self.preview_revision} to {self.sim.scene.revision}"
            )
        self.phase = "Executing"
        self._max_deviation = 0.0
        self.sim.resume()
        self.sim.start_trajectory(self.preview)
        self._log(operator, "confirmed", {"revision": self.preview_revision})
        return self.phase

    # -- execution loop

    def step(self, dt: float = HOLD_TICK_S):
        """Advance one supervision tick; returns the current phase."""
        if self.phase == "Executing":
            self.sim.step(dt)
            if self._retracting:
                if self.sim.trajectory_done():
                    self._retracting = False
                    self._finish(self._pending_result)
                return self.phase
            goal = self.active_goal
            needs_contact = goal.kind in ("xrf_measure", "push_core")
            if needs_contact and self.sim.contact:
                self._enter_holding()
            elif self.sim.trajectory_done():
                if needs_contact:
                    self._finish(GoalResult(goal.kind, False, {"error": "NoContact"}), aborted=True)
                else:
                    final = self.sim.ee_position()
                    detail = {"position": [round(v, 6) for v in final]}
                    if goal.kind in ("move_to", "grasp_tool"):
                        detail["target"] = [round(v, 6) for v in self._target_point(goal)]
                    self._finish(GoalResult(goal.kind, True, detail))
        elif self.phase == "Holding":
            self._hold_tick(dt)
        return self.phase

    def run_to_completion(self, max_s: float = 600.0) -> GoalResult:
        start = self.sim.clock
        while self.phase in ("Executing", "Holding"):
            self.step()
            if self.sim.clock - start > max_s:
                raise RuntimeError("execution exceeded the virtual-time budget")
        return self.result

    def _enter_holding(self):
        self.phase = "Holding"
        self._hold_point = self.sim.ee_position().copy()
        self._hold_elapsed = 0.0
        self._grace_left = CONTACT_GRACE_TICKS
        required = self._required_hold_s()
        self.hold_status = ContactHoldStatus(True, 0.0, 0.0, required)
        self._log("executive", "contact", {"point": [round(v, 6) for v in self._hold_point]})

    def _required_hold_s(self) -> float:
        goal = self.active_goal
        if goal.kind == "xrf_measure":
            return goal.integration_s if goal.integration_s else self.xrf_params.integration_s
        return CORE_DWELL_S

    def _hold_tick(self, dt: float):
        sim = self.sim
        sim.step(dt)
        required = self._required_hold_s()
        if not sim.contact:
            if self._grace_left > 0:
                self._grace_left -= 1
                return
            self._abort_hold("ContactLost")
            return
        self._grace_left = CONTACT_GRACE_TICKS
        error = sim.ee_position() - self._hold_point
        deviation = float(np.linalg.norm(error))
        self._max_deviation = max(self._max_deviation, deviation)
        if deviation > HOLD_TOL_M:
            self._abort_hold("DeviationExceeded", deviation=deviation)
            return
        # proportional pull back toward the latched contact point
        sim.correction = sim.correction - HOLD_GAIN * dt * error
        self._hold_elapsed += dt
        self.hold_status = ContactHoldStatus(True, deviation, self._hold_elapsed, required)
        if self._hold_elapsed >= required - 1e-9:
            self._complete_contact_goal()

    def _abort_hold(self, reason: str, **extra):
        goal = self.active_goal
        detail = {"error": reason, "elapsed_s": round(self._hold_elapsed, 6), **extra}
        if goal.kind == "xrf_measure":
            # salvage the partial spectrum accumulated before the loss
            partial = self.sim.spectrum_at(self._hold_point[:2], self._acq_params(), self._hold_elapsed)
            detail["partial_live_time_s"] = round(partial.live_time, 6)
            detail["partial_counts_total"] = int(partial.counts.sum())
            detail["partial_counts"] = [int(c) for c in partial.counts]
        self._finish(GoalResult(goal.kind, False, detail), aborted=True)

    def _acq_params(self) -> XRFSourceParams:
        goal = self.active_goal
        integration = goal.integration_s if goal.integration_s else self.xrf_params.integration_s
        return XRFSourceParams(
            self.xrf_params.tube_voltage_kv, self.xrf_params.tube_current_ua, integration
        )

    def _complete_contact_goal(self):
        goal = self.active_goal
        target = self._target_point(goal)
        achieved = [round(v, 6) for v in self.sim.ee_position()]
        if goal.kind == "xrf_measure":
            spectrum = self.sim.acquire_spectrum(self._acq_params())
            detail = {
                "live_time_s": round(spectrum.live_time, 6),
                "counts_total": int(spectrum.counts.sum()),
                "counts": [int(c) for c in spectrum.counts],
                "max_deviation_m": round(self._max_deviation, 6),
                "position": achieved,
                "target": [round(v, 6) for v in target],
            }
            self._start_retract(GoalResult(goal.kind, True, detail))
        else:
            result = self.sim.push_core(target)
            detail = {
                "success": result.success,
                "distance_m": round(result.distance_m, 6),
                "tilt_deg": round(result.tilt_deg, 6),
                "region": result.region,
                "max_deviation_m": round(self._max_deviation, 6),
                "position": achieved,
                "target": [round(v, 6) for v in target],
            }
            outcome = GoalResult(goal.kind, result.success, detail)
            if result.success:
                self._start_retract(outcome)
            else:
                self._finish(outcome, aborted=True)

    def _start_retract(self, result: GoalResult):
        """Lift the tool off the surface before declaring the goal done, so
        the next plan starts from a collision-free configuration."""
        pose = forward_kinematics(self.chain, self.sim.q)
        up = Pose(pose.position + np.array([0.0, 0.0, HOVER_HEIGHT_M]), pose.orientation)
        try:
            sol = solve_ik(self.chain, up, self.sim.q)
        except Unreachable:
            self._finish(result)
            return
        self.sim.correction = np.zeros(3)
        self._pending_result = result
        self._retracting = True
        self.phase = "Executing"
        self.sim.start_trajectory(time_parameterize(self.chain, [self.sim.q, sol.joints]))

    def _finish(self, result: GoalResult, aborted: bool = False):
        self.result = result
        self.phase = "Aborted" if aborted else "Done"
        self.sim.trajectory = None
        self._log("executive", "goal_finished", {"phase": self.phase, "ok": result.ok, **result.detail})

    # -- safety

    def abort(self, operator: str):
        """Token-free emergency stop, legal from any phase."""
        self.sim.halt()
        self.phase = "Aborted"
        self.preview = None
        self._log(operator, "abort", {})
        return self.phase


def _goal_payload(goal: TaskGoal) -> dict:
    from .command import goal_to_json

    return goal_to_json(goal)


def _concat(a: Trajectory, b: Trajectory) -> Trajectory:
    """Join two trajectories in time; guarded if the tail is guarded."""
    times = np.concatenate([a.times, a.times[-1] + b.times[1:]])
    waypoints = np.vstack([a.waypoints, b.waypoints[1:]])
    return Trajectory(times, waypoints, guarded=b.guarded)
