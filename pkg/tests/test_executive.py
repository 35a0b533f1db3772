import numpy as np
import pytest

from benthic import fixture_path
from benthic.command import LabelRef, ObjectRef, PointRef, TaskGoal
from benthic.executive import (
    ContactHoldStatus,
    Denied,
    Executive,
    IllegalPhase,
    NotTokenHolder,
    StalePreview,
    TOKEN_LEASE_S,
)
from benthic.kinematics import Pose, load_chain, solve_ik
from benthic.planner import (
    CollisionWorld,
    GoalUnreachable,
    proxies_from_chain_fixture,
    validate_trajectory,
)
from benthic.scene import SceneObject, sphere, upsert_object
from benthic.sim import VehicleSim, load_worksite

CHAIN = load_chain(fixture_path("arm6.json"))
PROXIES = proxies_from_chain_fixture(fixture_path("arm6.json"))
WORKSITE = load_worksite(fixture_path("worksite.json"))
TOOL_DOWN = np.array([0.0, 1.0, 0.0, 0.0])

MAT_POINT = (0.5, 0.1, -0.6)  # inside the mat polygon, on the terrain
HOME_EE = (0.45, -0.1, -0.35)


def ik_config(position, orientation=TOOL_DOWN):
    target = Pose(np.array(position, float), orientation)
    seeds = [np.array([0.0, 0.8, 1.6, 0.0, 0.7, 0.0])]
    rng = np.random.default_rng(99)
    seeds += [rng.uniform(CHAIN.lower_limits, CHAIN.upper_limits) for _ in range(15)]
    last = None
    for seed in seeds:
        try:
            return solve_ik(CHAIN, target, seed).joints
        except Exception as exc:
            last = exc
    raise last


HOME_Q = ik_config(HOME_EE)


def make_exec(rng_seed=5):
    sim = VehicleSim(CHAIN, WORKSITE.scene, WORKSITE.site, HOME_Q, rng_seed=rng_seed)
    return Executive(CHAIN, sim, PROXIES, planner_seed=3)


def armed(ex, goal, operator="alice"):
    ex.acquire_token(operator, now=0.0)
    ex.propose_goal(operator, goal, now=0.0)
    ex.build_preview()
    return ex


XRF_GOAL = TaskGoal(kind="xrf_measure", target=PointRef(MAT_POINT), integration_s=2.0)
CORE_GOAL = TaskGoal(kind="push_core", target=PointRef(MAT_POINT))
MOVE_GOAL = TaskGoal(kind="move_to", target=PointRef((0.5, 0.1, -0.35)))


class TestToken:
    def test_free_token_granted(self):
        ex = make_exec()
        assert ex.acquire_token("alice", now=0.0).holder == "alice"

    def test_live_lease_denied(self):
        ex = make_exec()
        ex.acquire_token("alice", now=0.0)
        with pytest.raises(Denied) as exc:
            ex.acquire_token("bob", now=TOKEN_LEASE_S - 1.0)
        assert exc.value.holder == "alice"

    def test_expired_lease_transferred(self):
        ex = make_exec()
        ex.acquire_token("alice", now=0.0)
        assert ex.acquire_token("bob", now=TOKEN_LEASE_S + 1.0).holder == "bob"

    def test_holder_reacquire_renews(self):
        ex = make_exec()
        ex.acquire_token("alice", now=0.0)
        ex.acquire_token("alice", now=100.0)  # renews the lease
        with pytest.raises(Denied):
            ex.acquire_token("bob", now=150.0)

    def test_at_most_one_holder(self):
        ex = make_exec()
        ex.acquire_token("alice", now=0.0)
        assert ex.token.holder == "alice"
        ex.acquire_token("bob", now=TOKEN_LEASE_S + 1.0)
        assert ex.token.holder == "bob"


class TestProposal:
    def test_requires_token(self):
        ex = make_exec()
        with pytest.raises(NotTokenHolder):
            ex.propose_goal("alice", MOVE_GOAL, now=0.0)

    def test_idle_to_proposed(self):
        ex = make_exec()
        ex.acquire_token("alice", now=0.0)
        assert ex.propose_goal("alice", MOVE_GOAL, now=0.0) == "GoalProposed"
        assert ex.active_goal == MOVE_GOAL

    def test_unresolved_goal_rejected(self):
        ex = make_exec()
        ex.acquire_token("alice", now=0.0)
        with pytest.raises(ValueError):
            ex.propose_goal("alice", TaskGoal(kind="move_to", target=LabelRef("marker 3")), now=0.0)

    def test_illegal_during_executing(self):
        ex = armed(make_exec(), MOVE_GOAL)
        ex.confirm_and_execute("alice", now=0.0)
        with pytest.raises(IllegalPhase):
            ex.propose_goal("alice", MOVE_GOAL, now=0.0)


class TestPreview:
    def test_reachable_goal_previewed(self):
        ex = armed(make_exec(), MOVE_GOAL)
        assert ex.phase == "Previewed"
        world = CollisionWorld(ex.sim.scene, PROXIES, 0.02)
        assert validate_trajectory(CHAIN, world, ex.preview).collision_free

    def test_unreachable_goal_back_to_idle(self):
        ex = make_exec()
        ex.acquire_token("alice", now=0.0)
        ex.propose_goal("alice", TaskGoal(kind="move_to", target=PointRef((5.0, 0.0, 0.0))), now=0.0)
        with pytest.raises(GoalUnreachable):
            ex.build_preview()
        assert ex.phase == "Idle"
        assert ex.active_goal is None
        assert ex.history[-1]["event"] == "preview_failed"

    def test_contact_goal_preview_is_guarded(self):
        ex = armed(make_exec(), XRF_GOAL)
        assert ex.preview.guarded

    def test_preview_without_proposal_illegal(self):
        ex = make_exec()
        with pytest.raises(IllegalPhase):
            ex.build_preview()


class TestConfirm:
    def test_confirm_without_preview_illegal(self):
        ex = make_exec()
        ex.acquire_token("alice", now=0.0)
        ex.propose_goal("alice", MOVE_GOAL, now=0.0)
        with pytest.raises(IllegalPhase):
            ex.confirm_and_execute("alice", now=0.0)

    def test_non_holder_cannot_confirm(self):
        ex = armed(make_exec(), MOVE_GOAL)
        with pytest.raises(NotTokenHolder):
            ex.confirm_and_execute("bob", now=0.0)

    def test_scene_change_stales_preview(self):
        ex = armed(make_exec(), MOVE_GOAL)
        intruder = SceneObject(
            99, "debris", Pose(np.array([1.5, 1.5, -0.55]), np.array([1.0, 0, 0, 0])), sphere(0.03)
        )
        ex.sim.scene = upsert_object(ex.sim.scene, intruder)
        with pytest.raises(StalePreview):
            ex.confirm_and_execute("alice", now=0.0)

    def test_confirm_enters_executing(self):
        ex = armed(make_exec(), MOVE_GOAL)
        assert ex.confirm_and_execute("alice", now=0.0) == "Executing"


class TestExecution:
    def test_move_to_completes(self):
        ex = armed(make_exec(), MOVE_GOAL)
        ex.confirm_and_execute("alice", now=0.0)
        result = ex.run_to_completion()
        assert ex.phase == "Done"
        assert result.ok
        np.testing.assert_allclose(result.detail["position"], [0.5, 0.1, -0.35], atol=2e-3)

    def test_xrf_mission_completes(self):
        ex = armed(make_exec(), XRF_GOAL)
        ex.confirm_and_execute("alice", now=0.0)
        result = ex.run_to_completion()
        assert ex.phase == "Done"
        assert result.ok
        assert result.detail["live_time_s"] == pytest.approx(2.0)
        assert result.detail["counts_total"] > 0
        assert len(result.detail["counts"]) == 1024
        assert result.detail["max_deviation_m"] <= 0.01

    def test_push_core_mission_completes(self):
        ex = armed(make_exec(), CORE_GOAL)
        ex.confirm_and_execute("alice", now=0.0)
        result = ex.run_to_completion()
        assert ex.phase == "Done"
        assert result.ok
        assert result.detail["distance_m"] <= 0.01
        assert result.detail["region"] == "microbial mat"

    def test_hold_survives_small_lateral_disturbance(self):
        ex = armed(make_exec(), XRF_GOAL)
        ex.confirm_and_execute("alice", now=0.0)
        while ex.phase == "Executing":
            ex.step()
        assert ex.phase == "Holding"
        ex.sim.inject_disturbance(ex.sim.clock + 0.5, [0.005, 0.0, 0.0])
        result = ex.run_to_completion()
        assert ex.phase == "Done"
        assert result.ok
        assert 0.004 <= result.detail["max_deviation_m"] <= 0.01

    def test_hold_aborts_on_contact_loss(self):
        ex = armed(make_exec(), XRF_GOAL)
        ex.confirm_and_execute("alice", now=0.0)
        while ex.phase == "Executing":
            ex.step()
        ex.sim.inject_disturbance(ex.sim.clock + 0.5, [0.0, 0.0, 0.05])
        result = ex.run_to_completion()
        assert ex.phase == "Aborted"
        assert not result.ok
        assert result.detail["error"] in ("ContactLost", "DeviationExceeded")
        assert 0.0 < result.detail["partial_live_time_s"] < 2.0
        assert len(result.detail["partial_counts"]) == 1024

    def test_hold_aborts_on_large_lateral_jump(self):
        ex = armed(make_exec(), XRF_GOAL)
        ex.confirm_and_execute("alice", now=0.0)
        while ex.phase == "Executing":
            ex.step()
        ex.sim.inject_disturbance(ex.sim.clock + 0.5, [0.05, 0.0, 0.0])
        result = ex.run_to_completion()
        assert ex.phase == "Aborted"
        assert result.detail["error"] == "DeviationExceeded"

    def test_hold_status_stream(self):
        ex = armed(make_exec(), XRF_GOAL)
        ex.confirm_and_execute("alice", now=0.0)
        statuses = []
        while ex.phase in ("Executing", "Holding"):
            ex.step()
            if ex.phase == "Holding" and ex.hold_status:
                statuses.append(ex.hold_status)
        assert statuses
        assert all(isinstance(s, ContactHoldStatus) and s.deviation_m >= 0 for s in statuses)
        assert ex.hold_status.elapsed_s == pytest.approx(2.0)


class TestAbort:
    def test_abort_any_phase_without_token(self):
        ex = armed(make_exec(), MOVE_GOAL)
        ex.confirm_and_execute("alice", now=0.0)
        ex.step()
        assert ex.abort("bob") == "Aborted"  # bob holds no token
        assert ex.sim.halted
        q = ex.sim.q.copy()
        ex.sim.step(0.05)
        np.testing.assert_allclose(ex.sim.q, q)  # halted within one tick

    def test_abort_in_idle(self):
        ex = make_exec()
        assert ex.abort("anyone") == "Aborted"


class TestTune:
    def test_set_increase_decrease(self):
        ex = make_exec()
        ex.acquire_token("alice", now=0.0)
        ex.apply_tune("alice", TaskGoal(kind="tune_xrf", param="tube_voltage", value=30.0, mode="set"), now=0.0)
        assert ex.xrf_params.tube_voltage_kv == 30.0
        ex.apply_tune("alice", TaskGoal(kind="tune_xrf", param="tube_current", value=20.0, mode="increase"), now=0.0)
        assert ex.xrf_params.tube_current_ua == 120.0
        ex.apply_tune("alice", TaskGoal(kind="tune_xrf", param="tube_voltage", value=5.0, mode="decrease"), now=0.0)
        assert ex.xrf_params.tube_voltage_kv == 25.0

    def test_out_of_range_rejected(self):
        ex = make_exec()
        ex.acquire_token("alice", now=0.0)
        with pytest.raises(ValueError):
            ex.apply_tune("alice", TaskGoal(kind="tune_xrf", param="tube_voltage", value=200.0, mode="set"), now=0.0)
        assert ex.xrf_params.tube_voltage_kv == 40.0  # unchanged
        assert ex.history[-1]["event"] == "tune_rejected"

    def test_requires_token(self):
        ex = make_exec()
        with pytest.raises(NotTokenHolder):
            ex.apply_tune("alice", TaskGoal(kind="tune_xrf", param="tube_voltage", value=30.0, mode="set"), now=0.0)


class TestHistory:
    def run_mission(self, seed=5):
        ex = armed(make_exec(rng_seed=seed), XRF_GOAL)
        ex.confirm_and_execute("alice", now=0.0)
        ex.run_to_completion()
        return ex

    def test_history_append_only_and_ordered(self):
        ex = self.run_mission()
        seqs = [e["seq"] for e in ex.history]
        assert seqs == list(range(1, len(seqs) + 1))

    def test_replay_hash_equal(self):
        assert self.run_mission().history_hash() == self.run_mission().history_hash()

    def test_different_rng_changes_spectrum_only(self):
        a = self.run_mission(seed=5)
        b = self.run_mission(seed=6)
        assert a.history_hash() != b.history_hash()  # spectrum draws differ
        assert [e["event"] for e in a.history] == [e["event"] for e in b.history]

    def test_object_target_by_id(self):
        ex = make_exec()
        ex.acquire_token("alice", now=0.0)
        goal = TaskGoal(kind="grasp_tool", target=ObjectRef(1))  # marker on the seafloor
        ex.propose_goal("alice", goal, now=0.0)
        traj = ex.build_preview()
        assert ex.phase == "Previewed"
        assert not traj.guarded
