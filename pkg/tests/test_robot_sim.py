import json
import math

import pytest

from ams.core import ActionStep, Limits, observation_signature
from ams.errors import ConfigError
from ams.exception_engine import RollbackBuffer
from ams.robot_sim import (
    ArmModel,
    FaultConfig,
    Scene,
    SceneObject,
    ScriptedFault,
    SimClock,
    Simulator,
    advance_clock,
    apply,
    generate_layout,
    load_scene,
    observe,
    scene_from_dict,
    scene_to_dict,
)

ARM = ArmModel()
ZERO = ActionStep(0, (0.0,) * 6)


def grasp_scene(**faults):
    ee = ARM.fk(ARM.home)
    return Scene((SceneObject("bowl", "bowl", (0.2, -0.3, 0.0)), SceneObject("c", "cube", ee)),
                 faults=FaultConfig(**faults))


def close(i=0):
    return ActionStep(i, (0.0,) * 6, 0.0)


def test_fk_ik_round_trip_over_layouts():
    for seed in range(100):
        for o in generate_layout(3, seed):
            for z in (o.pose[2], 0.10, 0.12, 0.25):
                q = ARM.ik(o.pose[0], o.pose[1], z)
                assert ARM.within_limits(q)
                assert math.dist(ARM.fk(q), (o.pose[0], o.pose[1], z)) < 1e-9


def test_home_pose():
    assert math.dist(ARM.fk(ARM.home), ARM.home_ee) < 1e-12 and ARM.within_limits(ARM.home)
    with pytest.raises(ValueError):
        ARM.ik(2.0, 0.0, 0.0)


def test_zero_step_changes_nothing():
    sim = Simulator(Scene(generate_layout(2, 0)))
    before = sim.state
    state, events = apply(sim, ZERO)
    assert state == before and events == []


def test_step_below_table_collides():
    sim = Simulator(Scene(generate_layout(1, 0)))
    hit = False
    for i in range(40):
        state, _ = sim.apply(ActionStep(i, (0, -0.05, 0, 0, 0, 0)))
        if state.ee_pose[2] < 0:
            hit = True
            break
    assert hit and state.collided


def test_joint_clip_flags_unreachable():
    sim = Simulator(Scene(generate_layout(1, 0)))
    for i in range(80):
        state, events = sim.apply(ActionStep(i, (0, 0, 0.05, 0, 0, 0)))
    assert state.unreachable and any(e.startswith("clip") for e in events)
    assert state.joints[2] == Limits().joint_high[2]


def test_grasp_attaches_and_object_follows():
    sim = Simulator(grasp_scene())
    for i in range(8):
        state, events = sim.apply(close(i))
    assert state.holding == "c" and state.gripper_gap == 30.0
    offset = [sim._obj("c").pose[k] - state.ee_pose[k] for k in range(3)]
    for i in range(10):
        state, _ = sim.apply(ActionStep(i, (0.02, -0.01, 0.0, 0.01, 0, 0)))
        now = [sim._obj("c").pose[k] - state.ee_pose[k] for k in range(3)]
        assert now == pytest.approx(offset, abs=1e-12)


def test_slip_closes_to_zero_without_attachment():
    sim = Simulator(grasp_scene(gripper_slip_prob=1.0))
    events = []
    for i in range(8):
        state, ev = sim.apply(close(i))
        events += ev
    assert state.gripper_gap == 0.0 and state.holding is None and "slip:c" in events


def test_slip_draw_is_seeded():
    def slips(seed):
        out = []
        for execution in range(20):
            sim = Simulator(grasp_scene(gripper_slip_prob=0.5, seed=seed))
            sim.reset(execution)
            for i in range(8):
                sim.apply(close(i))
            out.append(sim.state.holding is None)
        return out
    assert slips(1) == slips(1)
    assert 0 < sum(slips(1)) < 20


def test_crash_freezes_until_restart():
    scene = Scene(generate_layout(1, 0), faults=FaultConfig(scripted=(ScriptedFault(0, "crash"),)))
    sim = Simulator(scene)
    sim.apply(ZERO)
    q = sim.state.joints
    state, events = sim.apply(ActionStep(1, (0.03,) + (0.0,) * 5))
    assert state.crashed and state.joints == q and "frozen" in events
    state = sim.restart()
    assert not (state.crashed or state.collided or state.unreachable)
    assert state.torques == (0.0,) * 6 and sim.restarts == 1


def test_observe_and_signature():
    sim = Simulator(Scene(generate_layout(2, 3)))
    a, b = observe(sim), observe(sim)
    assert a.sig == b.sig
    assert a.sig == observation_signature(a.instruction, a.objects, a.robot.joints)
    assert a.placed_count == 0


def test_reset_safe_returns_home():
    sim = Simulator(Scene(generate_layout(1, 2)))
    buf = RollbackBuffer()
    home = sim.state.joints
    for i in range(30):
        before = sim.state
        st = ActionStep(i, (0.03, -0.02, 0.01, 0.04, 0.0, -0.01))
        after, _ = sim.apply(st)
        buf.record(ActionStep(i, tuple(after.joints[j] - before.joints[j] for j in range(6))))
    state = sim.reset_safe(buf.consolidate().steps)
    assert max(abs(state.joints[j] - home[j]) for j in range(6)) <= 1e-9


def test_clock_examples():
    clock = SimClock()
    assert clock.hardware_aps_cap == 16
    assert advance_clock(clock, "inference") == 200.0
    assert advance_clock(clock, "actuation", steps=16) == 1200.0
    saved = 0.08 * 200 + 0.12 * 200
    assert advance_clock(clock, "inference", savings_ms=saved) == 1200.0 + 200.0 - saved
    assert advance_clock(clock, "inference", savings_ms=1e9) == pytest.approx(1360.0 + 80.0)
    assert clock.now_ms == clock.inference_ms + clock.actuation_ms
    free = SimClock(hardware_aps_cap=math.inf)
    assert advance_clock(free, "actuation", steps=16) == 0.0
    with pytest.raises(ValueError):
        advance_clock(clock, "sleep")


def test_determinism_of_faulty_runs():
    def run():
        scene = Scene(generate_layout(2, 4), faults=FaultConfig(0.3, 0.2, 25.0, 0.05, 9))
        sim = Simulator(scene)
        digests = []
        for i in range(100):
            sim.apply(ActionStep(i, (0.01, 0.0, -0.01, 0.0, 0.0, 0.0), 10.0))
            digests.append(sim.digest())
        return digests
    assert run() == run()


def test_scene_file_round_trip(tmp_path):
    scene = Scene(generate_layout(2, 1), faults=FaultConfig(0.1, 0.2, 25.0, 0.0, 3, (ScriptedFault(5, "slip"),)))
    path = tmp_path / "scene.json"
    path.write_text(json.dumps(scene_to_dict(scene)))
    assert load_scene(path) == scene


@pytest.mark.parametrize("bad", [
    {"objects": []},
    {"objects": [{"id": "b", "kind": "bowl", "pose": [0, 0, 0]}, {"id": "b", "kind": "cube", "pose": [0.3, 0, 0]}]},
    {"objects": [{"id": "b", "kind": "bowl", "pose": [0, 0, 0]}, {"id": "c", "kind": "rock", "pose": [0.3, 0, 0]}]},
    {"objects": [{"id": "b", "kind": "bowl", "pose": [0, 0, 0]}, {"id": "c", "kind": "cube", "pose": [3, 0, 0]}]},
    {"objects": [{"id": "b", "kind": "bowl", "pose": [0, 0, 0]}, {"id": "c", "kind": "cube", "pose": [0.01, 0, 0]}]},
    {"objects": [{"id": "b", "kind": "bowl"}]},
    {"objects": [{"id": "b", "kind": "bowl", "pose": [0, 0, 0]}], "faults": {"crash_prob": 2}},
    {"objects": [{"id": "b", "kind": "bowl", "pose": [0, 0, 0]}], "faults": {"scripted": [{"at_step": 1, "kind": "meteor"}]}},
])
def test_bad_scenes_rejected(bad):
    with pytest.raises(ConfigError):
        scene_from_dict(bad)
