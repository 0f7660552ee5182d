"""Deterministic tabletop simulator for a 6-DoF arm.

Kinematics: base yaw (j0), a planar shoulder/elbow/wrist-pitch chain (j1-j3)
and two wrist joints (j4, j5) that do not move the tool point.  Torque and
angular momentum are monotone proxies of joint speed, not dynamics.  All
randomness comes from the fault generator seeded per execution, so an
episode is a pure function of its seeds and the applied steps.
"""
from __future__ import annotations

import hashlib
import json
import math
import random
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

from .core import (
    DEFAULT_HORIZON,
    DOF,
    ActionStep,
    Limits,
    Observation,
    ObjectState,
    RobotState,
)
from .errors import ConfigError

OBJECT_WIDTH_MM = {"cube": 30.0, "cup": 45.0, "spoon": 12.0}
REST_HEIGHT = {"cube": 0.015, "cup": 0.04, "spoon": 0.01, "bowl": 0.0}
FAULT_KINDS = ("collision", "unreachable", "crash", "torque", "angmom", "slip")


@dataclass(frozen=True)
class ArmModel:
    # placeholder geometry; no real platform is modelled
    link_lengths: tuple[float, float, float] = (0.30, 0.25, 0.15)
    base_height: float = 0.20
    limits: Limits = Limits()
    gripper_speed_mm: float = 4.0
    torque_gain: float = 10.0
    inertia: tuple[float, ...] = (0.6, 0.5, 0.3, 0.05, 0.02, 0.02)
    home_ee: tuple[float, float, float] = (0.30, 0.0, 0.25)

    @property
    def max_joint_velocity(self) -> float:
        return self.limits.max_step_delta

    def fk(self, q: Sequence[float]) -> tuple[float, float, float]:
        l1, l2, l3 = self.link_lengths
        a1 = q[1]
        a2 = a1 + q[2]
        a3 = a2 + q[3]
        r = l1 * math.cos(a1) + l2 * math.cos(a2) + l3 * math.cos(a3)
        z = self.base_height + l1 * math.sin(a1) + l2 * math.sin(a2) + l3 * math.sin(a3)
        return (r * math.cos(q[0]), r * math.sin(q[0]), z)

    def ik(self, x: float, y: float, z: float) -> tuple[float, ...]:
        """Elbow-up solution with the tool pointing straight down."""
        l1, l2, l3 = self.link_lengths
        wr = math.hypot(x, y)
        wz = z + l3 - self.base_height
        d = (wr * wr + wz * wz - l1 * l1 - l2 * l2) / (2 * l1 * l2)
        if not -1.0 <= d <= 1.0:
            raise ValueError(f"point ({x:.3f}, {y:.3f}, {z:.3f}) out of reach")
        q2 = -math.acos(d)
        q1 = math.atan2(wz, wr) - math.atan2(l2 * math.sin(q2), l1 + l2 * math.cos(q2))
        q3 = -math.pi / 2 - q1 - q2
        return (math.atan2(y, x), q1, q2, q3, 0.0, 0.0)

    @property
    def home(self) -> tuple[float, ...]:
        return self.ik(*self.home_ee)

    def within_limits(self, q: Sequence[float]) -> bool:
        lo, hi = self.limits.joint_low, self.limits.joint_high
        return all(lo[j] <= q[j] <= hi[j] for j in range(DOF))


@dataclass(frozen=True)
class SceneObject:
    object_id: str
    kind: str
    pose: tuple[float, float, float]


@dataclass(frozen=True)
class ScriptedFault:
    at_step: int
    kind: str
    magnitude: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in FAULT_KINDS:
            raise ConfigError(f"unknown fault kind {self.kind!r}")


@dataclass(frozen=True)
class FaultConfig:
    gripper_slip_prob: float = 0.0
    torque_spike_prob: float = 0.0
    spike_magnitude: float = 25.0
    crash_prob: float = 0.0
    seed: int = 0
    scripted: tuple[ScriptedFault, ...] = ()

    def __post_init__(self) -> None:
        for p in (self.gripper_slip_prob, self.torque_spike_prob, self.crash_prob):
            if not 0.0 <= p <= 1.0:
                raise ConfigError("fault probabilities must lie in [0, 1]")


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    task: str = "place all cubes into the bowl"
    goal_radius: float = 0.06
    grasp_radius: float = 0.02
    faults: FaultConfig = FaultConfig()

    @property
    def goal(self) -> SceneObject:
        for o in self.objects:
            if o.kind == "bowl":
                return o
        raise ConfigError("scene has no bowl")

    def validate(self, limits: Limits = Limits()) -> None:
        ids = [o.object_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate object ids")
        self.goal
        for o in self.objects:
            if o.kind not in REST_HEIGHT:
                raise ConfigError(f"unknown object kind {o.kind!r}")
            for k in range(3):
                if not limits.workspace_low[k] <= o.pose[k] <= limits.workspace_high[k]:
                    raise ConfigError(f"object {o.object_id} outside the workspace")
        for i, a in enumerate(self.objects):
            for b in self.objects[i + 1:]:
                if math.dist(a.pose[:2], b.pose[:2]) < 0.05:
                    raise ConfigError(f"objects {a.object_id} and {b.object_id} interpenetrate")


def generate_layout(n_objects: int, seed: int, kind: str = "cube") -> tuple[SceneObject, ...]:
    """Random reachable layout: a bowl on one side, ``n_objects`` on the other."""
    rng = random.Random(f"layout:{seed}")
    side = 1 if rng.random() < 0.5 else -1
    ang = side * rng.uniform(0.75, 0.95)
    r = rng.uniform(0.32, 0.38)
    bowl = SceneObject("bowl", "bowl", (r * math.cos(ang), r * math.sin(ang), 0.0))
    objs: list[SceneObject] = []
    while len(objs) < n_objects:
        ang = -side * rng.uniform(-0.25, 0.85)
        r = rng.uniform(0.27, 0.42)
        p = (r * math.cos(ang), r * math.sin(ang), REST_HEIGHT[kind])
        if math.dist(p[:2], bowl.pose[:2]) < 0.14:
            continue
        if any(math.dist(p[:2], o.pose[:2]) < 0.07 for o in objs):
            continue
        objs.append(SceneObject(f"{kind}{len(objs)}", kind, p))
    return (bowl, *objs)


def scene_from_dict(d: dict) -> Scene:
    try:
        objects = tuple(SceneObject(str(o["id"]), o["kind"], tuple(float(v) for v in o["pose"])) for o in d["objects"])
        f = d.get("faults", {})
        scripted = tuple(ScriptedFault(int(s["at_step"]), s["kind"], float(s.get("magnitude", 0.0))) for s in f.get("scripted", ()))
        faults = FaultConfig(
            gripper_slip_prob=float(f.get("gripper_slip_prob", 0.0)),
            torque_spike_prob=float(f.get("torque_spike_prob", 0.0)),
            spike_magnitude=float(f.get("spike_magnitude", 25.0)),
            crash_prob=float(f.get("crash_prob", 0.0)),
            seed=int(d.get("seeds", {}).get("faults", f.get("seed", 0))),
            scripted=scripted,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"malformed scene: {e}") from e
    scene = Scene(objects, d.get("task", Scene.task), faults=faults)
    scene.validate()
    return scene


def scene_to_dict(scene: Scene) -> dict:
    f = scene.faults
    return {
        "objects": [{"id": o.object_id, "kind": o.kind, "pose": list(o.pose)} for o in scene.objects],
        "task": scene.task,
        "seeds": {"faults": f.seed},
        "faults": {
            "gripper_slip_prob": f.gripper_slip_prob,
            "torque_spike_prob": f.torque_spike_prob,
            "spike_magnitude": f.spike_magnitude,
            "crash_prob": f.crash_prob,
            "scripted": [{"at_step": s.at_step, "kind": s.kind, "magnitude": s.magnitude} for s in f.scripted],
        },
    }


def load_scene(path: str | Path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text()))


@dataclass
class SimClock:
    base_infer_ms: float = 200.0
    slice_actuation_ms: float = 1000.0
    horizon: int = DEFAULT_HORIZON
    hardware_aps_cap: Optional[float] = None
    infer_floor: float = 0.4
    now_ms: float = 0.0
    inference_ms: float = 0.0
    actuation_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.hardware_aps_cap is None:
            self.hardware_aps_cap = self.horizon / (self.slice_actuation_ms / 1000.0)


def advance_clock(clock: SimClock, phase: str, *, savings_ms: float = 0.0, steps: int = 0) -> float:
    """Charge one phase to the clock and return the new time.

    ``inference`` costs the base time minus reuse savings, never below
    ``infer_floor`` of the base; ``actuation`` costs the steps at the
    hardware rate (free when the cap is infinite).
    """
    if phase == "inference":
        charge = max(clock.base_infer_ms - savings_ms, clock.infer_floor * clock.base_infer_ms)
        clock.inference_ms += charge
    elif phase == "actuation":
        if steps < 0:
            raise ValueError("negative step count")
        charge = 0.0 if math.isinf(clock.hardware_aps_cap) else steps * 1000.0 / clock.hardware_aps_cap
        clock.actuation_ms += charge
    else:
        raise ValueError(f"unknown phase {phase!r}")
    clock.now_ms += charge
    return clock.now_ms


@dataclass
class _Obj:
    object_id: str
    kind: str
    pose: tuple[float, float, float]
    placed: bool = False


class Simulator:
    def __init__(self, scene: Scene, arm: ArmModel = ArmModel(), dt: float = 1.0 / DEFAULT_HORIZON) -> None:
        scene.validate(arm.limits)
        self.scene = scene
        self.arm = arm
        self.dt = dt
        self.restarts = 0
        self.reset(0)

    def reset(self, execution: int = 0) -> None:
        """Restore the initial scene with the arm at home."""
        self.rng = random.Random(f"faults:{self.scene.faults.seed}:{execution}")
        self.step_count = 0
        self.objects = [_Obj(o.object_id, o.kind, o.pose) for o in self.scene.objects]
        q = self.arm.home
        self.state = RobotState(joints=q, gripper_gap=self.arm.limits.gap_max, ee_pose=self.arm.fk(q))
        self._offset: Optional[tuple[float, float, float]] = None
        self._scripted = {}
        for s in self.scene.faults.scripted:
            self._scripted.setdefault(s.at_step, []).append(s)
        self._force_slip = False

    # ---------------------------------------------------------------- query
    def _obj(self, object_id: str) -> _Obj:
        for o in self.objects:
            if o.object_id == object_id:
                return o
        raise KeyError(object_id)

    @property
    def placed_count(self) -> int:
        return sum(1 for o in self.objects if o.placed)

    @property
    def task_done(self) -> bool:
        return all(o.placed for o in self.objects if o.kind != "bowl")

    def observe(self) -> Observation:
        held = self.state.holding
        objs = tuple(
            ObjectState(o.object_id, o.kind, o.pose, o.placed, o.object_id == held) for o in self.objects
        )
        return Observation(self.state, objs, self.scene.task)

    def digest(self) -> str:
        s = self.state
        h = hashlib.blake2b(digest_size=16)
        h.update(struct.pack(f"<{DOF}d", *s.joints))
        h.update(struct.pack(f"<{DOF}d", *s.torques))
        h.update(struct.pack("<dd3d", s.gripper_gap, s.angular_momentum, *s.ee_pose))
        h.update(bytes([s.collided, s.crashed, s.unreachable]))
        h.update((s.holding or "").encode() + b"|")
        for o in self.objects:
            h.update(o.object_id.encode() + struct.pack("<3d?", *o.pose, o.placed))
        return h.hexdigest()

    # ---------------------------------------------------------------- apply
    def apply(self, step: ActionStep) -> tuple[RobotState, list[str]]:
        """Execute one control tick; abnormalities surface as state flags."""
        arm, lim = self.arm, self.arm.limits
        n = self.step_count
        self.step_count += 1
        u_spike = self.rng.random()
        j_spike = self.rng.randrange(DOF)
        u_crash = self.rng.random()
        events: list[str] = []
        s = self.state

        if s.crashed:
            self.state = replace(s, torques=(0.0,) * DOF, angular_momentum=0.0)
            events.append("frozen")
            self._inject(n, events)
            return self.state, events

        q = list(s.joints)
        unreachable = s.unreachable
        for j in range(DOF):
            target = q[j] + step.joint_deltas[j]
            clipped = min(max(target, lim.joint_low[j]), lim.joint_high[j])
            if clipped != target:
                unreachable = True
                events.append(f"clip:{j}")
            q[j] = clipped
        actual = [q[j] - s.joints[j] for j in range(DOF)]
        torques = [arm.torque_gain * abs(a) / self.dt for a in actual]
        if u_spike < self.scene.faults.torque_spike_prob:
            torques[j_spike] += self.scene.faults.spike_magnitude
            events.append("torque_spike")
        angmom = math.fsum(arm.inertia[j] * abs(actual[j]) / self.dt for j in range(DOF))
        ee = arm.fk(q)
        holding = s.holding
        gap = s.gripper_gap

        if step.gripper_cmd is not None:
            cmd = step.gripper_cmd
            if holding is not None:
                if cmd > gap:
                    self._release(holding, events)
                    holding = None
                    gap = min(cmd, gap + arm.gripper_speed_mm)
            elif cmd < gap:
                new_gap = max(cmd, gap - arm.gripper_speed_mm)
                obj = self._graspable(ee)
                if obj is not None and new_gap <= OBJECT_WIDTH_MM[obj.kind] < gap:
                    slip = self._force_slip or self.rng.random() < self.scene.faults.gripper_slip_prob
                    if slip:
                        self._force_slip = False
                        new_gap = 0.0
                        events.append(f"slip:{obj.object_id}")
                    else:
                        new_gap = OBJECT_WIDTH_MM[obj.kind]
                        holding = obj.object_id
                        self._offset = tuple(obj.pose[k] - ee[k] for k in range(3))
                        events.append(f"grasp:{obj.object_id}")
                gap = new_gap
            elif cmd > gap:
                gap = min(cmd, gap + arm.gripper_speed_mm)

        if holding is not None:
            o = self._obj(holding)
            o.pose = tuple(ee[k] + self._offset[k] for k in range(3))

        lo, hi = lim.workspace_low, lim.workspace_high
        collided = s.collided or any(not lo[k] <= ee[k] <= hi[k] for k in range(3))
        if collided and not s.collided:
            events.append("collision")
        crashed = u_crash < self.scene.faults.crash_prob
        if crashed:
            events.append("crash")
        self.state = RobotState(
            joints=tuple(q),
            torques=tuple(torques),
            gripper_gap=gap,
            angular_momentum=angmom,
            ee_pose=ee,
            collided=collided,
            crashed=crashed,
            unreachable=unreachable,
            holding=holding,
        )
        self._inject(n, events)
        return self.state, events

    def _graspable(self, ee) -> Optional[_Obj]:
        best = None
        for o in self.objects:
            if o.kind == "bowl" or o.placed:
                continue
            d = math.dist(o.pose, ee)
            if d <= self.scene.grasp_radius and (best is None or d < best[0]):
                best = (d, o)
        return None if best is None else best[1]

    def _release(self, object_id: str, events: list[str]) -> None:
        o = self._obj(object_id)
        goal = self.scene.goal.pose
        if math.dist(o.pose[:2], goal[:2]) <= self.scene.goal_radius:
            o.pose = (goal[0], goal[1], 0.02 + 0.03 * self.placed_count)
            o.placed = True
            events.append(f"placed:{object_id}")
        else:
            o.pose = (o.pose[0], o.pose[1], REST_HEIGHT[o.kind])
            events.append(f"dropped:{object_id}")
        self._offset = None

    def _inject(self, n: int, events: list[str]) -> None:
        for f in self._scripted.get(n, ()):
            s = self.state
            if f.kind == "collision":
                self.state = replace(s, collided=True)
            elif f.kind == "unreachable":
                self.state = replace(s, unreachable=True)
            elif f.kind == "crash":
                self.state = replace(s, crashed=True)
            elif f.kind == "torque":
                t = list(s.torques)
                t[0] += f.magnitude or self.scene.faults.spike_magnitude
                self.state = replace(s, torques=tuple(t))
            elif f.kind == "angmom":
                self.state = replace(s, angular_momentum=s.angular_momentum + (f.magnitude or 2.5))
            elif f.kind == "slip":
                self._force_slip = True
            events.append(f"inject:{f.kind}")

    # --------------------------------------------------------------- recover
    def reset_safe(self, trajectory: Sequence[ActionStep]) -> RobotState:
        for st in trajectory:
            self.apply(st)
        return self.state

    def restart(self) -> RobotState:
        """Power cycle: clear latched crash/collision/unreachable flags and
        zero the torque readings.  Re-homing is done by the caller's
        rollback trajectory."""
        self.restarts += 1
        self.state = replace(
            self.state,
            collided=False,
            crashed=False,
            unreachable=False,
            torques=(0.0,) * DOF,
            angular_momentum=0.0,
        )
        return self.state


def observe(sim: Simulator) -> Observation:
    return sim.observe()


def apply(sim: Simulator, step: ActionStep) -> tuple[RobotState, list[str]]:
    return sim.apply(step)


