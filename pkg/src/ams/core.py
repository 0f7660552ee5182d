"""Shared domain types for the action-management runtime."""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Optional, Sequence

DOF = 6
GRIPPER_DOF = DOF  # index used for the gripper in atomized actions
DEFAULT_HORIZON = 16
DEFAULT_MAX_STEP_DELTA = 0.05
DEFAULT_GAP_MAX = 60.0
OBJECT_KINDS = ("cube", "cup", "spoon", "bowl")


class ExceptionKind(IntEnum):
    COLLISION = 1
    UNREACHABLE_STATE = 2
    ROBOT_CRASH = 3
    TORQUE_LIMIT = 4
    ANGULAR_MOMENTUM_LIMIT = 5
    NOT_EXPECTED_ACTION = 6
    CONDITION_VIOLATION = 7

    @property
    def is_hardware(self) -> bool:
        return self.value <= 5

    @property
    def exc_class(self) -> str:
        return "hardware" if self.is_hardware else "software"


@dataclass(frozen=True)
class ActionStep:
    """One control tick: per-joint deltas (rad), gripper target gap (mm) or
    ``None`` for hold, and the policy's per-step completion marker."""

    step_index: int
    joint_deltas: tuple[float, ...]
    gripper_cmd: Optional[float] = None
    complete_flag: bool = False

    @property
    def is_zero(self) -> bool:
        return self.gripper_cmd is None and all(d == 0.0 for d in self.joint_deltas)

    def delta_norm(self) -> float:
        return math.sqrt(math.fsum(d * d for d in self.joint_deltas))


@dataclass(frozen=True)
class ActionSlice:
    slice_id: str
    steps: tuple[ActionStep, ...]
    prompt: str
    observation_sig: "ObservationSignature"
    blobs: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def all_complete(self) -> bool:
        return bool(self.steps) and all(s.complete_flag for s in self.steps)


@dataclass(frozen=True)
class SubSlice:
    parent: str
    start: int
    end: int
    verdict: str = "pending"
    failure: Optional[ExceptionKind] = None

    def __len__(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class Limits:
    torque_max: float = 20.0
    angmom_max: float = 2.0
    joint_low: tuple[float, ...] = (-math.pi, -0.6, -2.9, -3.2, -math.pi, -math.pi)
    joint_high: tuple[float, ...] = (math.pi, 2.6, 0.3, 3.2, math.pi, math.pi)
    workspace_low: tuple[float, float, float] = (-0.8, -0.8, 0.0)
    workspace_high: tuple[float, float, float] = (0.8, 0.8, 0.9)
    max_step_delta: float = DEFAULT_MAX_STEP_DELTA
    gap_max: float = DEFAULT_GAP_MAX

    def __post_init__(self) -> None:
        values = [self.torque_max, self.angmom_max, self.max_step_delta, self.gap_max]
        values += list(self.joint_low) + list(self.joint_high)
        values += list(self.workspace_low) + list(self.workspace_high)
        if not all(math.isfinite(v) for v in values):
            raise ValueError("limits must be finite")
        if min(self.torque_max, self.angmom_max, self.max_step_delta, self.gap_max) <= 0:
            raise ValueError("limits must be positive")


@dataclass(frozen=True)
class RobotState:
    joints: tuple[float, ...]
    torques: tuple[float, ...] = (0.0,) * DOF
    gripper_gap: float = DEFAULT_GAP_MAX
    angular_momentum: float = 0.0
    ee_pose: tuple[float, float, float] = (0.0, 0.0, 0.0)
    collided: bool = False
    crashed: bool = False
    unreachable: bool = False
    holding: Optional[str] = None

    @property
    def flags(self) -> dict[str, bool]:
        return {"collided": self.collided, "crashed": self.crashed, "unreachable": self.unreachable}


@dataclass(frozen=True)
class ObjectState:
    object_id: str
    kind: str
    pose: tuple[float, float, float]
    placed: bool = False
    held: bool = False


@dataclass(frozen=True)
class ObservationSignature:
    """Component digests of an observation.

    Lookup similarity compares components one by one; ``digest`` is the
    whole-signature identity.
    """

    instruction: str
    objects: tuple[tuple[str, str], ...]
    robot: str

    @property
    def digest(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(self.instruction.encode())
        for oid, d in self.objects:
            h.update(oid.encode() + b"=" + d.encode() + b";")
        h.update(self.robot.encode())
        return h.hexdigest()

    def components(self) -> dict[str, str]:
        comps = {f"obj:{oid}": d for oid, d in self.objects}
        comps["robot"] = self.robot
        return comps

    def scene_components(self) -> dict[str, str]:
        return {f"obj:{oid}": d for oid, d in self.objects}

    def __bool__(self) -> bool:
        return bool(self.instruction) and bool(self.robot)


@dataclass(frozen=True)
class Observation:
    robot: RobotState
    objects: tuple[ObjectState, ...]
    instruction: str
    sig: ObservationSignature = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.sig is None:
            object.__setattr__(
                self, "sig", observation_signature(self.instruction, self.objects, self.robot.joints)
            )

    def object(self, object_id: str) -> ObjectState:
        for o in self.objects:
            if o.object_id == object_id:
                return o
        raise KeyError(object_id)

    @property
    def placed_count(self) -> int:
        return sum(1 for o in self.objects if o.placed)


def _quantize(x: float, quantum: float) -> int:
    return math.floor(x / quantum + 0.5)


def _digest(*chunks: bytes) -> str:
    h = hashlib.blake2b(digest_size=8)
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def observation_signature(
    instruction: str,
    objects: Iterable[ObjectState],
    joints: Sequence[float],
    quantum: float = 0.01,
    joint_quantum: float = 0.01,
) -> ObservationSignature:
    """Hash an observation into per-component digests.

    Object poses are quantized to ``quantum`` meters and joints to
    ``joint_quantum`` radians before hashing.  A held object is encoded by
    its ``held`` marker instead of its pose, since the pose then follows the
    arm.
    """
    if quantum <= 0 or joint_quantum <= 0:
        raise ValueError("quantum must be positive")
    comps = []
    for o in sorted(objects, key=lambda o: o.object_id):
        if o.held:
            body = b"held"
        else:
            body = struct.pack("<3q", *(_quantize(p, quantum) for p in o.pose))
        comps.append((o.object_id, _digest(o.kind.encode(), b"|", body, b"|", bytes([o.placed]))))
    robot = _digest(struct.pack(f"<{len(joints)}q", *(_quantize(q, joint_quantum) for q in joints)))
    return ObservationSignature(instruction=_digest(instruction.encode()), objects=tuple(comps), robot=robot)


def signature_similarity(a: ObservationSignature, b: ObservationSignature) -> float:
    """1.0 for identical signatures, else the fraction of matching
    components; 0.0 when the instructions differ."""
    if a.instruction != b.instruction:
        return 0.0
    ca, cb = a.components(), b.components()
    keys = set(ca) | set(cb)
    if not keys:
        return 1.0
    matched = sum(1 for k in keys if ca.get(k) is not None and ca.get(k) == cb.get(k))
    return matched / len(keys)


def validate_step(step: ActionStep, limits: Limits) -> list[str]:
    """Return every bound ``step`` violates; empty means valid."""
    violations = []
    if len(step.joint_deltas) != DOF:
        violations.append(f"dof: expected {DOF} joint deltas, got {len(step.joint_deltas)}")
    for j, d in enumerate(step.joint_deltas):
        if not math.isfinite(d) or abs(d) > limits.max_step_delta:
            violations.append(f"joint {j}: |delta| {d!r} exceeds {limits.max_step_delta}")
    if step.gripper_cmd is not None:
        g = step.gripper_cmd
        if not math.isfinite(g) or g < 0 or g > limits.gap_max:
            violations.append(f"gripper: gap {g!r} outside [0, {limits.gap_max}]")
    return violations


def validate_slice(sl: ActionSlice, h_max: int = DEFAULT_HORIZON) -> list[str]:
    violations = []
    if not 1 <= len(sl.steps) <= h_max:
        violations.append(f"length {len(sl.steps)} outside [1, {h_max}]")
    if not sl.observation_sig:
        violations.append("empty observation signature")
    idx = [s.step_index for s in sl.steps]
    if any(b <= a for a, b in zip(idx, idx[1:])):
        violations.append("step indices not strictly increasing")
    return violations


def zero_step(index: int, complete: bool = False) -> ActionStep:
    return ActionStep(index, (0.0,) * DOF, None, complete)
