"""Exception detection, sub-slice checking, handlers and atomized rollback."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Optional, Protocol, Sequence

from .core import (
    DEFAULT_GAP_MAX,
    DEFAULT_MAX_STEP_DELTA,
    DOF,
    GRIPPER_DOF,
    ActionSlice,
    ActionStep,
    ExceptionKind,
    Limits,
    ObservationSignature,
    RobotState,
    SubSlice,
)
from .errors import ConfigError, EmptyBuffer, HandlerFailure

RESTART_CODES = frozenset({ExceptionKind.COLLISION, ExceptionKind.UNREACHABLE_STATE, ExceptionKind.ROBOT_CRASH})
_MOTION_EPS = 1e-12

# max per-step intent magnitude (rad) -> sub-slice length
_LENGTH_TABLE = ((0.01, 5), (0.02, 4), (0.03, 3))


def subslice_length(magnitude: float) -> int:
    for bound, length in _LENGTH_TABLE:
        if magnitude <= bound:
            return length
    return 2


def intent_magnitude(steps: Iterable[ActionStep]) -> float:
    return max((s.delta_norm() for s in steps), default=0.0)


def segment(sl: ActionSlice, magnitude: Optional[float] = None) -> list[SubSlice]:
    """Split a slice into contiguous checkable sub-slices; larger motions get
    shorter sub-slices."""
    if not sl.steps:
        raise ValueError("cannot segment an empty slice")
    if magnitude is None:
        magnitude = intent_magnitude(sl.steps)
    length = subslice_length(magnitude)
    n = len(sl.steps)
    return [SubSlice(sl.slice_id, i, min(i + length, n)) for i in range(0, n, length)]


def check_hardware(state: RobotState, limits: Limits) -> Optional[ExceptionKind]:
    """First hardware exception by severity: crash, collision, unreachable,
    torque, angular momentum."""
    if state.crashed:
        return ExceptionKind.ROBOT_CRASH
    if state.collided:
        return ExceptionKind.COLLISION
    if state.unreachable:
        return ExceptionKind.UNREACHABLE_STATE
    if any(not math.isfinite(t) or abs(t) > limits.torque_max for t in state.torques):
        return ExceptionKind.TORQUE_LIMIT
    if not math.isfinite(state.angular_momentum) or state.angular_momentum > limits.angmom_max:
        return ExceptionKind.ANGULAR_MOMENTUM_LIMIT
    return None


# ----------------------------------------------------------- expectations
Predicate = Callable[[RobotState, RobotState, Sequence[float]], bool]


def _grasp_ok(pre: RobotState, post: RobotState, commanded: Sequence[float]) -> bool:
    return post.holding is not None or post.gripper_gap > 0.0


def _open_ok(pre: RobotState, post: RobotState, commanded: Sequence[float]) -> bool:
    return post.gripper_gap > pre.gripper_gap or post.gripper_gap >= DEFAULT_GAP_MAX


def _joint_move_ok(pre: RobotState, post: RobotState, commanded: Sequence[float]) -> bool:
    return all(post.joints[j] != pre.joints[j] for j, c in enumerate(commanded) if abs(c) > _MOTION_EPS)


def _stop_ok(pre: RobotState, post: RobotState, commanded: Sequence[float]) -> bool:
    return post.joints == pre.joints


BUILTIN_RULES: dict[str, Predicate] = {
    "grasp": _grasp_ok,
    "open": _open_ok,
    "joint_move": _joint_move_ok,
    "stop": _stop_ok,
}


@dataclass(frozen=True)
class ExpectationTable:
    rules: Mapping[str, Predicate] = field(default_factory=lambda: dict(BUILTIN_RULES))

    def rule(self, kind: str) -> Predicate:
        try:
            return self.rules[kind]
        except KeyError:
            raise ConfigError(f"no expectation rule for action kind {kind!r}") from None


def action_kinds(step: ActionStep, gap_before: float) -> set[str]:
    kinds = set()
    if any(d != 0.0 for d in step.joint_deltas):
        kinds.add("joint_move")
    if step.gripper_cmd is not None:
        if step.gripper_cmd < gap_before:
            kinds.add("grasp")
        elif step.gripper_cmd > gap_before:
            kinds.add("open")
    if not kinds:
        kinds.add("stop")
    return kinds


@dataclass(frozen=True)
class Condition:
    """Scenario-defined predicate over the post-sub-slice state."""

    name: str
    holds: Callable[[RobotState], bool]


def condition_from_dict(d: dict) -> Condition:
    kind = d.get("type")
    if kind == "ee_min_z":
        z = float(d["value"])
        return Condition(f"ee_min_z>={z}", lambda s: s.ee_pose[2] >= z)
    if kind == "keepout":
        lo, hi = tuple(d["low"]), tuple(d["high"])
        return Condition("keepout", lambda s: not all(lo[k] <= s.ee_pose[k] <= hi[k] for k in range(3)))
    raise ConfigError(f"unknown condition type {kind!r}")


def check_software(
    steps: Sequence[ActionStep],
    pre: RobotState,
    post: RobotState,
    table: ExpectationTable = ExpectationTable(),
    conditions: Sequence[Condition] = (),
) -> Optional[ExceptionKind]:
    if not steps:
        return None
    commanded = [math.fsum(s.joint_deltas[j] for s in steps) for j in range(DOF)]
    kinds: set[str] = set()
    for s in steps:
        kinds |= action_kinds(s, pre.gripper_gap)
    for kind in sorted(kinds):
        if not table.rule(kind)(pre, post, commanded):
            return ExceptionKind.NOT_EXPECTED_ACTION
    for cond in conditions:
        if not cond.holds(post):
            return ExceptionKind.CONDITION_VIOLATION
    return None


# ---------------------------------------------------------------- rollback
@dataclass(frozen=True)
class AtomicAction:
    dof_index: int
    delta: float

    def __post_init__(self) -> None:
        if not 0 <= self.dof_index <= GRIPPER_DOF:
            raise ValueError(f"dof index {self.dof_index} out of range")


_ROLLBACK_SIG = ObservationSignature("rollback", (), "rollback")


class RollbackBuffer:
    """Ring of single-DoF micro-displacements recorded since the safe pose.

    When full, the contents are folded into one net-displacement entry on the
    consolidation queue; sums are kept as exact fractions so folding never
    changes the net displacement.
    """

    def __init__(
        self,
        capacity: int = 256,
        max_step_delta: float = DEFAULT_MAX_STEP_DELTA,
        gripper_step_mm: float = 4.0,
    ) -> None:
        if capacity < DOF + 1:
            raise ValueError("capacity must hold at least one full step")
        self.capacity = capacity
        self.step_limits = (max_step_delta,) * DOF + (gripper_step_mm,)
        self.actions: list[AtomicAction] = []
        self.queue: list[tuple[Fraction, ...]] = []
        self.raw_count = 0

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def empty(self) -> bool:
        return not self.actions and not self.queue

    def _fold(self) -> None:
        self.queue.append(self._sum(self.actions))
        self.actions.clear()

    @staticmethod
    def _sum(actions: Iterable[AtomicAction]) -> tuple[Fraction, ...]:
        net = [Fraction(0)] * (DOF + 1)
        for a in actions:
            net[a.dof_index] += Fraction(a.delta)
        return tuple(net)

    def push_net(self, net: Sequence[Fraction]) -> None:
        if any(net):
            self.queue.append(tuple(Fraction(x) for x in net))

    def record(self, step: ActionStep, gripper_delta: float = 0.0) -> int:
        atoms = [AtomicAction(j, d) for j, d in enumerate(step.joint_deltas) if d != 0.0]
        if gripper_delta != 0.0:
            atoms.append(AtomicAction(GRIPPER_DOF, gripper_delta))
        if len(self.actions) + len(atoms) > self.capacity:
            self._fold()
        self.actions.extend(atoms)
        self.raw_count += len(atoms)
        return len(atoms)

    def net(self) -> tuple[Fraction, ...]:
        total = list(self._sum(self.actions))
        for q in self.queue:
            for k in range(DOF + 1):
                total[k] += q[k]
        return tuple(total)

    def clear(self) -> None:
        self.actions.clear()
        self.queue.clear()
        self.raw_count = 0

    def consolidate(self, gripper_gap: Optional[float] = None) -> ActionSlice:
        """Shortest return trajectory undoing the net displacement.

        Each DoF moves back at its full step limit and finishes with the
        remainder, so the step count is ceil(max_j |D_j| / limit_j).
        ``gripper_gap`` is the current gap, needed to turn the gripper's net
        displacement into absolute gap targets.
        """
        if self.empty:
            raise EmptyBuffer("rollback buffer is empty")
        net = self.net()
        limits = [Fraction(x) for x in self.step_limits]
        n_steps = max(math.ceil(abs(d) / lim) for d, lim in zip(net, limits))
        remaining = [-d for d in net]
        steps = []
        gap = gripper_gap
        for i in range(n_steps):
            moves = []
            for k in range(DOF + 1):
                r = remaining[k]
                m = max(-limits[k], min(limits[k], r))
                remaining[k] = r - m
                moves.append(m)
            cmd = None
            if gripper_gap is not None and moves[GRIPPER_DOF] != 0:
                gap = float(Fraction(gripper_gap) - net[GRIPPER_DOF] - remaining[GRIPPER_DOF])
                cmd = gap
            steps.append(ActionStep(i, tuple(float(m) for m in moves[:DOF]), cmd, False))
        self.clear()
        return ActionSlice("rollback", tuple(steps), "", _ROLLBACK_SIG)


def record_atomic(buffer: RollbackBuffer, step: ActionStep, gripper_delta: float = 0.0) -> int:
    return buffer.record(step, gripper_delta)


def consolidate(buffer: RollbackBuffer, gripper_gap: Optional[float] = None) -> ActionSlice:
    return buffer.consolidate(gripper_gap)


# ---------------------------------------------------------------- handlers
class ExecutorHandle(Protocol):
    def cancel_pending(self) -> int: ...

    def rollback(self) -> Optional[ExceptionKind]: ...

    def restart(self) -> None: ...

    def refresh_observation(self) -> None: ...

    def request_reinference(self) -> None: ...


@dataclass(frozen=True)
class HandlerOutcome:
    code: ExceptionKind
    cancelled_subslices: int
    reset_performed: bool
    restarted: bool
    reinference_requested: bool


def handle(
    exc: ExceptionKind,
    executor: ExecutorHandle,
    restart_codes: frozenset = RESTART_CODES,
) -> HandlerOutcome:
    """Run the common handler part, then the per-code part.

    Hardware codes roll back to the safe pose; codes in ``restart_codes``
    power-cycle first, since a crashed controller accepts no motion.  A
    hardware fault during rollback gets one retry; a second consecutive one
    raises HandlerFailure.
    """
    exc = ExceptionKind(exc)
    cancelled = executor.cancel_pending()
    reset = restarted = False
    if exc.is_hardware:
        if exc in restart_codes:
            executor.restart()
            restarted = True
        fault = executor.rollback()
        if fault is not None:
            if fault in restart_codes:
                executor.restart()
                restarted = True
            fault = executor.rollback()
            if fault is not None:
                raise HandlerFailure(f"rollback after {exc.name} faulted twice ({fault.name})")
        reset = True
    executor.refresh_observation()
    executor.request_reinference()
    return HandlerOutcome(exc, cancelled, reset, restarted, True)
