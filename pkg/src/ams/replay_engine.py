"""Replay signal detection and context-guided regeneration."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .context_pool import BlobKind, ContextPool
from .core import DOF, ActionSlice, Observation, ObservationSignature, RobotState
from .policy_synth import Policy, PolicyRequest, PolicyResponse

ALL_COMPLETE = "all-complete-flags"
SUB_THRESHOLD = "sub-threshold-motion"


@dataclass(frozen=True)
class ReplayThresholds:
    arm_eps: float = 1e-5
    gripper_eps: float = 1.0

    def __post_init__(self) -> None:
        if not (self.arm_eps > 0 and self.gripper_eps > 0):
            raise ValueError("replay thresholds must be positive")


@dataclass(frozen=True)
class ReplayDecision:
    fired: bool
    reason: Optional[str] = None
    chosen_ctx: Optional[int] = None
    attempt_index: int = 0
    scene_digest: str = ""


def _sub_threshold(states: Sequence[RobotState], th: ReplayThresholds) -> bool:
    for a, b in zip(states, states[1:]):
        if any(abs(b.joints[j] - a.joints[j]) >= th.arm_eps for j in range(DOF)):
            return False
        if abs(b.gripper_gap - a.gripper_gap) >= th.gripper_eps:
            return False
    return True


def should_replay(
    executed: ActionSlice,
    states: Sequence[RobotState],
    task_done: bool,
    th: ReplayThresholds = ReplayThresholds(),
) -> ReplayDecision:
    """Decide whether the executed slice signals a hang.

    ``states`` holds the robot state before the first step followed by the
    state after each executed step.
    """
    if task_done:
        return ReplayDecision(False)
    if executed.all_complete:
        return ReplayDecision(True, ALL_COMPLETE)
    if len(states) >= 2 and _sub_threshold(states, th):
        return ReplayDecision(True, SUB_THRESHOLD)
    return ReplayDecision(False)


def select_context(
    pool: ContextPool, instruction: str, sig: ObservationSignature, attempt_index: int
) -> Optional[int]:
    """The ``attempt_index``-th best success context for ``instruction``."""
    if attempt_index < 0:
        return None
    hits = pool.ranked(instruction, sig, success_only=True, threshold=0.0)
    return hits[attempt_index].ctx_id if attempt_index < len(hits) else None


def augment_prompt(instruction: str, remaining: str) -> str:
    return f"{instruction} remaining: {remaining}"


def regenerate(
    policy: Policy,
    pool: ContextPool,
    ctx_id: Optional[int],
    obs: Observation,
    remaining: str,
    *,
    request_id: str = "",
    reusable_blobs=None,
) -> tuple[PolicyResponse, float]:
    """Re-infer with the context's latent as the diffusion seed.

    Returns the policy response and the fetch charge (ms) for the latent.
    Without a context or latent the policy runs from random init and only
    the prompt is augmented.
    """
    seed, charge = None, 0.0
    if ctx_id is not None:
        ctx = pool.contexts[ctx_id]
        bid = pool.blob_of_kind(ctx_id, BlobKind.DIFFUSION_LATENT)
        if bid is not None:
            res = pool.fetch(bid)
            seed, charge = res.payload, res.charge_ms
        prompt = augment_prompt(ctx.instruction, remaining)
    else:
        prompt = augment_prompt(obs.instruction, remaining)
    req = PolicyRequest(obs, prompt, seed, reusable_blobs, request_id)
    return policy.infer(req), charge


@dataclass(frozen=True)
class ExhaustionVerdict:
    terminate: bool
    success: bool
    reason: str = ""


def declare_exhausted(
    history: Sequence[ReplayDecision],
    task_done: bool,
    max_attempts: int,
) -> ExhaustionVerdict:
    """Stop on success, once attempts run past ``max_attempts``, or when two
    consecutive replays left the scene unchanged."""
    if task_done:
        return ExhaustionVerdict(True, True, "task-done")
    fired = [d for d in history if d.fired]
    if fired and fired[-1].attempt_index > max_attempts:
        return ExhaustionVerdict(True, False, "attempts-exhausted")
    if len(fired) >= 3 and len({d.scene_digest for d in fired[-3:]}) == 1:
        return ExhaustionVerdict(True, False, "no-progress")
    return ExhaustionVerdict(False, False)


def scene_digest(obs: Observation) -> str:
    """Digest of object poses at the observation quantum plus progress."""
    parts = ",".join(d for _, d in obs.sig.objects)
    return f"{obs.placed_count}:{parts}"


def moved_mm(a: RobotState, b: RobotState) -> tuple[float, float]:
    return math.dist(a.ee_pose, b.ee_pose) * 1000.0, abs(a.gripper_gap - b.gripper_gap)
