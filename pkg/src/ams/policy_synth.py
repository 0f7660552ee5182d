"""Policy interface and a deterministic synthetic stand-in for a VLA model.

The synthetic policy is a waypoint planner driven by the observation.  It
reproduces one failure mode on purpose: it was "trained" on scenes with at
most ``repetition_limit`` placements, so after that many it declares the
task done and idles.  A seed latent carried over from an earlier successful
inference authorizes it to keep going, and when that latent describes the
current phase of the task it also takes the lower, shorter route.
"""
from __future__ import annotations

import hashlib
import json
import math
import random
import struct
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Protocol

from .context_pool import BlobKind, CacheableBlob, new_blob
from .core import (
    DEFAULT_HORIZON,
    DEFAULT_MAX_STEP_DELTA,
    DOF,
    ActionSlice,
    ActionStep,
    Observation,
    ObjectState,
)
from .errors import ConfigError, PolicyError
from .robot_sim import OBJECT_WIDTH_MM, ArmModel

LATENT_MAGIC = b"AMSLAT1"
_POSE_QUANTUM = 0.01
_AT = 1e-4  # metres; waypoint reached
_NEAR = 0.03  # metres; inside this xy radius, go straight to the waypoint


@dataclass(frozen=True)
class PolicyRequest:
    observation: Observation
    prompt: str
    seed_latent: Optional[bytes] = None
    reusable_blobs: Optional[Mapping[BlobKind, int]] = None
    request_id: str = ""


@dataclass(frozen=True)
class PolicyResponse:
    slice: ActionSlice
    produced_blobs: tuple[CacheableBlob, ...]
    declared_done: bool
    reused_kinds: tuple[BlobKind, ...] = ()
    guided: bool = False

    def __post_init__(self) -> None:
        if self.declared_done != self.slice.all_complete:
            raise PolicyError("declared_done disagrees with the step completion flags")


class Policy(Protocol):
    def infer(self, req: PolicyRequest) -> PolicyResponse: ...


@dataclass(frozen=True)
class SyntheticPolicyConfig:
    repetition_limit: int = 1
    horizon: int = DEFAULT_HORIZON
    max_step_delta: float = DEFAULT_MAX_STEP_DELTA
    fresh_cruise: float = 0.25
    guided_cruise: float = 0.12
    release_height: float = 0.10
    # False: idle slices jitter in place with flags cleared instead of
    # declaring completion, which only the motion threshold can catch
    idle_flags: bool = True
    idle_jitter: float = 3e-4
    jitter_seed: int = 0
    arm: ArmModel = field(default_factory=ArmModel)

    def __post_init__(self) -> None:
        if self.repetition_limit < 1:
            raise ConfigError("repetition_limit must be >= 1")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")


# ------------------------------------------------------------------ latent
def encode_latent(phase: dict) -> bytes:
    body = json.dumps(phase, sort_keys=True, separators=(",", ":")).encode()
    return LATENT_MAGIC + struct.pack("<I", len(body)) + body


def decode_latent(payload: bytes) -> dict:
    if not payload.startswith(LATENT_MAGIC):
        raise PolicyError("seed latent has no phase header")
    start = len(LATENT_MAGIC) + 4
    (n,) = struct.unpack_from("<I", payload, len(LATENT_MAGIC))
    try:
        return json.loads(payload[start:start + n])
    except ValueError as e:
        raise PolicyError(f"corrupt seed latent: {e}") from e


def _q(pose) -> list[int]:
    return [math.floor(p / _POSE_QUANTUM + 0.5) for p in pose]


def _seed(*parts: str) -> int:
    h = hashlib.blake2b("|".join(parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


# ------------------------------------------------------------------ policy
class SyntheticPolicy:
    def __init__(self, cfg: SyntheticPolicyConfig = SyntheticPolicyConfig()) -> None:
        self.cfg = cfg
        self.calls = 0

    def infer(self, req: PolicyRequest) -> PolicyResponse:
        self.calls += 1
        obs = req.observation
        self._validate(obs)
        latent = decode_latent(req.seed_latent) if req.seed_latent else None
        target = self.target(obs)
        phase = self.phase(obs, target)
        authorized = obs.placed_count < self.cfg.repetition_limit or latent is not None
        guided = False
        if target is None or not authorized:
            steps, sketch = self._idle(obs, req.prompt), []
            phase["phase"] = "idle"
        else:
            guided = latent is not None and all(latent.get(k) == phase[k] for k in _PHASE_KEYS)
            cruise = self.cfg.guided_cruise if guided else self.cfg.fresh_cruise
            steps, sketch = self._plan(obs, target, cruise)
        phase["sketch"] = sketch
        latent_tag = hashlib.blake2b(req.seed_latent or b"", digest_size=8).hexdigest()
        sid = req.request_id or f"s{_seed(obs.sig.digest, req.prompt, latent_tag):016x}"
        sl = ActionSlice(sid, tuple(steps), req.prompt, obs.sig)
        blobs, reused = self._blobs(obs, req, phase)
        return PolicyResponse(sl, blobs, sl.all_complete, reused, guided)

    # ------------------------------------------------------------ helpers
    @staticmethod
    def _validate(obs: Observation) -> None:
        if len(obs.robot.joints) != DOF:
            raise PolicyError(f"expected {DOF} joints, got {len(obs.robot.joints)}")
        if not any(o.kind == "bowl" for o in obs.objects):
            raise PolicyError("observation has no goal bowl")
        if not all(math.isfinite(v) for v in obs.robot.joints):
            raise PolicyError("non-finite joint reading")

    @staticmethod
    def goal(obs: Observation) -> ObjectState:
        return next(o for o in obs.objects if o.kind == "bowl")

    def target(self, obs: Observation) -> Optional[ObjectState]:
        """The held object, else the unplaced object nearest the base."""
        if obs.robot.holding is not None:
            return obs.object(obs.robot.holding)
        todo = [o for o in obs.objects if o.kind != "bowl" and not o.placed]
        if not todo:
            return None
        return min(todo, key=lambda o: (math.hypot(o.pose[0], o.pose[1]), o.object_id))

    def phase(self, obs: Observation, target: Optional[ObjectState]) -> dict:
        held = target is not None and target.object_id == obs.robot.holding
        return {
            "placements": obs.placed_count,
            "target": None if target is None else target.object_id,
            "target_q": "held" if held else (None if target is None else _q(target.pose)),
            "goal_q": _q(self.goal(obs).pose),
            "phase": "carry" if held else "approach",
        }

    def _idle(self, obs: Observation, prompt: str) -> list[ActionStep]:
        h = self.cfg.horizon
        if self.cfg.idle_flags:
            return [ActionStep(i, (0.0,) * DOF, None, True) for i in range(h)]
        rng = random.Random(_seed("jitter", str(self.cfg.jitter_seed), obs.sig.digest, prompt))
        a = rng.uniform(0.5, 1.5) * self.cfg.idle_jitter
        j = rng.randrange(DOF)
        steps = []
        for i in range(h):
            d = [0.0] * DOF
            d[j] = a if i % 2 == 0 else -a
            steps.append(ActionStep(i, tuple(d), None, False))
        return steps

    def _next(self, ee, gap: float, holding: bool, target: ObjectState, goal: ObjectState, cruise: float):
        """Next waypoint: ("arm", xyz) or ("grip", cmd, n_steps)."""
        speed = self.cfg.arm.gripper_speed_mm
        gap_max = self.cfg.arm.limits.gap_max
        if holding:
            dest = (goal.pose[0], goal.pose[1], self.cfg.release_height)
        else:
            dest = target.pose
        dxy = math.hypot(ee[0] - dest[0], ee[1] - dest[1])
        far = dxy > _NEAR
        if holding:
            if far:
                if ee[2] < cruise - _AT:
                    return ("arm", (ee[0], ee[1], cruise))
                return ("arm", (dest[0], dest[1], cruise))
            if dxy > _AT or abs(ee[2] - dest[2]) > _AT:
                return ("arm", dest)
            return ("grip", gap_max, math.ceil((gap_max - gap) / speed))
        at_object = dxy <= _AT and abs(ee[2] - dest[2]) <= _AT
        width = OBJECT_WIDTH_MM[target.kind]
        if at_object and gap > width:
            return ("grip", 0.0, math.ceil((gap - width) / speed))
        if gap < gap_max - 1e-9:
            return ("grip", gap_max, math.ceil((gap_max - gap) / speed))
        if far:
            if ee[2] < cruise - _AT:
                return ("arm", (ee[0], ee[1], cruise))
            return ("arm", (dest[0], dest[1], cruise))
        return ("arm", dest)

    def _plan(self, obs: Observation, target: ObjectState, cruise: float):
        cfg, arm = self.cfg, self.cfg.arm
        goal = self.goal(obs)
        q = list(obs.robot.joints)
        gap = obs.robot.gripper_gap
        holding = obs.robot.holding == target.object_id
        steps: list[ActionStep] = []
        sketch: list[list[float]] = []
        mode = None
        while len(steps) < cfg.horizon:
            ee = arm.fk(q)
            act = self._next(ee, gap, holding, target, goal, cruise)
            if mode is not None and act[0] != mode:
                break
            mode = act[0]
            room = cfg.horizon - len(steps)
            if act[0] == "grip":
                _, cmd, n = act
                for _ in range(min(n, room)):
                    steps.append(ActionStep(len(steps), (0.0,) * DOF, cmd, False))
                break
            try:
                qt = arm.ik(*act[1])
            except ValueError as e:
                raise PolicyError(f"waypoint unreachable: {e}") from e
            sketch.append([round(v, 4) for v in act[1]])
            delta = [qt[j] - q[j] for j in range(DOF)]
            n = max(1, math.ceil(max(abs(d) for d in delta) / cfg.max_step_delta))
            step = tuple(d / n for d in delta)
            for _ in range(min(n, room)):
                steps.append(ActionStep(len(steps), step, None, False))
                q = [q[j] + step[j] for j in range(DOF)]
            if n > room:
                break
            q = list(qt)
        return steps, sketch

    def _blobs(self, obs: Observation, req: PolicyRequest, phase: dict):
        base = (obs.sig.digest, req.prompt, str(self.cfg.jitter_seed))
        reusable = req.reusable_blobs or {}
        blobs, reused = [], []
        for kind in (BlobKind.VISION_KV, BlobKind.LLM_KV):
            if kind in reusable:
                reused.append(kind)
            else:
                blobs.append(new_blob(kind, _seed(*base, kind.value)))
        blobs.append(new_blob(BlobKind.DIFFUSION_LATENT, _seed(*base, "latent"), encode_latent(phase)))
        blobs.append(new_blob(BlobKind.OUTPUT_EMBEDDING, _seed(*base, "out")))
        return tuple(blobs), tuple(reused)


_PHASE_KEYS = ("placements", "target", "target_q", "goal_q")


def infer(cfg: SyntheticPolicyConfig, req: PolicyRequest) -> PolicyResponse:
    return SyntheticPolicy(cfg).infer(req)


# ---------------------------------------------------------------- registry
PolicyFactory = Callable[..., Policy]
_REGISTRY: dict[str, PolicyFactory] = {}


def register_policy(name: str, factory: PolicyFactory) -> None:
    if name in _REGISTRY:
        raise ConfigError(f"policy {name!r} already registered")
    _REGISTRY[name] = factory


def get_policy(name: str, *args, **kwargs) -> Policy:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise ConfigError(f"unknown policy {name!r}") from None
    return factory(*args, **kwargs)


def registered_policies() -> list[str]:
    return sorted(_REGISTRY)


register_policy("synthetic", SyntheticPolicy)
