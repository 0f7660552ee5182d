"""Episode runner, scenario files, suite aggregation and trace replay.

One episode runs a scenario for one or more executions (scene reset between
them, context pool shared).  Each execution loops: observe, consult the
pool, infer, execute the slice in checked sub-slices, handle exceptions,
and fire replays, until the task is done, the step budget runs out, or
replay gives up.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from statistics import fmean
from typing import Any, Iterable, Optional

from .action_index import deserialize_step, serialize_step
from .context_pool import ActionContext, BlobKind, ContextPool, PoolConfig
from .core import DOF, ActionSlice, ActionStep, ExceptionKind, Limits, SubSlice
from .errors import ConfigError, EmptyBuffer, HandlerFailure
from .exception_engine import (
    RollbackBuffer,
    check_hardware,
    check_software,
    condition_from_dict,
    handle,
    segment,
)
from .policy_synth import PolicyRequest, PolicyResponse, SyntheticPolicyConfig, get_policy
from .replay_engine import (
    ReplayDecision,
    ReplayThresholds,
    declare_exhausted,
    moved_mm,
    regenerate,
    scene_digest,
    select_context,
    should_replay,
)
from .robot_sim import (
    FaultConfig,
    Scene,
    SimClock,
    Simulator,
    advance_clock,
    generate_layout,
    scene_from_dict,
    scene_to_dict,
)

log = logging.getLogger("ams")

DEFAULT_BUDGET = 1500
_REUSE_KINDS = (BlobKind.VISION_KV, BlobKind.LLM_KV)


# ---------------------------------------------------------------- scenario
@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    scene: Scene
    executions: int = 1
    step_budget: int = DEFAULT_BUDGET
    policy: str = "synthetic"
    policy_cfg: SyntheticPolicyConfig = SyntheticPolicyConfig()
    thresholds: ReplayThresholds = ReplayThresholds()
    conditions: tuple[dict, ...] = ()
    hardware_aps_cap: Optional[float] = None
    pool: PoolConfig = PoolConfig()

    def __post_init__(self) -> None:
        if self.executions < 1:
            raise ConfigError("executions must be >= 1")
        if self.step_budget < 1:
            raise ConfigError("step_budget must be >= 1")


_POLICY_KEYS = ("repetition_limit", "horizon", "fresh_cruise", "guided_cruise", "release_height",
                "idle_flags", "idle_jitter", "jitter_seed")


def scenario_from_dict(d: dict, seed: Optional[int] = None) -> Scenario:
    """Build a scenario; ``seed`` (if given) reseeds the layout and faults."""
    try:
        if "scene" in d:
            scene = scene_from_dict(d["scene"])
        elif "layout" in d:
            lay = d["layout"]
            lseed = int(lay.get("seed", 0)) if seed is None else seed
            objects = generate_layout(int(lay["n_objects"]), lseed, lay.get("kind", "cube"))
            scene = scene_from_dict({
                "objects": [{"id": o.object_id, "kind": o.kind, "pose": list(o.pose)} for o in objects],
                "task": d.get("task", Scene.task),
                "faults": d.get("faults", {}),
            })
        else:
            raise ConfigError("scenario needs a 'scene' or a 'layout'")
        if seed is not None:
            scene = replace(scene, faults=replace(scene.faults, seed=seed))
        pol = d.get("policy", {})
        unknown = set(pol) - set(_POLICY_KEYS) - {"name"}
        if unknown:
            raise ConfigError(f"unknown policy keys {sorted(unknown)}")
        policy_cfg = SyntheticPolicyConfig(**{k: pol[k] for k in _POLICY_KEYS if k in pol})
        rep = d.get("replay", {})
        thresholds = ReplayThresholds(float(rep.get("arm_eps", 1e-5)), float(rep.get("gripper_eps", 1.0)))
        cap = d.get("clock", {}).get("hardware_aps_cap")
        cap = math.inf if cap in ("inf", "infinity") else (None if cap is None else float(cap))
        pool_d = d.get("pool", {})
        pool = PoolConfig(**pool_d)
        conditions = tuple(d.get("conditions", ()))
        for c in conditions:
            condition_from_dict(c)
        return Scenario(
            scenario_id=str(d.get("id", "scenario")),
            scene=scene,
            executions=int(d.get("executions", 1)),
            step_budget=int(d.get("step_budget", DEFAULT_BUDGET)),
            policy=pol.get("name", "synthetic"),
            policy_cfg=policy_cfg,
            thresholds=thresholds,
            conditions=conditions,
            hardware_aps_cap=cap,
            pool=pool,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"malformed scenario: {e}") from e


def scenario_to_dict(sc: Scenario) -> dict:
    pol = {k: getattr(sc.policy_cfg, k) for k in _POLICY_KEYS}
    pol["name"] = sc.policy
    cap = sc.hardware_aps_cap
    return {
        "id": sc.scenario_id,
        "scene": scene_to_dict(sc.scene),
        "executions": sc.executions,
        "step_budget": sc.step_budget,
        "policy": pol,
        "replay": {"arm_eps": sc.thresholds.arm_eps, "gripper_eps": sc.thresholds.gripper_eps},
        "conditions": list(sc.conditions),
        "clock": {"hardware_aps_cap": "inf" if cap is not None and math.isinf(cap) else cap},
        "pool": {k: v for k, v in asdict(sc.pool).items() if not (isinstance(v, float) and math.isinf(v))},
    }


def load_scenario(path: str | Path, seed: Optional[int] = None) -> Scenario:
    return scenario_from_dict(json.loads(Path(path).read_text()), seed)


# -------------------------------------------------------------------- modes
@dataclass(frozen=True)
class ModeConfig:
    name: str
    use_pool: bool
    use_exceptions: bool
    use_replay: bool
    reuse_blobs: bool = True

    @property
    def stop_on_done(self) -> bool:
        # without the replay monitor nothing can overrule a declared finish
        return not self.use_replay


MODES = {
    "baseline": ModeConfig("baseline", False, False, False),
    "context": ModeConfig("context", True, False, False),
    "exception": ModeConfig("exception", True, True, False),
    "ams": ModeConfig("ams", True, True, True),
}
MODES["full"] = replace(MODES["ams"], name="full")


def get_mode(name: str | ModeConfig) -> ModeConfig:
    if isinstance(name, ModeConfig):
        return name
    try:
        return MODES[name]
    except KeyError:
        raise ConfigError(f"unknown mode {name!r}; choose from {sorted(MODES)}") from None


# ------------------------------------------------------------------- report
@dataclass
class EpisodeReport:
    scenario_id: str
    mode: str
    seed: Optional[int]
    success: bool = False
    total_steps: int = 0
    steps_per_execution: list[int] = field(default_factory=list)
    success_per_execution: list[bool] = field(default_factory=list)
    duration_ms: float = 0.0
    inference_ms: float = 0.0
    actuation_ms: float = 0.0
    inferences: int = 0
    model_aps: float = 0.0
    end_to_end_aps: float = 0.0
    exceptions: dict[int, int] = field(default_factory=lambda: {k.value: 0 for k in ExceptionKind})
    replays: dict[str, int] = field(default_factory=lambda: {"total": 0, "fp": 0, "fn": 0})
    restarts: int = 0
    handler_failure: bool = False
    end_reason: str = ""
    pool: dict = field(default_factory=dict)
    counters: dict[str, int] = field(default_factory=lambda: {"pool": 0, "exception": 0, "replay": 0})
    leaked_action_bytes: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class TraceWriter:
    def __init__(self) -> None:
        self.records: list[dict] = []

    def emit(self, kind: str, **fields: Any) -> None:
        self.records.append({"type": kind, **fields})

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())


# ------------------------------------------------------------------ runner
class EpisodeRunner:
    """Owns one simulator, pool, clock and rollback buffer.

    Also serves as the executor handle the exception handlers drive.
    """

    def __init__(self, scenario: Scenario, mode: str | ModeConfig, seed: Optional[int] = None,
                 trace: Optional[TraceWriter] = None) -> None:
        self.sc = scenario
        self.mode = get_mode(mode)
        self.sim = Simulator(scenario.scene)
        self.limits: Limits = self.sim.arm.limits
        self.policy = get_policy(scenario.policy, scenario.policy_cfg)
        self.pool = ContextPool(scenario.pool)
        self.clock = SimClock(base_infer_ms=scenario.pool.base_infer_ms,
                              horizon=scenario.policy_cfg.horizon,
                              hardware_aps_cap=scenario.hardware_aps_cap)
        self.buffer = RollbackBuffer(max_step_delta=self.limits.max_step_delta,
                                     gripper_step_mm=self.sim.arm.gripper_speed_mm)
        self.conditions = [condition_from_dict(c) for c in scenario.conditions]
        self.trace = trace
        self.report = EpisodeReport(scenario.scenario_id, self.mode.name, seed)
        self.tick = 0
        self.exec_steps = 0
        self._pending_cancel = 0
        self._slice_seq = 0
        if trace is not None:
            trace.emit("header", scenario=scenario_to_dict(scenario), mode=self.mode.name, seed=seed,
                       config={"budget": scenario.step_budget, "executions": scenario.executions})

    # ------------------------------------------------------ executor handle
    def cancel_pending(self) -> int:
        n, self._pending_cancel = self._pending_cancel, 0
        return n

    def rollback(self) -> Optional[ExceptionKind]:
        if self.buffer.empty:
            return None
        net = self.buffer.net()
        try:
            traj = self.buffer.consolidate(self.sim.state.gripper_gap)
        except EmptyBuffer:
            return None
        self.buffer.push_net(net)
        for step in traj.steps:
            state = self._apply(step)
            hw = check_hardware(state, self.limits)
            if hw is not None:
                return hw
        self.buffer.clear()
        return None

    def restart(self) -> None:
        self.sim.restart()
        self.report.restarts += 1
        self._emit("restart", tick=self.tick)

    def refresh_observation(self) -> None:
        self.obs = self.sim.observe()

    def request_reinference(self) -> None:
        self.reinfer = True

    # ------------------------------------------------------------- helpers
    def _emit(self, kind: str, **fields: Any) -> None:
        if self.trace is not None:
            self.trace.emit(kind, **fields)

    def _apply(self, step: ActionStep):
        before = self.sim.state
        state, events = self.sim.apply(step)
        self.tick += 1
        self.exec_steps += 1
        actual = tuple(state.joints[j] - before.joints[j] for j in range(DOF))
        self.buffer.record(ActionStep(step.step_index, actual), state.gripper_gap - before.gripper_gap)
        self._emit("apply", tick=self.tick, step=serialize_step(step).hex(), digest=self.sim.digest(),
                   events=events)
        return state

    def _infer(self, obs, seed_latent, reusable, savings_ms, request_id, prompt=None) -> PolicyResponse:
        req = PolicyRequest(obs, prompt or obs.instruction, seed_latent, reusable, request_id)
        resp = self.policy.infer(req)
        self._charge_inference(savings_ms)
        return resp

    def _charge_inference(self, savings_ms: float) -> None:
        advance_clock(self.clock, "inference", savings_ms=savings_ms)
        self.report.inferences += 1

    def _latent(self, ctx_id: int) -> tuple[Optional[bytes], float]:
        bid = self.pool.blob_of_kind(ctx_id, BlobKind.DIFFUSION_LATENT)
        if bid is None:
            return None, 0.0
        res = self.pool.fetch(bid)
        return res.payload, res.charge_ms

    # ---------------------------------------------------------- execution
    def _run_slice(self, sl: ActionSlice, budget_left: int):
        """Execute ``sl`` with checks.  Returns (states, exception, executed)."""
        use_exc = self.mode.use_exceptions
        if use_exc:
            self.report.counters["exception"] += 1
            subs = segment(sl)
        else:
            subs = [SubSlice(sl.slice_id, 0, len(sl.steps))]
        self.buffer.clear()
        states = [self.sim.state]
        pending = None
        executed = 0
        for k, sub in enumerate(subs):
            pre = self.sim.state
            for i in range(sub.start, sub.end):
                if executed >= budget_left:
                    return states, None, executed
                state = self._apply(sl.steps[i])
                executed += 1
                states.append(state)
                if use_exc:
                    hw = check_hardware(state, self.limits)
                    if hw is not None:
                        self._pending_cancel = len(subs) - k - 1
                        self._emit("exception", tick=self.tick, code=int(hw), subslice=k)
                        return states, hw, executed
            if not use_exc:
                continue
            if pending is not None:
                verdict = check_software(*pending, conditions=self.conditions)
                if verdict is not None:
                    self._pending_cancel = len(subs) - k - 1
                    self._emit("exception", tick=self.tick, code=int(verdict), subslice=k - 1)
                    return states, verdict, executed
            pending = (sl.steps[sub.start:sub.end], pre, self.sim.state)
        if use_exc and pending is not None:
            verdict = check_software(*pending, conditions=self.conditions)
            if verdict is not None:
                self._emit("exception", tick=self.tick, code=int(verdict), subslice=len(subs) - 1)
                return states, verdict, executed
        return states, None, executed

    def run(self) -> EpisodeReport:
        rep = self.report
        try:
            for execution in range(self.sc.executions):
                ok = self._run_execution(execution)
                rep.success_per_execution.append(ok)
                if rep.handler_failure:
                    break
        finally:
            rep.success = len(rep.success_per_execution) == self.sc.executions and all(rep.success_per_execution)
            rep.total_steps = sum(rep.steps_per_execution)
            rep.inference_ms = self.clock.inference_ms
            rep.actuation_ms = self.clock.actuation_ms
            rep.duration_ms = self.clock.now_ms
            rep.model_aps = rep.total_steps / (rep.inference_ms / 1000.0) if rep.inference_ms else 0.0
            rep.end_to_end_aps = rep.total_steps / (rep.duration_ms / 1000.0) if rep.duration_ms else 0.0
            rep.pool = self.pool.stats()
            self.pool.check_invariants()
            self.pool.teardown()
            rep.leaked_action_bytes = self.pool.store.total_bytes
        return rep

    def _run_execution(self, execution: int) -> bool:
        sim, pool, mode, rep = self.sim, self.pool, self.mode, self.report
        sim.reset(execution)
        self._emit("reset_scene", tick=self.tick, execution=execution)
        self.exec_steps = 0
        budget = self.sc.step_budget
        instr = self.sc.scene.task
        history: list[ReplayDecision] = []
        attempts = 0
        attempts_since_progress = 0
        guidance_ctx: Optional[int] = None
        open_ctxs: list[int] = []  # contexts eligible for success marking
        queued: Optional[tuple[PolicyResponse, Any]] = None
        end = "budget"
        try:
            while self.exec_steps < budget:
                if sim.task_done:
                    end = "task-done"
                    break
                self.reinfer = False
                if queued is not None:
                    resp, obs = queued
                    queued = None
                    reusable = {}
                else:
                    obs = sim.observe()
                    resp, reusable = self._context_infer(obs, instr, guidance_ctx, execution)
                sl = resp.slice
                if mode.stop_on_done and resp.declared_done:
                    end = "declared-done"
                    break
                ctx_id = None
                if mode.use_pool:
                    ctx_id = self._admit(sl, obs, resp, reusable, execution)
                    open_ctxs.append(ctx_id)
                placed_before = sim.placed_count
                states, exc, executed = self._run_slice(sl, budget - self.exec_steps)
                advance_clock(self.clock, "actuation", steps=executed)
                if exc is not None:
                    rep.exceptions[int(exc)] += 1
                    if ctx_id is not None:
                        open_ctxs.remove(ctx_id)
                    self._handle(exc)
                    if self.exec_steps > budget:
                        break
                progressed = sim.placed_count > placed_before
                if progressed:
                    for cid in open_ctxs:
                        pool.contexts[cid].success = True
                    open_ctxs.clear()
                    guidance_ctx = None
                    attempts_since_progress = 0
                if exc is not None or not mode.use_replay:
                    continue
                rep.counters["replay"] += 1
                dec = should_replay(sl, states, sim.task_done, self.sc.thresholds)
                if not dec.fired:
                    ee_mm, grip_mm = moved_mm(states[0], states[-1])
                    if not progressed and not sim.task_done and ee_mm < 1.0 and grip_mm < 1.0:
                        rep.replays["fn"] += 1
                    continue
                if ctx_id is not None and ctx_id in open_ctxs:
                    open_ctxs.remove(ctx_id)
                attempts += 1
                rep.replays["total"] += 1
                if progressed:
                    rep.replays["fp"] += 1
                obs = sim.observe()
                chosen = select_context(pool, instr, obs.sig, attempts_since_progress)
                attempts_since_progress += 1
                dec = replace(dec, chosen_ctx=chosen, attempt_index=attempts, scene_digest=scene_digest(obs))
                history.append(dec)
                self._emit("replay", tick=self.tick, reason=dec.reason, ctx_id=chosen, attempt_index=attempts)
                verdict = declare_exhausted(history, sim.task_done, len(pool.contexts) + 1)
                if verdict.terminate:
                    end = verdict.reason
                    break
                remaining = self._remaining(obs)
                resp, charge = regenerate(self.policy, pool, chosen, obs, remaining,
                                          request_id=self._next_id(execution))
                self._charge_inference(-charge)
                if chosen is not None:
                    guidance_ctx = chosen
                queued = (resp, obs)
        except HandlerFailure as e:
            log.info("handler failure: %s", e)
            rep.handler_failure = True
            end = "handler-failure"
        if sim.task_done:
            end = "task-done"
        rep.steps_per_execution.append(self.exec_steps)
        rep.end_reason = end
        self._emit("execution_end", tick=self.tick, execution=execution, success=sim.task_done, reason=end)
        return sim.task_done

    def _next_id(self, execution: int) -> str:
        self._slice_seq += 1
        return f"e{execution}-s{self._slice_seq}"

    @staticmethod
    def _remaining(obs) -> str:
        todo = sorted(o.object_id for o in obs.objects if o.kind != "bowl" and not o.placed)
        return ", ".join(todo) if todo else "nothing"

    def _context_infer(self, obs, instr: str, guidance_ctx: Optional[int], execution: int):
        """Inference with whatever the pool can contribute."""
        rid = self._next_id(execution)
        if not self.mode.use_pool:
            return self._infer(obs, None, None, 0.0, rid), {}
        pool = self.pool
        self.report.counters["pool"] += 1
        reusable: dict[BlobKind, int] = {}
        savings = 0.0
        hit = pool.lookup(instr, obs.sig)
        if hit is not None and self.mode.reuse_blobs:
            for kind in _REUSE_KINDS:
                bid = pool.blob_of_kind(hit.ctx_id, kind)
                if bid is None:
                    continue
                res = pool.fetch(bid)
                savings += pool.cfg.share(kind) * pool.cfg.base_infer_ms - res.charge_ms
                reusable[kind] = bid
        seed = None
        guide = pool.lookup(instr, obs.sig, success_only=True, scene_match=True)
        if guide is not None:
            seed, charge = self._latent(guide.ctx_id)
            savings -= charge
        elif guidance_ctx is not None and guidance_ctx in pool.contexts:
            seed, charge = self._latent(guidance_ctx)
            savings -= charge
        return self._infer(obs, seed, reusable or None, savings, rid), reusable

    def _admit(self, sl: ActionSlice, obs, resp: PolicyResponse, reusable: dict, execution: int) -> int:
        vids = self.pool.intern_slice(sl)
        ctx = ActionContext(obs.instruction, obs.sig, vids, blob_ids=sorted(reusable.values()),
                            episode_id=execution, meta={"slice_id": sl.slice_id, "guided": resp.guided})
        before = len(self.pool.eviction_log)
        cid = self.pool.admit(ctx, resp.produced_blobs)
        for bid, action in self.pool.eviction_log[before:]:
            self._emit("eviction", tick=self.tick, blob_id=bid, action=action)
        self._emit("inference", tick=self.tick, slice_id=sl.slice_id, ctx_id=cid, steps=len(sl.steps),
                   guided=resp.guided, declared_done=resp.declared_done)
        return cid

    def _handle(self, exc: ExceptionKind) -> None:
        outcome = handle(exc, self)
        self._emit("handler", tick=self.tick, code=int(exc), cancelled=outcome.cancelled_subslices,
                   reset=outcome.reset_performed, restarted=outcome.restarted)


def run_episode(scenario: Scenario, mode: str | ModeConfig = "ams", seed: Optional[int] = None,
                trace: Optional[TraceWriter] = None) -> EpisodeReport:
    return EpisodeRunner(scenario, mode, seed, trace).run()


# -------------------------------------------------------------- trace replay
@dataclass(frozen=True)
class ReplayVerdict:
    match: bool
    ticks: int
    divergence_tick: Optional[int] = None
    detail: str = ""


def replay_trace(source: Iterable[str] | str | Path) -> ReplayVerdict:
    """Re-apply a recorded trace to a fresh simulator, comparing the state
    digest after every step.  ``source`` is a path, trace text, or lines."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and Path(source).is_file()):
        lines = Path(source).read_bytes().decode("utf-8", errors="replace").splitlines()
    elif isinstance(source, str):
        lines = source.splitlines()
    else:
        lines = list(source)
    sim: Optional[Simulator] = None
    ticks = 0
    for n, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            kind = rec["type"]
            if kind == "header":
                sim = Simulator(scenario_from_dict(rec["scenario"]).scene)
            elif sim is None:
                return ReplayVerdict(False, ticks, ticks + 1, f"line {n + 1}: record before header")
            elif kind == "reset_scene":
                sim.reset(int(rec["execution"]))
            elif kind == "restart":
                sim.restart()
            elif kind == "apply":
                step = deserialize_step(bytes.fromhex(rec["step"]))
                sim.apply(step)
                ticks += 1
                if sim.digest() != rec["digest"] or ticks != rec["tick"]:
                    return ReplayVerdict(False, ticks, rec.get("tick", ticks), "state digest mismatch")
        except (ValueError, KeyError, TypeError, ConfigError) as e:
            return ReplayVerdict(False, ticks, ticks + 1, f"line {n + 1}: {e}")
    if sim is None:
        return ReplayVerdict(False, 0, 0, "no header")
    return ReplayVerdict(True, ticks)


# -------------------------------------------------------------------- suite
EPISODE_COLUMNS = [
    "scenario", "variant", "mode", "seed", "success", "total_steps", "steps_exec1", "steps_exec2",
    "duration_ms", "inference_ms", "model_aps", "e2e_aps",
    *(f"exc_{k.value}" for k in ExceptionKind),
    "replays", "replay_fp", "replay_fn", "restarts", "handler_failure", "end_reason",
]
SUMMARY_COLUMNS = [
    "scenario", "variant", "mode", "episodes", "successes", "success_rate", "mean_steps",
    "mean_steps_exec1", "mean_steps_exec2", "mean_model_aps", "mean_e2e_aps",
    "replays", "replay_fp", "replay_fn",
]


def _fmt(x: Any) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return f"{x:.6f}"
    return "" if x is None else str(x)


def _episode_row(variant: str, r: EpisodeReport) -> dict:
    spe = r.steps_per_execution + [None, None]
    row = {
        "scenario": r.scenario_id, "variant": variant, "mode": r.mode, "seed": r.seed,
        "success": r.success, "total_steps": r.total_steps, "steps_exec1": spe[0], "steps_exec2": spe[1],
        "duration_ms": r.duration_ms, "inference_ms": r.inference_ms,
        "model_aps": r.model_aps, "e2e_aps": r.end_to_end_aps,
        "replays": r.replays["total"], "replay_fp": r.replays["fp"], "replay_fn": r.replays["fn"],
        "restarts": r.restarts, "handler_failure": r.handler_failure, "end_reason": r.end_reason,
    }
    for k in ExceptionKind:
        row[f"exc_{k.value}"] = r.exceptions[k.value]
    return row


def _run_job(job: tuple[dict, str, str, int]) -> dict:
    scenario_d, variant, mode, seed = job
    report = run_episode(scenario_from_dict(scenario_d, seed), mode, seed)
    return _episode_row(variant, report)


def _mean(vals: list) -> Optional[float]:
    vals = [v for v in vals if v is not None]
    return fmean(vals) if vals else None


def summarize(rows: list[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["scenario"], r["variant"], r["mode"]), []).append(r)
    out = []
    for (scen, variant, mode), rs in sorted(groups.items()):
        succ = sum(1 for r in rs if r["success"])
        out.append({
            "scenario": scen, "variant": variant, "mode": mode, "episodes": len(rs),
            "successes": succ, "success_rate": succ / len(rs),
            "mean_steps": _mean([float(r["total_steps"]) for r in rs]),
            "mean_steps_exec1": _mean([r["steps_exec1"] for r in rs]),
            "mean_steps_exec2": _mean([r["steps_exec2"] for r in rs]),
            "mean_model_aps": _mean([r["model_aps"] for r in rs]),
            "mean_e2e_aps": _mean([r["e2e_aps"] for r in rs]),
            "replays": sum(r["replays"] for r in rs),
            "replay_fp": sum(r["replay_fp"] for r in rs),
            "replay_fn": sum(r["replay_fn"] for r in rs),
        })
    return out


def _csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: _fmt(r.get(c)) for c in columns})
    return buf.getvalue()


def _suite_jobs(config: dict, base_dir: Path) -> list[tuple[dict, str, str, int]]:
    scenarios = []
    for s in config.get("scenarios", ()):
        if isinstance(s, str):
            scenarios.append(json.loads((base_dir / s).read_text()))
        else:
            scenarios.append(s)
    if not scenarios:
        raise ConfigError("suite lists no scenarios")
    if "seeds" in config:
        seeds = [int(x) for x in config["seeds"]]
    else:
        seeds = list(range(int(config.get("seed_start", 0)), int(config.get("seed_start", 0)) + int(config.get("n_seeds", 1))))
    modes = list(config.get("modes", ["baseline", "ams"]))
    for m in modes:
        get_mode(m)
    variants = config.get("variants") or {"default": {}}
    jobs = []
    for s in scenarios:
        for vname, overrides in sorted(variants.items()):
            d = _merge(s, overrides)
            scenario_from_dict(d)  # validate before fanning out
            for m in modes:
                for seed in seeds:
                    jobs.append((d, vname, m, seed))
    return jobs


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass(frozen=True)
class SuiteResult:
    episodes: list[dict]
    summary: list[dict]
    episodes_csv: str
    summary_csv: str


def run_suite(config: dict, out_dir: Optional[str | Path] = None, base_dir: str | Path = ".",
              workers: Optional[int] = None) -> SuiteResult:
    jobs = _suite_jobs(config, Path(base_dir))
    workers = int(config.get("workers", 1)) if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_run_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        rows = [_run_job(j) for j in jobs]
    rows.sort(key=lambda r: (r["scenario"], r["variant"], r["mode"], r["seed"]))
    summary = summarize(rows)
    res = SuiteResult(rows, summary, _csv(rows, EPISODE_COLUMNS), _csv(summary, SUMMARY_COLUMNS))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "episodes.csv").write_text(res.episodes_csv)
        (out / "summary.csv").write_text(res.summary_csv)
    return res


def report(out_dir: str | Path) -> str:
    """Render a suite's summary.csv as an aligned text table."""
    path = Path(out_dir) / "summary.csv"
    if not path.exists():
        raise ConfigError(f"no summary.csv in {out_dir}")
    with path.open(newline="") as f:
        rows = list(csv.reader(f))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def configure_logging() -> None:
    level = os.environ.get("AMS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


__all__ = [
    "EpisodeReport", "EpisodeRunner", "FaultConfig", "MODES", "ModeConfig", "ReplayVerdict", "Scenario",
    "SuiteResult", "TraceWriter", "get_mode", "load_scenario", "replay_trace", "report", "run_episode",
    "run_suite", "scenario_from_dict", "scenario_to_dict", "summarize",
]
