"""Shared drivers for policy-level tests."""
from ams.action_index import deserialize_step
from ams.context_pool import ActionContext, BlobKind, ContextPool
from ams.policy_synth import PolicyRequest, SyntheticPolicy, SyntheticPolicyConfig, encode_latent
from ams.robot_sim import Scene, Simulator, generate_layout


def execute(sim, sl):
    for st in sl.steps:
        sim.apply(st)


def drive(sim, policy, latent_for=None, until=None, max_calls=200):
    """Call the policy in a loop; ``latent_for(obs)`` supplies the seed.
    Returns the executed step count when ``until(sim)`` holds, else None."""
    steps = 0
    for _ in range(max_calls):
        if until(sim):
            return steps
        obs = sim.observe()
        seed = latent_for(obs) if latent_for else None
        resp = policy.infer(PolicyRequest(obs, obs.instruction, seed))
        if resp.declared_done:
            return None
        execute(sim, resp.slice)
        steps += len(resp.slice.steps)
    return None


def matching_latent(policy):
    return lambda obs: encode_latent(policy.phase(obs, policy.target(obs)))


def foreign_latent(obs):
    return encode_latent({"placements": -1})


def after_first_placement(seed, n=2):
    sim = Simulator(Scene(generate_layout(n, seed)))
    drive(sim, SyntheticPolicy(SyntheticPolicyConfig(repetition_limit=n)), until=lambda s: s.placed_count >= 1)
    return sim


def admit_response(pool: ContextPool, obs, resp, success=True, episode_id=0):
    vids = pool.intern_slice(resp.slice)
    ctx = ActionContext(obs.instruction, obs.sig, vids, success=success, episode_id=episode_id)
    return pool.admit(ctx, resp.produced_blobs)


def recorded_steps(pool, ctx_id):
    return [deserialize_step(pool.store.resolve(v)) for v in pool.contexts[ctx_id].virtual_action_ids]


__all__ = ["BlobKind", "admit_response", "after_first_placement", "drive", "execute", "foreign_latent",
           "matching_latent", "recorded_steps"]
