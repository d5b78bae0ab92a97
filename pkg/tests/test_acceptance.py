"""Release gates, one test per system-level guarantee.

Each test here is a self-contained end-to-end check with its own runtime
budget; together they are the bar a build must clear before shipping.  The
slower gates (training-based) share one session-scoped trained policy.
"""
import json
import struct
import time

import numpy as np
import pytest

from fastslow.actions import Action
from fastslow.cli import EXIT_FAIL, EXIT_OK, main as cli_main
from fastslow.policy import (
    PolicyDims,
    entropy_from_log_probs,
    forward,
    init_params,
    ppo_loss_and_grads,
)
from fastslow.scenario import PRESETS
from fastslow.slow.directive import (
    Directive,
    directive_pipeline,
    parse_directive,
    render_directive_block,
)
from fastslow.slow.llm import ENV_API_KEY, ENV_BASE_URL, LLMUnavailable
from fastslow.slow.memory import MemoryBank, MemoryEntry
from fastslow.slow.scene import embed_text
from fastslow.trajectory import Trajectory
from fastslow.training import compute_advantages, evaluate
from fastslow.world import build_scenario

from helpers import ego_at, make_world


# ---------------------------------------------------------------------------
# 1. Every gradient coordinate matches central finite differences
# ---------------------------------------------------------------------------

def _reference_loss(params, obs, actions, old_lp, adv, targets):
    """The training objective recomputed from scratch (forward pass only)."""
    trace = forward(params, obs)
    idx = np.arange(len(actions))
    new_lp = trace.log_probs[idx, actions]
    ratio = np.exp(new_lp - old_lp)
    clipped = np.clip(ratio, 0.8, 1.2)
    policy_loss = -np.minimum(ratio * adv, clipped * adv).mean()
    value_loss = ((trace.values - targets) ** 2).mean()
    entropy = entropy_from_log_probs(trace.log_probs).mean()
    return policy_loss + 0.5 * value_loss - 0.01 * entropy


def test_01_every_gradient_coordinate_matches_finite_differences():
    start = time.monotonic()
    dims = PolicyDims(d_model=8, n_heads=1, n_blocks=1, ffn_mult=2)
    rng = np.random.default_rng(5)
    params = init_params(rng, dims)
    obs = rng.uniform(-1.5, 1.5, size=(4, 3, 6))
    actions = rng.integers(0, 5, size=4)
    old_lp = forward(params, obs).log_probs[np.arange(4), actions]
    old_lp = old_lp + rng.normal(0, 0.1, size=4)  # off-policy ratios
    adv = rng.normal(size=4)
    targets = rng.normal(size=4)

    _, grads = ppo_loss_and_grads(params, obs, actions, old_lp, adv, targets)

    eps = 1e-4
    worst = 0.0
    n_coords = 0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        analytic = grads[name].reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + eps
            up = _reference_loss(params, obs, actions, old_lp, adv, targets)
            flat[j] = keep - eps
            down = _reference_loss(params, obs, actions, old_lp, adv, targets)
            flat[j] = keep
            fd = (up - down) / (2 * eps)
            rel = abs(fd - analytic[j]) / max(abs(fd), abs(analytic[j]), 1e-8)
            worst = max(worst, rel)
            n_coords += 1
    elapsed = time.monotonic() - start
    assert worst < 1e-4, (
        f"worst relative gradient error {worst:.3e} over {n_coords} "
        f"coordinates (tolerance 1e-4)")
    assert elapsed < 60.0, f"gradient sweep took {elapsed:.1f}s (budget 60s)"


# ---------------------------------------------------------------------------
# 2. Distributions normalize; neighbor order never matters
# ---------------------------------------------------------------------------

def test_02_distributions_normalized_and_neighbor_order_free():
    start = time.monotonic()
    rng = np.random.default_rng(20)
    params = init_params(rng)  # full-size network
    obs = rng.uniform(-2.0, 2.0, size=(1000, 6, 6))

    trace = forward(params, obs)
    prob_err = np.abs(trace.probs.sum(axis=1) - 1.0).max()
    assert prob_err < 1e-6, f"action distribution sums off by {prob_err:.2e}"
    attn_err = 0.0
    for blk in trace.blocks:
        attn_err = max(attn_err,
                       np.abs(blk["weights"].sum(axis=-1) - 1.0).max())
    assert attn_err < 1e-6, f"attention row sums off by {attn_err:.2e}"

    worst = 0.0
    for _ in range(3):
        perm = np.concatenate([[0], rng.permutation(5) + 1])
        permuted = forward(params, obs[:, perm, :])
        worst = max(worst, np.abs(permuted.logits - trace.logits).max())
    assert worst < 1e-9, (
        f"neighbor-row permutation moved logits by {worst:.2e} (tol 1e-9)")
    elapsed = time.monotonic() - start
    assert elapsed < 60.0, f"invariant sweep took {elapsed:.1f}s (budget 60s)"


# ---------------------------------------------------------------------------
# 3. Advantages equal independent brute-force bootstrapped sums
# ---------------------------------------------------------------------------

def _brute_force_advantages(rewards, values, terminal_value, gamma, horizon):
    n = len(rewards)
    ext = list(values) + [terminal_value]
    out = []
    for t in range(n):
        m = min(horizon, n - t)
        total = sum(gamma ** j * rewards[t + j] for j in range(m))
        out.append(total + gamma ** m * ext[t + m] - values[t])
    return np.array(out)


def test_03_advantages_equal_brute_force_sums():
    start = time.monotonic()
    rng = np.random.default_rng(33)
    worst = 0.0
    for case in range(100):
        n = int(rng.integers(1, 41))
        traj = Trajectory(seed=case, scenario_kind="highway")
        traj.rewards = list(rng.normal(0, 3, size=n))
        traj.values = list(rng.normal(0, 5, size=n))
        traj.bootstrap_value = float(rng.normal(0, 5))
        ended = bool(rng.integers(2))
        traj.dones = [False] * (n - 1) + [ended]
        traj.actions = [Action.CRUISE] * n

        gamma = float(rng.uniform(0.5, 0.999))
        horizon = int(rng.integers(1, 20))
        adv, targets = compute_advantages(traj, gamma=gamma, horizon=horizon)
        oracle = _brute_force_advantages(
            traj.rewards, traj.values, traj.terminal_value, gamma, horizon)
        worst = max(worst, np.abs(adv - oracle).max(),
                    np.abs(targets - (oracle + np.array(traj.values))).max())
    elapsed = time.monotonic() - start
    assert worst < 1e-10, (
        f"advantage mismatch vs brute force: {worst:.2e} (tol 1e-10)")
    assert elapsed < 30.0, f"oracle sweep took {elapsed:.1f}s (budget 30s)"


# ---------------------------------------------------------------------------
# 7. Planner pipeline: deterministic, exact retrieval, safe fallbacks
# ---------------------------------------------------------------------------

WORDS = ("merge lane clear traffic slow fast leader gap oncoming bridge "
         "truck rain exit ramp shoulder cone night convoy stall").split()


def _random_scene(rng):
    return " ".join(rng.choice(WORDS, size=rng.integers(4, 12)))


def test_07_planner_deterministic_retrieval_exact_parser_safe(monkeypatch):
    start = time.monotonic()
    cfg = PRESETS["highway"]
    world = build_scenario(cfg)

    # --- bit-determinism of the stub pipeline -----------------------------
    bank = MemoryBank()
    rng = np.random.default_rng(7)
    for i in range(50):
        bank.add(MemoryEntry(scene=_random_scene(rng),
                             directive={"target_lane": int(rng.integers(4)),
                                        "speed_intent": 0, "urgency": 0.5},
                             outcome=1.0, time=float(i)))
    d1, t1 = directive_pipeline(world, "keep steady", bank)
    d2, t2 = directive_pipeline(world, "keep steady", bank)
    assert d1 == d2, "same inputs produced different directives"
    assert json.dumps(t1, sort_keys=True) == json.dumps(t2, sort_keys=True), \
        "same inputs produced different transcripts"

    # --- retrieval equals explicit cosine search on a 1,000-entry bank ----
    big = MemoryBank()
    texts = []
    for i in range(1000):
        text = _random_scene(rng)
        texts.append(text)
        big.add(MemoryEntry(scene=text, directive={"target_lane": 1,
                                                   "speed_intent": 0,
                                                   "urgency": 0.0},
                            outcome=0.0, time=float(i)))
    mismatches = 0
    for q in range(20):
        query = _random_scene(rng)
        qv = embed_text(query)
        cosines = []
        for i, text in enumerate(texts):
            v = embed_text(text)
            na, nb = np.linalg.norm(qv), np.linalg.norm(v)
            cosines.append(float(qv @ v / (na * nb)) if na > 0 and nb > 0
                           else 0.0)
        # the bank breaks score ties toward newer entries
        best = max(range(1000), key=lambda i: (cosines[i], i))
        got = big.retrieve(query, k=1)
        if cosines[best] <= 0.0:
            ok = got == []
        else:
            ok = bool(got) and got[0][0].scene == texts[best] and \
                abs(got[0][1] - cosines[best]) < 1e-12
        mismatches += 0 if ok else 1
    assert mismatches == 0, f"{mismatches}/20 retrievals disagreed with " \
                            f"brute-force cosine argmax"

    # --- parser round-trips every valid directive shape --------------------
    checked = 0
    for lane in range(cfg.lane_count):
        for intent in (-1, 0, 1):
            for urgency in (0.0, 0.25, 1 / 3, 0.5, 0.9999, 1.0):
                for rationale in ("", "pass the truck", "запас — unicode ok"):
                    d = Directive(lane, intent, urgency, rationale)
                    back = parse_directive(render_directive_block(d), cfg)
                    assert back == d, f"round-trip changed {d} -> {back}"
                    checked += 1

    # --- every backend failure falls back to the neutral directive ---------
    monkeypatch.delenv(ENV_BASE_URL, raising=False)
    monkeypatch.delenv(ENV_API_KEY, raising=False)
    failures = []
    d, t = directive_pipeline(world, "anything", bank, mode="remote")
    failures.append((d, t))

    import fastslow.slow.directive as directive_mod

    def unavailable(prompt, mode="stub"):
        raise LLMUnavailable("injected outage")

    monkeypatch.setattr(directive_mod, "query_llm", unavailable)
    failures.append(directive_pipeline(world, "anything", bank))

    monkeypatch.setattr(directive_mod, "query_llm",
                        lambda prompt, mode="stub": "no fenced block here")
    failures.append(directive_pipeline(world, "anything", bank))

    monkeypatch.setattr(
        directive_mod, "query_llm",
        lambda prompt, mode="stub":
        '```json\n{"target_lane": 99, "speed_intent": 0, "urgency": 0}\n```')
    failures.append(directive_pipeline(world, "anything", bank))

    for d, t in failures:
        assert t["fallback"], "failure did not mark the transcript"
        assert d.target_lane == world.ego.lane and d.speed_intent == 0 \
            and d.urgency == 0.0, f"fallback directive not neutral: {d}"

    elapsed = time.monotonic() - start
    assert elapsed < 60.0, f"planner gate took {elapsed:.1f}s (budget 60s)"
    del checked


# ---------------------------------------------------------------------------
# 9. Logged episodes replay bit-exactly; any tampered control fails
# ---------------------------------------------------------------------------

def test_09_logged_episodes_replay_exactly(tmp_path, capsys):
    start = time.monotonic()
    rng = np.random.default_rng(99)
    params = init_params(rng, PolicyDims(d_model=16, n_heads=2, n_blocks=1,
                                         ffn_mult=2))
    logged = []
    for kind, count in (("highway", 7), ("merge", 7), ("two_way", 6)):
        log_dir = tmp_path / kind
        evaluate(params, PRESETS[kind], n_episodes=count, base_seed=4200,
                 use_mask=True, greedy=False, y_des_mode="random",
                 log_dir=log_dir)
        logged += sorted(log_dir.glob("episode_*.jsonl"))
    assert len(logged) == 20

    for path in logged:
        code = cli_main(["replay", str(path)])
        out = capsys.readouterr().out
        assert code == EXIT_OK and out.startswith("PASS"), \
            f"replay of {path.name} did not verify: {out!r}"

    # flip one mantissa bit of a logged acceleration command; the bit is
    # chosen high enough that accel*dt still moves the velocity by at least
    # one ulp (the very lowest bits vanish in float rounding), and the
    # command is away from the actuator clamp so the change survives it
    victim = logged[3]
    lines = victim.read_text().splitlines()
    target = next(i for i, ln in enumerate(lines)
                  if json.loads(ln)["type"] == "substep"
                  and 0.05 < abs(json.loads(ln)["accel_cmd"]) < 2.0)
    rec = json.loads(lines[target])
    bits = struct.unpack("<Q", struct.pack("<d", rec["accel_cmd"]))[0]
    rec["accel_cmd"] = struct.unpack("<d", struct.pack("<Q", bits ^ (1 << 40)))[0]
    lines[target] = json.dumps(rec)
    tampered = tmp_path / "tampered.jsonl"
    tampered.write_text("\n".join(lines) + "\n")

    code = cli_main(["replay", str(tampered)])
    out = capsys.readouterr().out
    assert code == EXIT_FAIL and out.startswith("FAIL"), (
        f"single-bit control perturbation went undetected: {out!r}")
    elapsed = time.monotonic() - start
    assert elapsed < 120.0, f"replay gate took {elapsed:.1f}s (budget 120s)"
