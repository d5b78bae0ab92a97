"""Proximal-policy training over the decision-step environment.

Rollouts pass sampled actions through the safety mask by default, storing the
executed action so updates stay on-policy with respect to behavior; the
mask-off path exists as an ablation.  Episode seeds derive from (base_seed,
episode_index, stream) so any run is reproducible.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .actions import Action, N_ACTIONS
from .episode import DrivingEnv, run_episode
from .metrics import metrics_summary
from .policy import (
    PolicyDims,
    PolicyParams,
    evaluate_actions,
    init_params,
    ppo_loss_and_grads,
    save_checkpoint,
)
from .scenario import DECISION_PERIOD, ScenarioConfig
from .trajectory import Trajectory

GAMMA = 0.99
# Bootstrap window for the n-step advantage.  Short on purpose: returns here
# hinge on whether the *sampled* continuation keeps collecting the lane-hold
# income, so long reward sums are dominated by exploration noise and the
# signal that lane changes pay off never survives batch standardization.
# Bootstrapping after two steps hands that part of the estimate to the
# critic, which learns the value of being on the directed lane from the
# plentiful stay-put episodes and is noise-free at decision time.
ADV_HORIZON = 2
LEARNING_RATE = 3e-4
BATCH_STEPS = 512         # decision steps per policy update
PPO_EPOCHS = 4
MINIBATCH_SIZE = 256
CLIP_EPS = 0.2
KL_LIMIT = 0.02
ENTROPY_COEF = 0.01
CRITIC_COEF = 0.5


class Adam:
    """Per-parameter adaptive steps; updates params in place."""

    def __init__(self, params: PolicyParams, lr: float = LEARNING_RATE,
                 betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8) -> None:
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = params.zeros_like()
        self.v = params.zeros_like()

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for key, g in grads.items():
            self.m[key] = b1 * self.m[key] + (1.0 - b1) * g
            self.v[key] = b2 * self.v[key] + (1.0 - b2) * g * g
            m_hat = self.m[key] / c1
            v_hat = self.v[key] / c2
            self.params.arrays[key] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def sgd_step(params: PolicyParams, grads: dict[str, np.ndarray],
             lr: float) -> None:
    """Plain gradient step; used by the descent-direction checks."""
    for key, g in grads.items():
        params.arrays[key] -= lr * g


# ---------------------------------------------------------------------------
# Advantage estimation
# ---------------------------------------------------------------------------

def compute_advantages(traj: Trajectory, gamma: float = GAMMA,
                       horizon: int = ADV_HORIZON,
                       ) -> tuple[np.ndarray, np.ndarray]:
    """N-step bootstrapped advantages and value targets for one episode.

    A_t = sum_{j<m} gamma^j r_{t+j} + gamma^m V(s_{t+m}) - V(s_t) with
    m = min(horizon, T - t); the value beyond the last step is 0 at a terminal
    state and the recorded bootstrap at a truncation.
    """
    rewards = traj.rewards_array()
    values = traj.values_array()
    n = len(rewards)
    if n == 0:
        return np.zeros(0), np.zeros(0)
    values_ext = np.append(values, traj.terminal_value)

    adv = np.zeros(n)
    for t in range(n):
        m = min(horizon, n - t)
        acc = 0.0
        g = 1.0
        for j in range(m):
            acc += g * rewards[t + j]
            g *= gamma
        adv[t] = acc + g * values_ext[t + m] - values[t]
    targets = adv + values
    return adv, targets


def assemble_batch(trajs: list[Trajectory], gamma: float = GAMMA,
                   horizon: int = ADV_HORIZON) -> dict[str, np.ndarray]:
    """Stack episodes into one update batch; standardize advantages.

    Value targets are built from the raw advantages before standardization.
    """
    obs, actions, old_lp, adv_all, targets_all = [], [], [], [], []
    for traj in trajs:
        adv, targets = compute_advantages(traj, gamma, horizon)
        obs.extend(o.rows for o in traj.observations)
        actions.extend(int(a) for a in traj.actions)
        old_lp.extend(traj.log_probs)
        adv_all.append(adv)
        targets_all.append(targets)
    adv = np.concatenate(adv_all)
    std = adv.std()
    adv_norm = (adv - adv.mean()) / (std + 1e-8)
    return {
        "obs": np.stack(obs),
        "actions": np.asarray(actions, dtype=np.int64),
        "old_log_probs": np.asarray(old_lp),
        "advantages": adv_norm,
        "value_targets": np.concatenate(targets_all),
    }


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

def collect_rollouts(params: PolicyParams, config: ScenarioConfig,
                     base_seed: int, n_steps: int = BATCH_STEPS,
                     start_episode: int = 0, y_des_mode: str = "random",
                     use_mask: bool = True) -> tuple[list[Trajectory], int]:
    """Episodes until exactly `n_steps` decision steps; last one may truncate.

    Sampled actions pass through the mask; the stored action/log-prob pair is
    the executed one, so updates stay on-policy with respect to behavior.
    `use_mask=False` is the ablation path.
    """
    env = DrivingEnv(config, base_seed, use_mask=use_mask,
                     y_des_mode=y_des_mode)
    trajs: list[Trajectory] = []
    total = 0
    episode = start_episode
    while total < n_steps:
        traj = run_episode(params, env, episode, max_steps=n_steps - total)
        trajs.append(traj)
        total += len(traj)
        episode += 1
    return trajs, episode


# ---------------------------------------------------------------------------
# PPO update
# ---------------------------------------------------------------------------

def ppo_update(params: PolicyParams, optimizer: Adam,
               batch: dict[str, np.ndarray], epochs: int = PPO_EPOCHS,
               minibatch_size: int = MINIBATCH_SIZE,
               clip_eps: float = CLIP_EPS, kl_limit: float = KL_LIMIT,
               entropy_coef: float = ENTROPY_COEF,
               critic_coef: float = CRITIC_COEF,
               rng: np.random.Generator | None = None) -> dict:
    """Minibatch epochs over one batch; stops early once KL drifts too far."""
    rng = rng or np.random.default_rng(0)
    n = len(batch["actions"])
    stats: dict = {}
    losses, kls = [], []
    epochs_run = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, minibatch_size):
            idx = order[lo:lo + minibatch_size]
            mb_stats, grads = ppo_loss_and_grads(
                params, batch["obs"][idx], batch["actions"][idx],
                batch["old_log_probs"][idx], batch["advantages"][idx],
                batch["value_targets"][idx], clip_eps=clip_eps,
                critic_coef=critic_coef, entropy_coef=entropy_coef)
            optimizer.step(grads)
            losses.append(mb_stats["loss"])
            stats = mb_stats
        epochs_run += 1
        new_lp, ent, _ = evaluate_actions(params, batch["obs"],
                                          batch["actions"])
        kl = float(np.mean(batch["old_log_probs"] - new_lp))
        kls.append(kl)
        if kl > kl_limit:
            break
    stats.update({
        "approx_kl": kls[-1] if kls else 0.0,
        "entropy_batch": float(ent.mean()),
        "epochs_run": epochs_run,
        "mean_loss": float(np.mean(losses)) if losses else 0.0,
    })
    return stats


# ---------------------------------------------------------------------------
# Training driver
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: PolicyParams
    history: list[dict] = field(default_factory=list)
    env_steps: int = 0
    checkpoint_path: Path | None = None


CSV_FIELDS = ("batch", "env_steps", "mean_return", "approx_kl", "entropy",
              "success_rate", "episodes", "collisions", "epochs_run")


def train(config: ScenarioConfig, total_steps: int = 20000,
          base_seed: int = 0, out_dir: str | Path | None = None,
          batch_steps: int = BATCH_STEPS, lr: float = LEARNING_RATE,
          dims: PolicyDims | None = None, y_des_mode: str = "random",
          use_mask: bool = True,
          checkpoint_every: int = 10, epochs: int = PPO_EPOCHS,
          minibatch_size: int = MINIBATCH_SIZE, kl_limit: float = KL_LIMIT,
          entropy_coef: float = ENTROPY_COEF,
          adv_horizon: int = ADV_HORIZON,
          progress: bool = False) -> TrainResult:
    """Full training run: collect, update, log a CSV row per batch."""
    init_rng = np.random.default_rng([base_seed, 0, 3])
    params = init_params(init_rng, dims)
    optimizer = Adam(params, lr=lr)
    update_rng = np.random.default_rng([base_seed, 0, 4])

    out = Path(out_dir) if out_dir is not None else None
    csv_fh = None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_fh = (out / "training_log.csv").open("w", newline="")
        writer = csv.DictWriter(csv_fh, fieldnames=CSV_FIELDS)
        writer.writeheader()

    result = TrainResult(params=params)
    episode = 0
    batch_idx = 0
    try:
        while result.env_steps < total_steps:
            trajs, episode = collect_rollouts(
                params, config, base_seed, n_steps=batch_steps,
                start_episode=episode, y_des_mode=y_des_mode,
                use_mask=use_mask)
            result.env_steps += sum(len(t) for t in trajs)
            batch = assemble_batch(trajs, horizon=adv_horizon)
            stats = ppo_update(params, optimizer, batch, epochs=epochs,
                               minibatch_size=minibatch_size,
                               kl_limit=kl_limit, entropy_coef=entropy_coef,
                               rng=update_rng)

            horizon = int(round(config.episode_horizon / DECISION_PERIOD))
            complete = [t for t in trajs if t.collided or len(t) >= horizon]
            sample = complete if complete else trajs
            row = {
                "batch": batch_idx,
                "env_steps": result.env_steps,
                "mean_return": float(np.mean([t.episode_return for t in sample])),
                "approx_kl": stats["approx_kl"],
                "entropy": stats["entropy_batch"],
                "success_rate": float(np.mean([0.0 if t.collided else 1.0
                                               for t in sample])),
                "episodes": len(sample),
                "collisions": sum(1 for t in sample if t.collided),
                "epochs_run": stats["epochs_run"],
            }
            result.history.append(row)
            if writer is not None:
                writer.writerow(row)
                csv_fh.flush()
            if progress:
                print(f"batch {batch_idx:3d} steps {result.env_steps:6d} "
                      f"return {row['mean_return']:7.2f} "
                      f"success {row['success_rate']:.2f} "
                      f"kl {row['approx_kl']:.4f}")
            if out is not None and (batch_idx + 1) % checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_{batch_idx:04d}.bin", params,
                                extra={"env_steps": result.env_steps})
            batch_idx += 1
    finally:
        if csv_fh is not None:
            csv_fh.close()

    if out is not None:
        result.checkpoint_path = out / "final.ckpt"
        save_checkpoint(result.checkpoint_path, params,
                        extra={"env_steps": result.env_steps,
                               "scenario": config.to_dict()})
    return result


# ---------------------------------------------------------------------------
# Evaluation and reference policies
# ---------------------------------------------------------------------------

def evaluate(params: PolicyParams, config: ScenarioConfig,
             n_episodes: int = 20, base_seed: int = 10_000,
             use_mask: bool = True, greedy: bool = True,
             y_des_mode: str = "random", fixed_y_des: float | None = None,
             directive_fn=None, log_dir: str | Path | None = None,
             ) -> tuple[dict, list[Trajectory]]:
    env = DrivingEnv(config, base_seed, use_mask=use_mask,
                     y_des_mode=y_des_mode, fixed_y_des=fixed_y_des)
    out = Path(log_dir) if log_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    trajs = []
    for i in range(n_episodes):
        if out is not None:
            with (out / f"episode_{i:04d}.jsonl").open("w") as fh:
                trajs.append(run_episode(params, env, i, greedy=greedy,
                                         directive_fn=directive_fn, log=fh))
        else:
            trajs.append(run_episode(params, env, i, greedy=greedy,
                                     directive_fn=directive_fn))
    return metrics_summary(trajs), trajs


def run_reference_episode(kind: str, env: DrivingEnv, episode_index: int,
                          ) -> Trajectory:
    """Scripted comparison policies: uniform-random or always-cruise."""
    if kind not in ("random", "keep_lane"):
        raise ValueError(f"unknown reference policy {kind!r}")
    env.reset(episode_index)
    rng = np.random.default_rng([env.base_seed, episode_index, 1])
    traj = Trajectory(seed=env.world_seed, scenario_kind=env.config.kind)
    for _ in range(env.horizon):
        if kind == "random":
            action = Action(int(rng.integers(N_ACTIONS)))
        else:
            action = Action.CRUISE
        outcome = env.step(action)
        traj.actions.append(outcome.executed)
        traj.rewards.append(outcome.reward.total)
        traj.log_probs.append(0.0)
        traj.values.append(0.0)
        traj.dones.append(outcome.done)
        for rec in outcome.substeps:
            traj.step_speeds.append(rec.speed)
            traj.step_accels.append(rec.accel)
            traj.step_ttc.append(rec.ttc)
        if outcome.done or outcome.truncated:
            break
    traj.collided = env.world.collided
    traj.final_lane = env.world.ego.lane
    return traj


def evaluate_reference(kind: str, config: ScenarioConfig,
                       n_episodes: int = 20, base_seed: int = 10_000,
                       use_mask: bool = False) -> tuple[dict, list[Trajectory]]:
    env = DrivingEnv(config, base_seed, use_mask=use_mask, y_des_mode="ego")
    trajs = [run_reference_episode(kind, env, i) for i in range(n_episodes)]
    return metrics_summary(trajs), trajs
