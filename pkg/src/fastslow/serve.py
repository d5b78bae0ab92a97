"""Live session service: episodes streamed as JSON over a websocket.

Protocol v1: every message is {"v": "v1", "session": <id>, "seq": <monotone
int>, "type": <state|directive|mask_event|instruction|metrics|control>,
"payload": {...}}.  New clients get the latest state/directive/metrics as a
snapshot before deltas.  Instructions may arrive at any time; they reach the
planner at the next decision boundary.  The episode loop is the single writer
of simulation state; client handlers only enqueue text and control flags.
"""
from __future__ import annotations

import asyncio
import json
import math
import uuid
from collections import deque

import numpy as np
from websockets.asyncio.server import serve as ws_serve

from .actions import Action, SPEED_STEP
from .control import ArbitrationState, reconcile_directive
from .episode import DrivingEnv, _vehicle_rows
from .policy import PolicyParams, policy_outputs
from .scenario import SIM_DT, ScenarioConfig
from .slow.directive import InstructionFeed, make_directive_fn
from .slow.memory import MemoryBank
from .world import nearest_in_lane

PROTOCOL_VERSION = "v1"
METRICS_WINDOW = 20


class LiveSession:
    def __init__(self, params: PolicyParams, config: ScenarioConfig,
                 base_seed: int = 0, llm_mode: str = "stub",
                 speed: float = 1.0) -> None:
        self.params = params
        self.config = config
        self.base_seed = base_seed
        self.llm_mode = llm_mode
        self.speed = speed
        self.session_id = uuid.uuid4().hex[:12]
        self.seq = 0
        self.clients: set = set()
        self.feed = None  # fresh InstructionFeed per reset
        self.bank = MemoryBank()
        self.running = asyncio.Event()
        self.running.set()
        self.reset_seed: int | None = None
        self.last_payload: dict[str, dict] = {}
        self.window: deque[dict] = deque(maxlen=METRICS_WINDOW)

    # -- wire ---------------------------------------------------------------

    def _envelope(self, msg_type: str, payload: dict) -> str:
        self.seq += 1
        return json.dumps({"v": PROTOCOL_VERSION, "session": self.session_id,
                           "seq": self.seq, "type": msg_type,
                           "payload": payload})

    async def _broadcast(self, msg_type: str, payload: dict) -> None:
        if msg_type in ("state", "directive", "metrics"):
            self.last_payload[msg_type] = payload
        data = self._envelope(msg_type, payload)
        for ws in list(self.clients):
            try:
                await ws.send(data)
            except Exception:
                self.clients.discard(ws)

    async def _send_snapshot(self, ws) -> None:
        for msg_type in ("state", "directive", "metrics"):
            payload = self.last_payload.get(msg_type)
            if payload is not None:
                await ws.send(self._envelope(msg_type, payload))

    async def handle_client(self, ws) -> None:
        """One connection; faults here never touch the episode loop."""
        try:
            await self._send_snapshot(ws)
            self.clients.add(ws)
            async for raw in ws:
                try:
                    msg = json.loads(raw)
                except json.JSONDecodeError:
                    continue
                payload = msg.get("payload") or {}
                if msg.get("type") == "instruction":
                    text = str(payload.get("text", "")).strip()
                    if text and self.feed is not None:
                        self.feed.set(text)
                        await self._broadcast("instruction", {"text": text})
                elif msg.get("type") == "control":
                    await self._handle_control(payload)
        except Exception:
            pass
        finally:
            self.clients.discard(ws)

    async def _handle_control(self, payload: dict) -> None:
        op = payload.get("op")
        if op == "pause":
            self.running.clear()
        elif op == "resume":
            self.running.set()
        elif op == "reset":
            seed = payload.get("seed")
            self.reset_seed = int(seed) if seed is not None else self.base_seed
            self.running.set()
        else:
            return
        await self._broadcast("control", {"op": op, "ack": True,
                                          "paused": not self.running.is_set()})

    # -- episode loop ---------------------------------------------------------

    def _state_payload(self, env: DrivingEnv, episode: int, t: int,
                       frame: str, reward=None) -> dict:
        world = env.world
        return {
            "episode": episode, "t": t, "time": world.time, "frame": frame,
            "scenario": self.config.to_dict(),
            "vehicles": _vehicle_rows(world),
            "collided": world.collided,
            "y_des": env.y_des,
            "target_lane": env.setpoints.target_lane,
            "target_speed": env.setpoints.target_speed,
            "reward": reward.to_dict() if reward is not None else None,
        }

    def _metrics_payload(self) -> dict:
        eps = list(self.window)
        if not eps:
            return {"episodes": 0}
        ttcs = [e["min_ttc"] for e in eps if e["min_ttc"] is not None]
        return {
            "episodes": len(eps),
            "success_rate": sum(0 if e["collided"] else 1
                                for e in eps) / len(eps),
            "avg_speed": float(np.mean([e["avg_speed"] for e in eps])),
            "min_ttc": float(np.mean(ttcs)) if ttcs else None,
            "mean_return": float(np.mean([e["return"] for e in eps])),
            "overtakes": sum(e["overtakes"] for e in eps),
        }

    async def episode_loop(self) -> None:
        episode = 0
        env = DrivingEnv(self.config, self.base_seed, use_mask=True,
                         y_des_mode="ego")
        self.feed = InstructionFeed()
        while True:
            if self.reset_seed is not None:
                self.base_seed = self.reset_seed
                self.reset_seed = None
                episode = 0
                env = DrivingEnv(self.config, self.base_seed, use_mask=True,
                                 y_des_mode="ego")
                self.feed = InstructionFeed()
                self.window.clear()
            obs = env.reset(episode)
            arb = ArbitrationState()
            biased_plan = None
            directive_fn = make_directive_fn(self.bank, feed=self.feed,
                                             instruction=self.feed.current,
                                             mode=self.llm_mode)
            ep = {"return": 0.0, "collided": False, "overtakes": 0,
                  "speeds": [], "min_ttc": math.inf}
            leader = None
            went_out = False
            if self.config.kind == "two_way":
                leader = nearest_in_lane(env.world, env.world.ego.lane,
                                         "ahead")
            await self._broadcast(
                "state", self._state_payload(env, episode, 0, "reset"))

            for t in range(env.horizon):
                await self.running.wait()
                if self.reset_seed is not None:
                    break

                directive = directive_fn(env.world, t)
                y_des, arb = reconcile_directive(directive, arb, env.world,
                                                 now=env.world.time,
                                                 setpoints=env.setpoints)
                env.set_y_des(y_des)
                # Bias the speed setpoint once per plan change, not per
                # reissue (see run_episode).
                if (arb.just_applied is not None
                        and arb.just_applied != biased_plan):
                    env.bias_target_speed(
                        arb.just_applied.speed_intent * SPEED_STEP)
                    biased_plan = arb.just_applied
                if directive is not None or arb.just_applied is not None:
                    await self._broadcast("directive", {
                        "directive": (directive or arb.just_applied).to_dict(),
                        "source": self.feed.current or "(auto)",
                        "applied": arb.just_applied is not None,
                        "pending_reason": arb.last_override_reason,
                        "t": t,
                    })

                probs, _, _ = policy_outputs(self.params, obs.rows)
                action = Action(int(np.argmax(probs)))
                outcome = env.step(action, probs=probs)
                obs = outcome.observation

                if outcome.executed != outcome.candidate:
                    verdict = outcome.mask_decisions[int(outcome.candidate)]
                    await self._broadcast("mask_event", {
                        "t": t, "candidate": int(outcome.candidate),
                        "executed": int(outcome.executed),
                        "allowed": verdict.allowed, "reason": verdict.reason,
                    })

                ep["return"] += outcome.reward.total
                for rec in outcome.substeps:
                    ep["speeds"].append(rec.speed)
                    if math.isfinite(rec.ttc):
                        ep["min_ttc"] = min(ep["min_ttc"], rec.ttc)
                if leader is not None:
                    lane_now = env.world.ego.lane
                    if lane_now == 0:
                        went_out = True
                    elif lane_now == 1 and went_out:
                        if env.world.ego.x > env.world.vehicle(leader.id).x:
                            ep["overtakes"] += 1
                        went_out = False

                await self._broadcast(
                    "state", self._state_payload(env, episode, t, "decision",
                                                 reward=outcome.reward))
                for i, rec in enumerate(outcome.substeps):
                    await asyncio.sleep(SIM_DT / self.speed)
                    await self._broadcast("state", {
                        "episode": episode, "t": t, "substep": i,
                        "time": rec.time, "frame": "substep",
                        "vehicles": rec.vehicles, "collided": rec.collided,
                        "y_des": env.y_des, "reward": None,
                    })
                if outcome.done or outcome.truncated:
                    ep["collided"] = env.world.collided
                    break

            if self.reset_seed is not None:
                continue   # drop the partial episode; fresh stream next
            ep["avg_speed"] = float(np.mean(ep["speeds"])) if ep["speeds"] else 0.0
            ep["min_ttc"] = ep["min_ttc"] if math.isfinite(ep["min_ttc"]) else None
            ep.pop("speeds")
            self.window.append(ep)
            await self._broadcast("metrics", self._metrics_payload())
            episode += 1


async def _amain(session: LiveSession, host: str, port: int) -> None:
    async with ws_serve(session.handle_client, host, port):
        await session.episode_loop()


def run_server(params: PolicyParams, config: ScenarioConfig,
               host: str = "127.0.0.1", port: int = 8700, base_seed: int = 0,
               llm_mode: str = "stub", speed: float = 1.0) -> int:
    session = LiveSession(params, config, base_seed=base_seed,
                          llm_mode=llm_mode, speed=speed)
    print(f"serving ws://{host}:{port} (session {session.session_id}, "
          f"scenario {config.kind}, planner {llm_mode})")
    try:
        asyncio.run(_amain(session, host, port))
    except KeyboardInterrupt:
        pass
    return 0
