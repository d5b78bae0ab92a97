"""Command-line entry points: train, eval, replay, serve.

Validation failures exit 2 before any artifact is produced; a replay mismatch
exits 1.  Every artifact-producing run writes its manifest first, so a crash
is detectable by the missing end timestamp.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .policy import BadCheckpoint, load_checkpoint
from .scenario import InvalidConfig, ScenarioConfig, load_scenario
from .slow.directive import make_directive_fn
from .slow.memory import MemoryBank
from .training import BATCH_STEPS, evaluate, evaluate_reference, train

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


@dataclass
class RunManifest:
    command: str
    args: dict
    scenario: dict
    seed: int
    version: str = __version__
    outputs: list[str] = field(default_factory=list)
    started: float = field(default_factory=time.time)
    finished: float | None = None

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2) + "\n")

    def finish(self, path: Path) -> None:
        self.finished = time.time()
        self.write(path)


def _fail_usage(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_USAGE


def _load_config(source: str, seed: int | None) -> ScenarioConfig:
    return load_scenario(source, seed=seed)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    try:
        config = _load_config(args.scenario, args.seed)
    except InvalidConfig as exc:
        return _fail_usage(str(exc))
    if args.steps <= 0:
        return _fail_usage("--steps must be positive")
    if args.batch_steps <= 0:
        return _fail_usage("--batch-steps must be positive")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command="train",
        args={"scenario": args.scenario, "steps": args.steps,
              "seed": args.seed, "mask": args.mask,
              "batch_steps": args.batch_steps},
        scenario=config.to_dict(), seed=args.seed,
        outputs=["training_log.csv", "final.ckpt", "manifest.json"],
    )
    manifest_path = out / "manifest.json"
    manifest.write(manifest_path)

    train(config, total_steps=args.steps, base_seed=args.seed, out_dir=out,
          batch_steps=args.batch_steps, use_mask=(args.mask == "on"),
          progress=not args.quiet)
    manifest.finish(manifest_path)
    if not args.quiet:
        print(f"artifacts in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args: argparse.Namespace) -> int:
    if args.episodes <= 0:
        return _fail_usage("--episodes must be positive")
    try:
        params, extra = load_checkpoint(args.checkpoint)
    except BadCheckpoint as exc:
        return _fail_usage(f"bad checkpoint {args.checkpoint}: {exc}")

    try:
        if args.scenario:
            config = _load_config(args.scenario, args.seed)
        elif "scenario" in extra:
            config = ScenarioConfig.from_dict(extra["scenario"])
            if args.seed is not None:
                config = dataclasses.replace(config, seed=args.seed)
        else:
            return _fail_usage("no --scenario and checkpoint stores none")
    except InvalidConfig as exc:
        return _fail_usage(str(exc))

    seed = args.seed if args.seed is not None else 10_000
    directive_fn = None
    y_des_mode = "random"
    fixed = None
    if args.llm in ("stub", "remote"):
        directive_fn = make_directive_fn(MemoryBank(),
                                         instruction=args.instruction,
                                         mode=args.llm, every=5)
    elif args.lane is not None:
        y_des_mode = "fixed"
        fixed = config.lane_center(args.lane)

    metrics, trajs = evaluate(params, config, n_episodes=args.episodes,
                              base_seed=seed, use_mask=(args.mask == "on"),
                              greedy=True, y_des_mode=y_des_mode,
                              fixed_y_des=fixed, directive_fn=directive_fn,
                              log_dir=args.log_dir)
    report = {
        "checkpoint": str(args.checkpoint),
        "scenario": config.to_dict(),
        "episodes": args.episodes,
        "seed": seed,
        "llm": args.llm,
        "instruction": args.instruction,
        "metrics": metrics,
    }
    if args.baselines:
        for kind in ("random", "keep_lane"):
            base_metrics, _ = evaluate_reference(kind, config,
                                                 n_episodes=args.episodes,
                                                 base_seed=seed)
            report[f"baseline_{kind}"] = base_metrics

    text = json.dumps(_sanitize(report), indent=2,
                      default=_json_default) + "\n"
    if args.report:
        path = Path(args.report)
        path.parent.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(
            command="eval",
            args={"checkpoint": str(args.checkpoint),
                  "episodes": args.episodes, "llm": args.llm},
            scenario=config.to_dict(), seed=seed,
            outputs=[path.name],
        )
        mpath = path.with_suffix(path.suffix + ".manifest.json")
        manifest.write(mpath)
        path.write_text(text)
        manifest.finish(mpath)
    else:
        print(text, end="")
    return EXIT_OK


def _json_default(value):
    raise TypeError(f"not JSON serializable: {value!r}")


def _sanitize(value):
    """Replace non-finite floats so reports stay valid JSON."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _sanitize(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_sanitize(v) for v in value]
    return value


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------

def cmd_replay(args: argparse.Namespace) -> int:
    from .episode import replay_episode

    path = Path(args.log)
    if not path.exists():
        return _fail_usage(f"log not found: {path}")
    report = replay_episode(path)
    if report.ok:
        print(f"PASS {path} ({report.substeps_checked} substeps verified)")
        return EXIT_OK
    where = (f" first divergence at substep {report.first_divergence}"
             if report.first_divergence is not None else "")
    print(f"FAIL {path}{where}: {report.detail}")
    return EXIT_FAIL


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------

def cmd_serve(args: argparse.Namespace) -> int:
    try:
        params, extra = load_checkpoint(args.checkpoint)
    except BadCheckpoint as exc:
        return _fail_usage(f"bad checkpoint {args.checkpoint}: {exc}")
    try:
        if args.scenario:
            config = _load_config(args.scenario, args.seed)
        elif "scenario" in extra:
            config = ScenarioConfig.from_dict(extra["scenario"])
        else:
            return _fail_usage("no --scenario and checkpoint stores none")
    except InvalidConfig as exc:
        return _fail_usage(str(exc))
    if args.speed <= 0:
        return _fail_usage("--speed must be positive")

    from .serve import run_server

    return run_server(params, config, host=args.host, port=args.port,
                      base_seed=args.seed if args.seed is not None else 0,
                      llm_mode=args.llm, speed=args.speed)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fastslow",
        description="Two-speed driving stack: train, evaluate, replay, serve.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy on a scenario")
    p.add_argument("--scenario", required=True,
                   help="preset name or TOML file")
    p.add_argument("--steps", type=int, default=20_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--mask", choices=("on", "off"), default="on")
    p.add_argument("--batch-steps", type=int, default=BATCH_STEPS,
                   help="decision steps per policy update")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", default=None)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--llm", choices=("stub", "remote", "off"), default="off")
    p.add_argument("--instruction", default="")
    p.add_argument("--lane", type=int, default=None,
                   help="fixed desired lane (llm off)")
    p.add_argument("--mask", choices=("on", "off"), default="on")
    p.add_argument("--baselines", action="store_true",
                   help="also evaluate random/keep-lane references")
    p.add_argument("--report", default=None, help="write JSON report here")
    p.add_argument("--log-dir", default=None,
                   help="write per-episode JSONL logs here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("replay", help="verify an episode log replays exactly")
    p.add_argument("log")
    p.set_defaults(fn=cmd_replay)

    p = sub.add_parser("serve", help="stream live episodes over a websocket")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8700)
    p.add_argument("--llm", choices=("stub", "remote"), default="stub")
    p.add_argument("--speed", type=float, default=1.0,
                   help="real-time factor for the frame stream")
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
