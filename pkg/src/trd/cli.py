"""Command-line entry point: ``trd <command> --config run.ini [options]``.

Commands write their outputs into ``--out`` (default from the config) and
finish with an atomically written ``manifest.json``.  Exit status is 0 only
when every requested output was written; 1 means a verification failed,
2 a configuration problem and 3 unreadable or mismatched input files.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, explain, oracle
from .config import FORMATS, ConfigError, RunConfig, load_config
from .envs import MdpSpec, reset, step
from .estimators import NeuralTrd, QNetwork, ShapeError, TabularTrd, greedy_action, predict_vector
from .learner import (
    CURVE_COLUMNS,
    ReplayBuffer,
    TrainingDivergedError,
    retrain_trd,
    train_teacher,
    trd_bellman_residual,
)
from .persistence import WeightFileError, atomic_write_bytes, file_digest, load_estimator, save_estimator

log = logging.getLogger("trd")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_INPUT = 0, 1, 2, 3


class InputError(Exception):
    """Input files that cannot be read or do not match the configured environment."""


# ---------------------------------------------------------------------------
# helpers


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Run:
    """Collects artifacts and metrics for one command and writes the manifest."""

    def __init__(self, command: str, cfg: RunConfig):
        self.command, self.cfg = command, cfg
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.started = _now()
        self.artifacts: list[Path] = []
        self.evaluations: list[dict] = []
        self.extra: dict = {}
        self.weights: Path | None = None

    def path(self, name: str) -> Path:
        return self.out / name

    def add(self, path: Path) -> Path:
        if not path.exists():
            raise OSError(f"expected output {path} was not written")
        self.artifacts.append(path)
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self.path(name)
        atomic_write_bytes(path, text.encode())
        return self.add(path)

    def finish(self) -> Path:
        manifest = {
            "command": self.command,
            "tool_version": __version__,
            "config": self.cfg.to_dict(),
            "seed": self.cfg.seed,
            "started": self.started,
            "finished": _now(),
            "evaluations": self.evaluations,
            "artifacts": [{"path": p.name, "sha256": file_digest(p)} for p in self.artifacts],
            "weights": None if self.weights is None else {"path": self.weights.name,
                                                          "sha256": file_digest(self.weights)},
            **self.extra,
        }
        path = self.path("manifest.json")
        atomic_write_bytes(path, (json.dumps(manifest, indent=2, default=_jsonable) + "\n").encode())
        return path


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _load_weights(path: str):
    try:
        return load_estimator(path)
    except WeightFileError as exc:
        raise InputError(str(exc)) from None


def _check_shapes(est, spec: MdpSpec, cfg: RunConfig, what: str) -> None:
    if isinstance(est, TabularTrd):
        if est.num_states != spec.num_states or est.num_actions != spec.num_actions:
            raise ShapeError(f"{what}: table has {est.num_states} states x {est.num_actions} actions, "
                             f"environment has {spec.num_states} x {spec.num_actions}")
    elif est.obs_dim != spec.obs_dim or est.num_actions != spec.num_actions:
        raise ShapeError(f"{what}: network expects obs_dim={est.obs_dim}, {est.num_actions} actions; "
                         f"environment has obs_dim={spec.obs_dim}, {spec.num_actions} actions")
    if isinstance(est, (TabularTrd, NeuralTrd)) and (est.n, est.w) != (cfg.train.n, cfg.train.w):
        raise ShapeError(f"{what}: estimator has n={est.n}, w={est.w} but the config asks for "
                         f"n={cfg.train.n}, w={cfg.train.w}")


def _inputs(est, spec: MdpSpec, states) -> np.ndarray:
    states = np.asarray(states, dtype=int)
    if isinstance(est, TabularTrd):
        return states
    return spec.observations()[states]


def _initial_state(spec: MdpSpec) -> int:
    return int(np.argmax(spec.initial))


# ---------------------------------------------------------------------------
# commands


def cmd_train_teacher(args, cfg: RunConfig) -> int:
    spec = cfg.make_env()
    run = Run("train-teacher", cfg)
    result = train_teacher(spec, cfg.train)
    run.weights = run.add(save_estimator(result.net, run.path("teacher.trdw")))
    run.add(run.path("teacher.trdw.json"))
    run.add(result.buffer.save(run.path("teacher_buffer.npz")))
    run.evaluations = result.trace
    run.write_text("teacher_trace.csv", _csv_text(
        ["step", "mean_return", "loss"],
        [[r["step"], _fmt(r["mean_return"]), _fmt(r["loss"])] for r in result.trace]))
    states = np.flatnonzero(spec.initial > 0)
    acts = greedy_action(result.net, spec.observations()[states])
    run.extra["final_mean_return"] = result.mean_return
    run.extra["greedy_actions"] = {spec.state_names[s]: spec.action_names[int(a)] for s, a in zip(states, acts)}
    run.finish()
    print(f"teacher return {result.mean_return:.4f}; greedy actions {run.extra['greedy_actions']}")
    return EXIT_OK


def cmd_retrain_trd(args, cfg: RunConfig) -> int:
    spec = cfg.make_env()
    teacher = _load_weights(args.teacher)
    if not isinstance(teacher, QNetwork):
        raise InputError(f"{args.teacher}: expected a scalar Q teacher, found {teacher.kind}")
    _check_shapes(teacher, spec, cfg, "teacher")
    try:
        buffer = ReplayBuffer.load(args.buffer)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if buffer.obs_dim != spec.obs_dim:
        raise ShapeError(f"teacher buffer obs_dim={buffer.obs_dim} != environment obs_dim={spec.obs_dim}")
    run = Run("retrain-trd", cfg)
    result = retrain_trd(teacher, spec, cfg.train, teacher_buffer=buffer)
    run.weights = run.add(save_estimator(result.estimator, run.path("trd.trdw")))
    run.add(run.path("trd.trdw.json"))
    run.evaluations = result.curves
    run.write_text("curves.csv", _csv_text(CURVE_COLUMNS, [[_fmt(r[c]) for c in CURVE_COLUMNS] for r in result.curves]))
    if "svg" in _formats(args, cfg):
        from .plotting import render_curves

        run.add(render_curves(result.curves, run.path("curves.svg"),
                              title=f"{spec.name}, n={cfg.train.n}, w={cfg.train.w}"))
    run.extra["teacher_return"] = result.teacher_return
    run.extra["horizon"] = cfg.train.n * cfg.train.w
    run.finish()
    last = result.curves[-1]
    print(f"final normalized return {last['normalized_return']:.4f}; q_mse {last['q_mse']:.4g}")
    return EXIT_OK


def cmd_oracle(args, cfg: RunConfig) -> int:
    """Write exact tabular reward vectors under the optimal policy (a reference weight file)."""
    spec = cfg.make_env()
    run = Run("oracle", cfg)
    policy = oracle.optimal_policy(spec, cfg.train.gamma)
    table = oracle.exact_trd_q(spec, policy, cfg.train.gamma, cfg.train.n, cfg.train.w)
    run.weights = run.add(save_estimator(TabularTrd.from_value_table(table), run.path("oracle.trdw")))
    run.add(run.path("oracle.trdw.json"))
    run.add(table.to_csv(run.path("oracle.csv"), spec.state_names, spec.action_names))
    run.finish()
    print(f"oracle table for {spec.name}: {spec.num_states} states, n={cfg.train.n}, w={cfg.train.w}")
    return EXIT_OK


def verify_metrics(est, spec: MdpSpec, cfg: RunConfig, scope: str = "all") -> dict:
    _check_shapes(est, spec, cfg, "weights")
    gamma = cfg.train.gamma
    if abs(est.gamma - gamma) > 1e-12:
        raise ShapeError(f"weights were trained with gamma={est.gamma}, config has gamma={gamma}")
    n, w = est.n, est.w
    policy = oracle.optimal_policy(spec, gamma)
    ref = oracle.exact_trd_q(spec, policy, gamma, n, w).vectors
    q = oracle.exact_q(spec, policy, gamma)
    states = spec.reachable_states()
    full = np.zeros_like(ref)
    full[states] = predict_vector(est, _inputs(est, spec, states))
    pred = full[states]
    if scope == "greedy":
        acts = np.argmax(policy[states], axis=1)
        pred = pred[np.arange(len(states)), acts][:, None]
        want, want_q = ref[states, acts][:, None], q[states, acts][:, None]
    else:
        want, want_q = ref[states], q[states]
    return {
        "states": len(states),
        "max_elementwise_error": float(np.max(np.abs(pred - want))),
        "max_scalar_error": float(np.max(np.abs(pred.sum(-1) - want_q))),
        "oracle_sum_residual": float(np.max(np.abs(ref.sum(-1) - q))),
        "estimator_fixed_point_residual": trd_bellman_residual(full, spec, policy, gamma, w),
    }


def cmd_verify(args, cfg: RunConfig) -> int:
    spec = cfg.make_env()
    est = _load_weights(args.weights)
    if isinstance(est, QNetwork):
        raise InputError(f"{args.weights}: verify needs a reward-vector estimator, found a scalar Q network")
    metrics = verify_metrics(est, spec, cfg, args.scope)
    thresholds = {"max_elementwise_error": args.tolerance, "oracle_sum_residual": 1e-9}
    rows = []
    for key, value in metrics.items():
        limit = thresholds.get(key)
        ok = "" if limit is None else ("pass" if value < limit else "fail")
        rows.append([key, _fmt(value), "" if limit is None else _fmt(limit), ok])
    passed = all(r[3] != "fail" for r in rows)
    text = _csv_text(["metric", "value", "threshold", "status"], rows)
    run = Run("verify", cfg)
    run.write_text("verify.csv", text)
    run.evaluations = [dict(metrics, passed=passed, scope=args.scope)]
    run.finish()
    sys.stdout.write(text)
    print("PASS" if passed else "FAIL")
    return EXIT_OK if passed else EXIT_FAILED


def _formats(args, cfg: RunConfig) -> tuple[str, ...]:
    if args.format:
        fmts = tuple(f.strip().lower() for f in args.format.split(",") if f.strip())
        bad = [f for f in fmts if f not in FORMATS]
        if bad:
            raise ConfigError(f"--format: unsupported {bad}; expected a subset of {FORMATS}")
        return fmts
    return cfg.explain.formats


def _episode_states(est, spec: MdpSpec, seed: int) -> list[tuple[int, int]]:
    env, _ = reset(spec, seed)
    visited = []
    while not env.done:
        s = env.current_state
        a = int(greedy_action(est, _inputs(est, spec, [s])[0] if not isinstance(est, TabularTrd) else s))
        visited.append((s, a))
        step(env, a)
    return visited


def cmd_explain(args, cfg: RunConfig) -> int:
    spec = cfg.make_env()
    est = _load_weights(args.weights)
    if isinstance(est, QNetwork):
        raise InputError(f"{args.weights}: explanations need a reward-vector estimator")
    _check_shapes(est, spec, cfg, "weights")
    fmts = _formats(args, cfg)
    run = Run("explain", cfg)
    actions = [spec.action_index(a) for a in args.actions.split(",")] if args.actions else list(cfg.explain.actions)
    elements = [int(k) for k in args.elements.split(",")] if args.elements else list(cfg.explain.elements)

    def emit(artifact, stem: str) -> None:
        for fmt in fmts:
            run.add(explain.export_artifact(artifact, run.path(f"{stem}.{fmt}"), fmt))

    if args.episode:
        if args.kind not in ("timeline", "confidence"):
            raise ConfigError("--episode works with the timeline and confidence kinds")
        timelines = []
        for s, a in _episode_states(est, spec, cfg.seed):
            obs = _inputs(est, spec, [s])[0]
            if args.kind == "timeline":
                timelines.append(explain.reward_timeline(est, obs, a, state=spec.state_names[s]))
            else:
                timelines.append(explain.confidence_timeline(est, obs, spec.binary_reward_value, a,
                                                             state=spec.state_names[s]))
        path = run.path(f"episode_{args.kind}.csv")
        explain.export_episode_timelines(timelines, path)
        run.add(path)
        run.finish()
        print(f"{len(timelines)} timelines written to {path}")
        return EXIT_OK

    s = spec.state_index(args.state) if args.state is not None else _initial_state(spec)
    obs = _inputs(est, spec, [s])[0]
    name = spec.state_names[s]
    action = actions[0] if actions else None
    if args.kind == "timeline":
        emit(explain.reward_timeline(est, obs, action, state=name), f"timeline_{name}")
    elif args.kind == "confidence":
        emit(explain.confidence_timeline(est, obs, spec.binary_reward_value, action, state=name), f"confidence_{name}")
    elif args.kind == "saliency":
        maps = [explain.element_saliency(est, obs, k, action) for k in elements]
        for k, m in zip(elements, maps):
            emit(m, f"saliency_{name}_element{k}")
        if len(maps) >= 2:
            emit(explain.saliency_diff(maps[-1], maps[0]), f"saliency_{name}_diff{elements[-1]}-{elements[0]}")
    else:
        if len(actions) < 2:
            a = greedy_action(est, obs)
            actions = [a, 1 - a] if spec.num_actions == 2 else [a, (a + 1) % spec.num_actions]
        res = explain.contrast_actions(est, obs, actions[0], actions[1], state=name)
        emit(res, f"contrast_{name}_{spec.action_names[actions[0]]}-{spec.action_names[actions[1]]}")
    run.finish()
    for p in run.artifacts:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="INI run configuration")
    common.add_argument("--out", help="output directory (overrides run.out)")
    common.add_argument("--seed", type=int, help="root seed (overrides run.seed)")
    common.add_argument("--format", help="comma-separated artifact formats: csv, json, svg")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = argparse.ArgumentParser(prog="trd", description="Reward-vector training, verification and explanations.")
    parser.add_argument("--version", action="version", version=f"trd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", parents=[common], help="train a scalar DQN teacher")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("retrain-trd", parents=[common], help="retrain a reward-vector student from a teacher")
    p.add_argument("--teacher", required=True, help="teacher weight file")
    p.add_argument("--buffer", required=True, help="teacher replay buffer (.npz)")
    p.set_defaults(func=cmd_retrain_trd)

    p = sub.add_parser("oracle", parents=[common], help="write exact tabular reward vectors")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("verify", parents=[common], help="compare weights against the exact oracle")
    p.add_argument("--weights", required=True)
    p.add_argument("--tolerance", type=float, default=0.05, help="max elementwise error for a pass")
    p.add_argument("--scope", choices=("all", "greedy"), default="all",
                   help="compare every action or only the optimal one at each reachable state")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("explain", parents=[common], help="export explanation artifacts")
    p.add_argument("--weights", required=True)
    p.add_argument("--kind", choices=("timeline", "confidence", "saliency", "contrast"), required=True)
    p.add_argument("--state", help="state index or name (default: the most likely initial state)")
    p.add_argument("--episode", action="store_true", help="one timeline per state of a greedy episode")
    p.add_argument("--actions", help="comma-separated actions (overrides explain.actions)")
    p.add_argument("--elements", help="comma-separated reward-vector elements (overrides explain.elements)")
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(seed=args.seed, out=args.out)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, ShapeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except explain.ExplanationError as exc:
        print(f"explain error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
