"""Command-line front end: ``python -m bayestwin <command> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import coma, harness, monitor
from .dynmodel import (BAYES_PRIOR, FREQ_PRIOR, ModelStructure, learn, load_posterior, map_estimate,
                       sample_parameters, save_posterior)
from .env import EnvState, load_config, default_config, stack_transitions, write_trajectory_csv


def _env(args):
    return load_config(args.config) if args.config else default_config()


def _model(args, path):
    if path is None or args.backend == "oracle":
        return _env(args)
    post = load_posterior(path)
    return map_estimate(post) if args.backend == "frequentist-map" else post


def _emit(obj, out) -> None:
    text = json.dumps(obj, indent=1)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def cmd_collect(args) -> int:
    config = _env(args)
    data = harness.collect_random(config, args.steps, args.seed)
    out = Path(args.out or "dataset.json")
    harness.save(data, out)
    if data:
        write_trajectory_csv(data, out.with_suffix(".csv"))
    print(f"wrote {len(data)} transitions to {out}")
    return 0


def cmd_learn(args) -> int:
    config = _env(args)
    data = harness.load(args.data, "dataset")
    prior = FREQ_PRIOR if args.backend == "frequentist-map" else BAYES_PRIOR
    post = learn(ModelStructure.from_env(config, memoryless=config.memoryless), data, prior)
    out = Path(args.out or "posterior.json")
    save_posterior(post, out)
    print(f"wrote posterior ({len(data)} transitions, prior {prior}) to {out}")
    return 0


def cmd_train(args) -> int:
    config = _env(args)
    cfg = coma.TrainConfig(**{**harness.DESK_TRAIN, **({"iterations": args.iterations} if args.iterations else {})})
    pol = coma.train(_model(args, args.model), coma.control_reward(config), cfg, np.random.default_rng(args.seed))
    out = Path(args.out or "policy.bin")
    pol.save(out)
    coma.write_history_csv(pol, out.with_suffix(".history.csv"))
    print(f"wrote policy to {out}")
    return 0


def cmd_evaluate(args) -> int:
    ev = coma.evaluate(coma.PolicySet.load(args.policy), _env(args), np.random.default_rng(args.seed),
                       args.episodes, args.steps)
    _emit({"throughput": ev.throughput, "overflow": ev.overflow, "reward": ev.reward,
           "units": harness.THROUGHPUT_UNITS}, args.out)
    return 0


def cmd_detect(args) -> int:
    config = _env(args)
    D = stack_transitions(harness.load(args.data, "dataset"), config.K)
    factors = tuple(args.factors.split(",")) if args.factors else None
    post = load_posterior(args.model)
    if args.backend == "frequentist-map":
        scores = -monitor.ll_matrix([map_estimate(post)], D, factors)[0]
        scores = scores[: len(scores) // args.window * args.window].reshape(-1, args.window).sum(axis=1)
    else:
        rng = np.random.default_rng(args.seed)
        draws = [sample_parameters(post, rng) for _ in range(args.samples)]
        scores = monitor.window_scores(draws, D, args.window, factors)
    _emit({"backend": args.backend, "window": args.window, "scores": scores.tolist()}, args.out)
    return 0


def cmd_predict(args) -> int:
    config = _env(args)
    q, g, d = (tuple(int(x) for x in part.split(",")) for part in args.start.split(";"))
    model = _model(args, args.model)
    n_models = args.models if args.backend == "bayesian" else 1
    task = monitor.PredictionTask(EnvState(q, g, d, 0), coma.PolicySet.load(args.policy), args.horizon,
                                  n_models, args.traj)
    pred = monitor.predict_metric(task, model, np.random.default_rng(args.seed))
    _emit({"backend": args.backend, "horizon": args.horizon, "K": config.K, "probs": pred.probs.tolist(),
           "mean": pred.mean, "p_at_least_1": pred.event(1)}, args.out)
    return 0


def _run(cfg: harness.ExperimentConfig) -> int:
    rec = harness.run_experiment(cfg)
    print(json.dumps({"kind": rec.kind, "config_hash": rec.config_hash, "summary": rec.summary,
                      "errors": rec.errors}, indent=1))
    return 1 if rec.errors else 0


def _exp_config(args, kind: str) -> harness.ExperimentConfig:
    over = {"kind": kind, "out": args.out, "seeds": [args.seed] if args.seed is not None else None}
    if args.config:
        return harness.load_experiment_config(args.config, **over)
    return harness.ExperimentConfig(**{k: v for k, v in over.items() if v is not None})


def cmd_explore(args) -> int:
    return _run(_exp_config(args, "exploration"))


def cmd_experiment(args) -> int:
    return _run(_exp_config(args, args.kind))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config (environment, or experiment for experiment/explore)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--backend", default="bayesian", choices=["bayesian", "frequentist-map", "oracle"])

    p = argparse.ArgumentParser(prog="bayestwin", description="Bayesian digital twin of a multi-access network")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("collect", parents=[common], help="log transitions under the random collection policy")
    s.add_argument("--steps", type=int, default=100)
    s.set_defaults(fn=cmd_collect)

    s = sub.add_parser("learn", parents=[common], help="Dirichlet posterior from a dataset")
    s.add_argument("--data", required=True)
    s.set_defaults(fn=cmd_learn)

    s = sub.add_parser("train", parents=[common], help="train actors on a posterior, MAP model or the true system")
    s.add_argument("--model", help="posterior JSON (omit for the oracle)")
    s.add_argument("--iterations", type=int)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="throughput and overflow on the true system")
    s.add_argument("--policy", required=True)
    s.add_argument("--episodes", type=int, default=20)
    s.add_argument("--steps", type=int, default=200)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("detect", parents=[common], help="anomaly scores for consecutive windows of a dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--window", type=int, default=1)
    s.add_argument("--samples", type=int, default=20)
    s.add_argument("--factors", help="comma-separated factor names, e.g. gen0")
    s.set_defaults(fn=cmd_detect)

    s = sub.add_parser("predict", parents=[common], help="predictive distribution of the overflow count")
    s.add_argument("--model", help="posterior JSON (omit for the oracle)")
    s.add_argument("--policy", required=True)
    s.add_argument("--start", required=True, help="'q1,..,qK;g1,..,gK;d1,..,dK'")
    s.add_argument("--horizon", type=int, default=4)
    s.add_argument("--models", type=int, default=20)
    s.add_argument("--traj", type=int, default=100)
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("explore", parents=[common], help="random versus information-seeking collection rounds")
    s.set_defaults(fn=cmd_explore)

    s = sub.add_parser("experiment", parents=[common], help="run one experiment pipeline")
    s.add_argument("kind", choices=list(harness.KINDS))
    s.set_defaults(fn=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is None and args.command not in ("experiment", "explore"):
        args.seed = 0
    try:
        return args.fn(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
