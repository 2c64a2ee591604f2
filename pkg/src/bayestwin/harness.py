"""Experiment plumbing: configuration, data collection, the four pipelines
(control, anomaly, prediction, exploration) and artifact persistence.

Every random stream is derived from ``(seed, tag, ...)`` through
``numpy.random.SeedSequence``, so backends that should be compared on the
same seed see the same collected data, the same training stream and the same
evaluation stream.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
import traceback
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from . import coma, monitor
from .coma import PolicySet, TrainConfig
from .dynmodel import (
    BAYES_PRIOR,
    FREQ_PRIOR,
    FactoredPosterior,
    ModelStructure,
    collapsed_posterior,
    learn,
    load_posterior,
    map_estimate,
    sample_parameters,
    save_posterior,
)
from .env import (
    AnomalySpec,
    EnvConfig,
    EnvRng,
    EnvState,
    MultiAccessEnv,
    Transition,
    TransitionArrays,
    assemble_state,
    inject_anomaly,
    load_config,
    observe,
    default_config,
    stack_transitions,
    truth_tables,
)

FORMAT_VERSION = 1
KINDS = ("control", "anomaly", "prediction", "exploration")
BACKENDS = ("bayesian", "frequentist-map", "oracle", "collapsed")
EVAL_PROTOCOL = "ground-truth episodes x steps per trained policy, actions sampled from the policy"
THROUGHPUT_UNITS = "packets delivered per step, whole system"

# Reduced actor/critic and iteration budget for desk-scale runs.
DESK_TRAIN = dict(iterations=250, critic_hidden=(64, 64), actor_hidden=(32, 32), n_critic=2, actor_lr=2e-3)
EXPLORE_TRAIN = dict(DESK_TRAIN, reward_scale=0.1, random_start=True)


class ArtifactError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    kind: str = "control"
    env: str | dict | None = None
    seeds: list[int] = field(default_factory=lambda: list(range(20)))
    backends: list[str] = field(default_factory=lambda: ["bayesian", "frequentist-map", "oracle"])
    T_grid: list[int] = field(default_factory=lambda: [10, 20])
    T_anomaly: list[int] = field(default_factory=lambda: [20, 50])
    T: int = 100
    T_M: int = 1
    T_H: int = 10
    rounds: int = 4
    T_d: int = 5
    windows: int = 2000
    burn_in: int = 20
    n_samples: int = 20
    anomaly_device: int = 1
    start_states: int = 50
    n_models: int = 20
    n_traj: int = 100
    gt_outcomes: int = 100
    event: str = "mode"
    event_threshold: int = 1
    bins: int = 10
    reliability_lag: int = 4
    eval_episodes: int = 20
    eval_steps: int = 200
    policy_seed: int = 12345
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**DESK_TRAIN))
    explore_train: TrainConfig = field(default_factory=lambda: TrainConfig(**EXPLORE_TRAIN))
    workers: int = 1
    out: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if isinstance(self.explore_train, dict):
            self.explore_train = TrainConfig(**self.explore_train)
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        bad = [b for b in self.backends if b not in BACKENDS]
        if bad:
            raise ValueError(f"unknown backends {bad}")
        sizes = {"T": self.T, "T_M": self.T_M, "T_H": self.T_H, "rounds": self.rounds, "T_d": self.T_d,
                 "windows": self.windows, "n_samples": self.n_samples, "start_states": self.start_states,
                 "n_models": self.n_models, "n_traj": self.n_traj, "gt_outcomes": self.gt_outcomes,
                 "eval_episodes": self.eval_episodes, "eval_steps": self.eval_steps}
        for k, v in sizes.items():
            if v < 1:
                raise ValueError(f"{k} must be positive")
        if self.event not in ("mode", "threshold"):
            raise ValueError("event must be 'mode' or 'threshold'")
        if any(t < 0 for t in self.T_grid) or any(t < 0 for t in self.T_anomaly):
            raise ValueError("dataset sizes must be non-negative")

    def env_config(self) -> EnvConfig:
        if self.env is None:
            return default_config()
        if isinstance(self.env, dict):
            return EnvConfig.from_dict(self.env)
        return load_config(self.env)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        d["explore_train"] = self.explore_train.to_dict()
        d["env"] = self.env_config().to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown experiment config keys {sorted(extra)}")
        return cls(**d)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out", None)
        d.pop("workers", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def load_experiment_config(path: str | Path, **overrides) -> ExperimentConfig:
    with open(path) as fh:
        d = yaml.safe_load(fh) or {}
    if isinstance(d.get("env"), str):
        d["env"] = str((Path(path).parent / d["env"]).resolve())
    d.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(d)


@dataclass
class ExperimentRecord:
    kind: str
    config: dict
    config_hash: str
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    artifacts: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.errors

    def select(self, **match) -> list[dict]:
        return [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]

    def values(self, metric: str, **match) -> np.ndarray:
        """Metric over matching rows, ordered by seed."""
        rows = sorted(self.select(**match), key=lambda r: r["seed"])
        return np.array([r[metric] for r in rows], dtype=float)

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRecord":
        _check_version(d, "experiment record")
        d = dict(d)
        d.pop("format_version")
        d["errors"] = {int(k): v for k, v in d.get("errors", {}).items()}
        return cls(**d)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ExperimentRecord):
            return NotImplemented
        return json.dumps(self.to_dict(), sort_keys=True) == json.dumps(other.to_dict(), sort_keys=True)


def _check_version(d: dict, what: str) -> None:
    if not isinstance(d, dict) or d.get("format_version") != FORMAT_VERSION:
        got = d.get("format_version") if isinstance(d, dict) else None
        raise ArtifactError(f"unsupported {what} format version {got!r} (expected {FORMAT_VERSION})")


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

def _tag(x) -> int:
    return zlib.crc32(x.encode()) if isinstance(x, str) else int(x)


def stream(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(_tag(t) for t in tags)]))


def stream_seed(seed: int, *tags) -> int:
    return int(stream(seed, *tags).integers(0, 2**63))


# ---------------------------------------------------------------------------
# data collection
# ---------------------------------------------------------------------------

class RandomCollectionPolicy:
    """Each step draws one ``q_t ~ U[0, 1]`` and every agent transmits with it."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def __call__(self, q, g, d, t, rng=None) -> np.ndarray:
        q = np.asarray(q)
        return np.repeat(self.rng.random((q.shape[0], 1)), q.shape[1], axis=1)


def random_collection_policy(rng: np.random.Generator) -> RandomCollectionPolicy:
    return RandomCollectionPolicy(rng)


def transmit_probs(policy, q, g, d, t: int, rng: np.random.Generator) -> np.ndarray:
    """``P(a=1)`` for a batch; zero where the buffer is empty."""
    q = np.asarray(q)
    if isinstance(policy, PolicySet):
        return policy.transmit_probs(q, g, d, np.full(q.shape[0], t % policy.L))
    return np.where(q > 0, policy(q, g, d, t, rng), 0.0)


def collect(env: MultiAccessEnv, policy, T: int, rng: np.random.Generator) -> list[Transition]:
    """Run ``policy`` on the physical system for ``T`` steps.

    Each agent only reports its local observation; the joint state is
    reassembled from the reports before the policy is queried.
    """
    if T < 0:
        raise ValueError("T must be non-negative")
    K = env.config.K
    out = []
    for _ in range(T):
        s = assemble_state([observe(env.state, k) for k in range(K)], K)
        q, g, d = s.arrays()
        p1 = transmit_probs(policy, q[None], g[None], d[None], s.t, rng)[0]
        a = (rng.random(K) < p1).astype(int)
        out.append(env.step(a))
    return out


def collect_random(config: EnvConfig, T: int, seed: int) -> list[Transition]:
    env = MultiAccessEnv(config, stream_seed(seed, "pt"))
    return collect(env, random_collection_policy(stream(seed, "pi_d")), T, stream(seed, "act"))


def build_source(backend: str, data, config: EnvConfig):
    """Model source used to train or predict for ``backend``."""
    structure = ModelStructure.from_env(config, memoryless=config.memoryless)
    if backend == "bayesian":
        return learn(structure, data, BAYES_PRIOR)
    if backend == "frequentist-map":
        return map_estimate(learn(structure, data, FREQ_PRIOR))
    if backend == "oracle":
        return config
    if backend == "collapsed":
        return collapsed_posterior(config)
    raise ValueError(f"unknown backend {backend!r}")


def _summarise(rows: list[dict], keys: Sequence[str], metrics: Sequence[str]) -> dict:
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = {}
    for key, rs in sorted(groups.items(), key=lambda kv: tuple(str(x) for x in kv[0])):
        entry = {"n": len(rs)}
        for m in metrics:
            v = np.array([r[m] for r in rs], dtype=float)
            entry[m] = float(v.mean())
            entry[f"{m}_se"] = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
        out["/".join(str(k) for k in key)] = entry
    return out


def _run_seeds(fn: Callable, cfg: ExperimentConfig, shared) -> tuple[list[dict], dict, dict]:
    """Run ``fn(cfg, seed, shared)`` per seed; failures are recorded, not raised."""
    rows, extras, errors = [], {}, {}

    def absorb(seed, res):
        if isinstance(res, BaseException) or isinstance(res, str):
            errors[seed] = res if isinstance(res, str) else repr(res)
        else:
            r, x = res
            rows.extend(r)
            if x:
                extras[str(seed)] = x

    if cfg.workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            futs = [(s, ex.submit(_guarded, fn, cfg, s, shared)) for s in cfg.seeds]
            for s, f in futs:
                absorb(s, f.result())
    else:
        for s in cfg.seeds:
            absorb(s, _guarded(fn, cfg, s, shared))
    return rows, extras, errors


def _guarded(fn, cfg, seed, shared):
    try:
        return fn(cfg, seed, shared)
    except Exception:  # noqa: BLE001  (per-seed isolation)
        return traceback.format_exc(limit=4)


def _finish(cfg: ExperimentConfig, rows, extras, errors, summary, t0, meta=None, artifacts=None) -> ExperimentRecord:
    rec = ExperimentRecord(cfg.kind, cfg.to_dict(), cfg.config_hash(), rows, summary, extras, errors,
                           time.time() - t0, artifacts or {}, {"eval_protocol": EVAL_PROTOCOL,
                                                               "eval_episodes": cfg.eval_episodes,
                                                               "eval_steps": cfg.eval_steps,
                                                               "throughput_units": THROUGHPUT_UNITS, **(meta or {})})
    if cfg.out:
        write_outputs(rec, cfg.out)
    return rec


def _evaluate(policy, config: EnvConfig, cfg: ExperimentConfig, seed: int, *tags) -> coma.Evaluation:
    return coma.evaluate(policy, config, stream(seed, "eval", *tags), cfg.eval_episodes, cfg.eval_steps)


# ---------------------------------------------------------------------------
# control
# ---------------------------------------------------------------------------

def _control_seed(cfg: ExperimentConfig, seed: int, shared):
    config = cfg.env_config()
    reward = coma.control_reward(config)
    data = collect_random(config, max(cfg.T_grid, default=0), seed)
    rows = []
    fixed = {}
    for backend in cfg.backends:
        for T in cfg.T_grid:
            if backend in ("oracle", "collapsed") and backend in fixed:
                ev = fixed[backend]
            else:
                src = build_source(backend, data[:T], config)
                pol = coma.train(src, reward, cfg.train, stream(seed, "train"))
                ev = _evaluate(pol, config, cfg, seed)
                if backend in ("oracle", "collapsed"):
                    fixed[backend] = ev
            rows.append({"seed": seed, "T": T, "backend": backend, "throughput": ev.throughput,
                         "overflow": ev.overflow, "reward": ev.reward})
    return rows, None


def run_control_experiment(cfg: ExperimentConfig) -> ExperimentRecord:
    """Collect, learn, train and evaluate for every dataset size and backend."""
    t0 = time.time()
    rows, extras, errors = _run_seeds(_control_seed, cfg, None)
    summary = _summarise(rows, ("T", "backend"), ("throughput", "overflow", "reward"))
    return _finish(cfg, rows, extras, errors, summary, t0)


# ---------------------------------------------------------------------------
# anomaly detection
# ---------------------------------------------------------------------------

def monitoring_windows(policy, config: EnvConfig, n: int, T_M: int, burn_in: int,
                       rng: np.random.Generator) -> TransitionArrays:
    """``n`` independent windows of ``T_M`` transitions, window-major.

    Each window is the tail of a fresh episode run for ``burn_in`` steps first.
    """
    structure = ModelStructure.from_env(config, memoryless=config.memoryless)
    erng = EnvRng(*(np.random.default_rng(x) for x in rng.integers(0, 2**63, size=2)))
    H = burn_in + T_M
    zero = lambda *args: 0.0  # noqa: E731
    ro = coma.rollout(policy, truth_tables(config), structure, n, H, zero, rng, erng)
    sl = slice(burn_in, H)
    sl2 = slice(burn_in + 1, H + 1)
    f = lambda x: np.swapaxes(x, 0, 1).reshape(n * T_M, -1)  # noqa: E731
    a = np.where(ro.q[sl] > 0, ro.a[sl], 0)
    t = np.tile(np.arange(burn_in, H), n)
    return TransitionArrays(f(ro.q[sl]), f(ro.g[sl]), f(ro.d[sl]), f(a), f(ro.q[sl2]), f(ro.g[sl2]),
                            f(ro.d[sl2]), t, np.zeros(n * T_M))


def _anomaly_seed(cfg: ExperimentConfig, seed: int, policy):
    config = cfg.env_config()
    anomalous = inject_anomaly(config, AnomalySpec(cfg.anomaly_device))
    factors = (f"gen{config.cluster_of(cfg.anomaly_device)}",)
    data = collect_random(config, max(cfg.T_anomaly), seed)
    half = cfg.windows // 2
    wn = monitoring_windows(policy, config, half, cfg.T_M, cfg.burn_in, stream(seed, "windows", "normal"))
    wa = monitoring_windows(policy, anomalous, cfg.windows - half, cfg.T_M, cfg.burn_in,
                            stream(seed, "windows", "anomalous"))
    structure = ModelStructure.from_env(config, memoryless=config.memoryless)
    rows, curves = [], {}
    grid = np.linspace(0, 1, 101)
    for T in cfg.T_anomaly:
        post = learn(structure, data[:T], BAYES_PRIOR)
        rng = stream(seed, "ensemble", T)
        draws = [sample_parameters(post, rng) for _ in range(cfg.n_samples)]
        mapd = map_estimate(learn(structure, data[:T], FREQ_PRIOR))
        scores = {
            "bayesian": (monitor.window_scores(draws, wn, cfg.T_M, factors),
                         monitor.window_scores(draws, wa, cfg.T_M, factors)),
            "frequentist-map": tuple(-monitor.ll_matrix([mapd], w, factors)[0].reshape(-1, cfg.T_M).sum(axis=1)
                                     for w in (wn, wa)),
        }
        for backend, (sn, sa) in scores.items():
            pts, auc = monitor.roc_auc(sn, sa)
            rows.append({"seed": seed, "T": T, "backend": backend, "auc": auc})
            curves[f"{T}/{backend}"] = monitor.roc_on_grid(pts, grid).tolist()
    return rows, {"roc_tpr": curves}


def run_anomaly_experiment(cfg: ExperimentConfig, policy: PolicySet | None = None) -> ExperimentRecord:
    """Variance-of-likelihood versus point-likelihood detection of a
    disconnected device, one shared operating policy for all repetitions."""
    t0 = time.time()
    config = cfg.env_config()
    if policy is None:
        policy = coma.train(config, coma.control_reward(config), cfg.train, stream(cfg.policy_seed, "anomaly-policy"))
    rows, extras, errors = _run_seeds(_anomaly_seed, cfg, policy)
    summary = _summarise(rows, ("T", "backend"), ("auc",))
    for key, entry in summary.items():
        T, backend = key.split("/")
        v = np.array([r["auc"] for r in rows if str(r["T"]) == T and r["backend"] == backend])
        entry.update({f"q{int(p * 100)}": float(np.quantile(v, p)) for p in (0.1, 0.25, 0.75, 0.9)})
    grid = np.linspace(0, 1, 101)
    mean_roc = {}
    for key in summary:
        curves = [x["roc_tpr"][key] for x in extras.values() if key in x["roc_tpr"]]
        mean_roc[key] = np.mean(curves, axis=0).tolist()
    rec = _finish(cfg, rows, extras, errors, summary, t0,
                  meta={"variance_convention": monitor.VARIANCE_CONVENTION, "n_samples": cfg.n_samples,
                        "fpr_grid": grid.tolist(), "mean_roc": mean_roc})
    return rec


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def uniform_states(config: EnvConfig, n: int, rng: np.random.Generator):
    K = config.K
    q = rng.integers(0, np.asarray(config.q_max) + 1, size=(n, K))
    return q, rng.integers(0, 2, size=(n, K)), rng.integers(0, 2, size=(n, K))


def _prediction_seed(cfg: ExperimentConfig, seed: int, shared):
    config = cfg.env_config()
    data = collect_random(config, cfg.T, seed)
    post = build_source("bayesian", data, config)
    mapd = build_source("frequentist-map", data, config)
    policy = coma.train(post, coma.control_reward(config), cfg.train, stream(seed, "train"))
    starts = uniform_states(config, cfg.start_states, stream(seed, "starts"))
    H = cfg.T_H
    gt = monitor.overflow_paths(config, policy, starts, 1, cfg.gt_outcomes, H, stream(seed, "truth"))
    preds = {
        "bayesian": monitor.overflow_paths(post, policy, starts, cfg.n_models, cfg.n_traj, H, stream(seed, "bayes")),
        "frequentist-map": monitor.overflow_paths(mapd, policy, starts, 1, cfg.n_traj, H, stream(seed, "freq")),
    }
    thr = cfg.event_threshold
    size = config.K * H + 1
    rows, tables = [], {}
    for h in range(1, H + 1):
        tables[str(h)] = {}
        for backend, paths in preds.items():
            if cfg.event == "mode":
                n_m = cfg.n_models if backend == "bayesian" else 1
                probs = np.stack([monitor.distribution(p, n_m, size)[0] for p in paths[h - 1]])
                conf, corr = monitor.top_label_predictions(probs, gt[h - 1])
            else:
                p_event = (paths[h - 1] >= thr).mean(axis=1)
                conf, corr = monitor.binary_predictions(p_event, gt[h - 1] >= thr)
            e, table = monitor.ece((conf, corr), cfg.bins)
            rows.append({"seed": seed, "T_H": h, "backend": backend, "accuracy": float(corr.mean()), "ece": e,
                         "mean_confidence": float(conf.mean()), "mean_pred": float(paths[h - 1].mean()),
                         "mean_truth": float(gt[h - 1].mean())})
            tables[str(h)][backend] = table
    return rows, {"reliability": tables.get(str(cfg.reliability_lag), {}), "reliability_by_lag": tables}


def run_prediction_experiment(cfg: ExperimentConfig) -> ExperimentRecord:
    """Overflow-count prediction from uniformly drawn start states, scored
    against ground-truth rollouts of the same policy."""
    t0 = time.time()
    rows, extras, errors = _run_seeds(_prediction_seed, cfg, None)
    summary = _summarise(rows, ("T_H", "backend"), ("accuracy", "ece", "mean_confidence"))
    pooled, by_lag = {}, {}
    for backend in ("bayesian", "frequentist-map"):
        tabs = [x["reliability"][backend] for x in extras.values() if backend in x.get("reliability", {})]
        pooled[backend] = pool_reliability(tabs)
        by_lag[backend] = {str(h): pool_reliability([x["reliability_by_lag"][str(h)][backend] for x in extras.values()])
                           for h in range(1, cfg.T_H + 1)}
    return _finish(cfg, rows, extras, errors, summary, t0,
                   meta={"event": "y_p equals the predicted mode" if cfg.event == "mode"
                         else f"y_p >= {cfg.event_threshold}", "confidence": "top-label",
                         "reliability_lag": cfg.reliability_lag, "reliability": pooled,
                         "reliability_by_lag": by_lag})


def pool_reliability(tables: Sequence[list[dict]]) -> list[dict]:
    """Count-weighted merge of reliability tables with identical bins."""
    if not tables:
        return []
    out = []
    for rows in zip(*tables):
        n = sum(r["count"] for r in rows)
        conf = sum(r["count"] * r["confidence"] for r in rows if r["count"]) / n if n else float("nan")
        acc = sum(r["count"] * r["accuracy"] for r in rows if r["count"]) / n if n else float("nan")
        out.append({"lo": rows[0]["lo"], "hi": rows[0]["hi"], "count": n, "confidence": conf, "accuracy": acc})
    return out


# ---------------------------------------------------------------------------
# exploration
# ---------------------------------------------------------------------------

def _exploration_seed(cfg: ExperimentConfig, seed: int, shared):
    config = cfg.env_config()
    structure = ModelStructure.from_env(config, memoryless=config.memoryless)
    reward = coma.control_reward(config)
    rows, trace = [], []
    for arm in ("random", "optimized"):
        pt = MultiAccessEnv(config, stream_seed(seed, "pt"))
        data: list[Transition] = []
        for i in range(1, cfg.rounds + 1):
            before = learn(structure, data, BAYES_PRIOR)
            if arm == "random":
                pol_d = random_collection_policy(stream(seed, "pi_d", i))
            else:
                pol_d = coma.train(before, monitor.mi_reward_fn(before), cfg.explore_train, stream(seed, "mi", i))
            new = collect(pt, pol_d, cfg.T_d, stream(seed, "act", i))
            D = stack_transitions(new, config.K)
            mi = monitor.mi_reward_batch(before, D.q, D.g, D.d, D.a)
            trace += [{"seed": seed, "round": i, "step": j, "arm": arm, "mi_reward": float(m)} for j, m in enumerate(mi)]
            data += new
            post = learn(structure, data, BAYES_PRIOR)
            pol = coma.train(post, reward, cfg.train, stream(seed, "train", i))
            ev = _evaluate(pol, config, cfg, seed, i)
            rows.append({"seed": seed, "round": i, "arm": arm, "n_data": len(data), "throughput": ev.throughput,
                         "overflow": ev.overflow, "mi_collected": float(mi.sum())})
    return rows, {"mi_trace": trace}


def run_exploration_experiment(cfg: ExperimentConfig) -> ExperimentRecord:
    """Rounds of random versus information-seeking collection, each followed
    by control training on the data gathered so far."""
    t0 = time.time()
    rows, extras, errors = _run_seeds(_exploration_seed, cfg, None)
    summary = _summarise(rows, ("round", "arm"), ("throughput", "overflow", "mi_collected"))
    return _finish(cfg, rows, extras, errors, summary, t0)


RUNNERS = {"control": run_control_experiment, "anomaly": run_anomaly_experiment,
           "prediction": run_prediction_experiment, "exploration": run_exploration_experiment}


def run_experiment(cfg: ExperimentConfig) -> ExperimentRecord:
    return RUNNERS[cfg.kind](cfg)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _transition_dict(tr: Transition) -> dict:
    return {"s": [list(tr.s.q), list(tr.s.g), list(tr.s.d), tr.s.t], "a": list(tr.a),
            "s_next": [list(tr.s_next.q), list(tr.s_next.g), list(tr.s_next.d), tr.s_next.t],
            "reward": tr.reward, "overflow": [bool(o) for o in tr.overflow]}


def _transition_from(d: dict) -> Transition:
    mk = lambda v: EnvState(tuple(v[0]), tuple(v[1]), tuple(v[2]), int(v[3]))  # noqa: E731
    return Transition(mk(d["s"]), tuple(d["a"]), mk(d["s_next"]), float(d["reward"]), tuple(d["overflow"]))


def save(artifact, path: str | Path) -> Path:
    """Persist a dataset (transition list), posterior, policy or record."""
    path = Path(path)
    if isinstance(artifact, FactoredPosterior):
        save_posterior(artifact, path)
    elif isinstance(artifact, PolicySet):
        artifact.save(path)
    elif isinstance(artifact, ExperimentRecord):
        path.write_text(json.dumps(artifact.to_dict(), indent=1))
    elif isinstance(artifact, list) and all(isinstance(t, Transition) for t in artifact):
        path.write_text(json.dumps({"format_version": FORMAT_VERSION, "kind": "dataset",
                                    "transitions": [_transition_dict(t) for t in artifact]}))
    else:
        raise TypeError(f"cannot save {type(artifact).__name__}")
    return path


def load(path: str | Path, kind: str):
    """Inverse of :func:`save`; ``kind`` is dataset, posterior, policy or record."""
    path = Path(path)
    if kind == "posterior":
        return load_posterior(path)
    if kind == "policy":
        return PolicySet.load(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"corrupt {kind} file {path}: {exc}") from exc
    if kind == "record":
        return ExperimentRecord.from_dict(d)
    if kind == "dataset":
        _check_version(d, "dataset")
        return [_transition_from(t) for t in d["transitions"]]
    raise ValueError(f"unknown artifact kind {kind!r}")


def _rows_csv(rows: Sequence[dict], path: Path, config_hash: str) -> None:
    if not rows:
        return
    cols = list(rows[0])
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def write_outputs(rec: ExperimentRecord, out: str | Path) -> None:
    """Record JSON, a YAML summary and plot-ready CSVs, each tagged with the config hash."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    h = rec.config_hash
    rec.artifacts.update({"record": str(out / "record.json"), "summary": str(out / "summary.yaml"),
                          "metrics": str(out / f"{rec.kind}.csv")})
    _rows_csv(rec.rows, out / f"{rec.kind}.csv", h)
    if rec.kind == "anomaly":
        grid = rec.meta["fpr_grid"]
        rows = [{"seed": "mean", "T": k.split("/")[0], "backend": k.split("/")[1], "fpr": f, "tpr": t}
                for k, tpr in rec.meta["mean_roc"].items() for f, t in zip(grid, tpr)]
        monitor.write_roc_csv(rows, out / "roc.csv", h)
        rec.artifacts["roc"] = str(out / "roc.csv")
    if rec.kind == "prediction":
        monitor.write_reliability_csv(rec.meta["reliability"], out / "reliability.csv", h)
        rec.artifacts["reliability"] = str(out / "reliability.csv")
    if rec.kind == "exploration":
        trace = [r for x in rec.extras.values() for r in x["mi_trace"]]
        monitor.write_mi_trace_csv(trace, out / "mi_trace.csv", h)
        rec.artifacts["mi_trace"] = str(out / "mi_trace.csv")
    with open(out / "summary.yaml", "w") as fh:
        yaml.safe_dump({"kind": rec.kind, "config_hash": h, "seeds": rec.config["seeds"],
                        "wall_clock_s": round(rec.wall_clock, 2), "errors": {int(k): v for k, v in rec.errors.items()},
                        "summary": rec.summary}, fh, sort_keys=False)
    (out / "record.json").write_text(json.dumps(rec.to_dict(), indent=1))
