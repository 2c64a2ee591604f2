"""Monitoring on top of the learned model: ensemble-disagreement anomaly
scores, rollout-based prediction with calibration, the information-gain
collection reward and paired what-if comparisons."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from itertools import combinations
from math import comb
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import digamma

from . import coma, nnkit
from .dynmodel import (
    NEURAL,
    TABULAR,
    FactoredPosterior,
    ParameterDraw,
    entropy_terms,
    log_likelihood_terms,
    neural_log_table,
    sample_parameters,
    stack_draws,
)
from .env import EnvConfig, EnvRng, EnvState, TransitionArrays, encode_bits, stack_transitions

VARIANCE_CONVENTION = "population"


class MonitorError(ValueError):
    pass


def _entropy(p: np.ndarray, axis: int = -1) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=axis)


# ---------------------------------------------------------------------------
# anomaly detection
# ---------------------------------------------------------------------------

@dataclass
class MonitoringWindow:
    """``T^M`` consecutive transitions plus the factors entering the likelihood
    (``None`` keeps all of them)."""

    transitions: TransitionArrays
    factors: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.transitions, TransitionArrays):
            self.transitions = stack_transitions(list(self.transitions))
        if len(self.transitions) < 1:
            raise MonitorError("a monitoring window needs at least one transition")

    @property
    def T(self) -> int:
        return len(self.transitions)


def ll_matrix(draws: Sequence[ParameterDraw], data: TransitionArrays, factors=None) -> np.ndarray:
    """Per-draw, per-transition restricted log-likelihood, ``(n_draws, N)``."""
    return np.stack([log_likelihood_terms(dr, data, factors) for dr in draws])


def variance_scores(ll: np.ndarray) -> np.ndarray:
    """Population variance over the draw axis (axis 0)."""
    return np.var(ll, axis=0)


def anomaly_score(post: FactoredPosterior, window: MonitoringWindow, n_samples: int = 20,
                  rng: np.random.Generator | None = None) -> float:
    """Variance of the window log-likelihood across ``n_samples`` posterior draws."""
    if n_samples < 2:
        raise MonitorError("n_samples must be at least 2")
    rng = np.random.default_rng() if rng is None else rng
    draws = [sample_parameters(post, rng) for _ in range(n_samples)]
    ll = ll_matrix(draws, window.transitions, window.factors).sum(axis=1)
    return float(np.var(ll))


def window_scores(draws: Sequence[ParameterDraw], data: TransitionArrays, T_M: int, factors=None) -> np.ndarray:
    """Scores for consecutive length-``T_M`` windows sharing one ensemble."""
    ll = ll_matrix(draws, data, factors)
    n = ll.shape[1] // T_M
    ll = ll[:, : n * T_M].reshape(len(draws), n, T_M).sum(axis=2)
    return variance_scores(ll)


def likelihood_score(draw: ParameterDraw, window: MonitoringWindow) -> float:
    """Point-estimate test statistic: negative window log-likelihood."""
    return -float(log_likelihood_terms(draw, window.transitions, window.factors).sum())


def roc_auc(scores_normal, scores_anomalous) -> tuple[np.ndarray, float]:
    """ROC points ``(fpr, tpr)`` over every threshold and the trapezoid AUC.

    A higher score means more anomalous. Tied scores move both rates at once,
    which makes the area equal to the Mann-Whitney statistic with half credit
    for ties.
    """
    n = np.asarray(scores_normal, dtype=float).ravel()
    a = np.asarray(scores_anomalous, dtype=float).ravel()
    if n.size == 0 or a.size == 0:
        raise MonitorError("roc_auc needs nonempty normal and anomalous score lists")
    s = np.concatenate([a, n])
    y = np.concatenate([np.ones(a.size), np.zeros(n.size)])
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    tpr = np.r_[0.0, tps / a.size]
    fpr = np.r_[0.0, fps / n.size]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return np.column_stack([fpr, tpr]), auc


def auc_pairwise(scores_normal, scores_anomalous) -> float:
    """Brute-force pair counting with half credit for ties."""
    n = np.asarray(scores_normal, dtype=float)[None, :]
    a = np.asarray(scores_anomalous, dtype=float)[:, None]
    if n.size == 0 or a.size == 0:
        raise MonitorError("empty score list")
    return float(((a > n).sum() + 0.5 * (a == n).sum()) / (a.size * n.size))


def roc_on_grid(points: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """TPR interpolated at the FPR values in ``grid`` (for averaging curves)."""
    fpr, tpr = points[:, 0], points[:, 1]
    return np.interp(grid, fpr, tpr)


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

@dataclass
class PredictionTask:
    start: EnvState
    policy: object
    horizon: int
    n_models: int = 20
    n_traj: int = 100
    metric: str = "overflow"
    bins: int = 10

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise MonitorError("prediction horizon must be >= 1")
        if self.n_models < 1 or self.n_traj < 1:
            raise MonitorError("n_models and n_traj must be >= 1")


@dataclass
class Predictive:
    """Distribution of ``y_p`` on ``0..K*T^H``; ``per_model`` holds each model's
    empirical distribution."""

    probs: np.ndarray
    per_model: np.ndarray
    samples: np.ndarray

    def event(self, threshold: int = 1) -> float:
        """``P(y_p >= threshold)``."""
        return float(self.probs[threshold:].sum())

    @property
    def mean(self) -> float:
        return float(np.arange(self.probs.size) @ self.probs)


def _model_tables(source, n_models: int, n_traj: int, rng: np.random.Generator):
    """Tables for ``n_models * n_traj`` episodes, grouped by model."""
    if isinstance(source, FactoredPosterior):
        draws = [sample_parameters(source, rng) for _ in range(n_models)]
        gen, mpr = stack_draws(draws)
        rep = lambda x: np.repeat(x, n_traj, axis=0)  # noqa: E731
        return [rep(t) for t in gen], rep(mpr)
    if isinstance(source, (ParameterDraw, EnvConfig)):
        if n_models != 1:
            raise MonitorError("a single-model source needs n_models = 1")
        return coma.episode_tables(source, 1, rng)
    raise TypeError(f"unsupported model source {type(source).__name__}")


def overflow_paths(source, policy, starts, n_models: int, n_traj: int, horizon: int,
                   rng: np.random.Generator, t0: int = 0) -> np.ndarray:
    """Cumulative overflow counts ``(horizon, n_starts, n_models * n_traj)``.

    Row ``h-1`` is ``y_p`` for lag ``h``. Fresh models are drawn per start state.
    """
    q0, g0, d0 = (np.asarray(x, dtype=np.int64) for x in starts)
    S, K = q0.shape
    per = n_models * n_traj
    structure = coma.source_structure(source)
    parts = [_model_tables(source, n_models, n_traj, rng) for _ in range(S)]
    if parts[0][1].shape[0] == 1:
        gen, mpr = parts[0]
    else:
        gen = [np.concatenate([p[0][i] for p in parts]) for i in range(len(parts[0][0]))]
        mpr = np.concatenate([p[1] for p in parts])
    start = tuple(np.repeat(x, per, axis=0) for x in (q0, g0, d0))
    erng = EnvRng(*(np.random.default_rng(x) for x in rng.integers(0, 2**63, size=2)))
    zero = lambda *args: np.zeros(len(start[0]))  # noqa: E731
    ro = coma.rollout(policy, (gen, mpr), structure, S * per, horizon, zero, rng, erng, start=start, t0=t0)
    counts = np.cumsum(ro.overflow.sum(axis=2), axis=0)
    return counts.reshape(horizon, S, per)


def distribution(samples: np.ndarray, n_models: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Mixture of per-model empirical distributions over ``0..size-1``."""
    per_model = np.stack([np.bincount(s, minlength=size)[:size] / s.size
                          for s in np.asarray(samples).reshape(n_models, -1)])
    return per_model.mean(axis=0), per_model


def predict_metric(task: PredictionTask, source, rng: np.random.Generator) -> Predictive:
    """Predictive distribution of the overflow count over ``task.horizon`` steps."""
    if task.metric != "overflow":
        raise MonitorError(f"unknown target metric {task.metric!r}")
    q, g, d = task.start.arrays()
    paths = overflow_paths(source, task.policy, (q[None], g[None], d[None]), task.n_models, task.n_traj,
                           task.horizon, rng, t0=task.start.t)
    y = paths[-1, 0]
    probs, per_model = distribution(y, task.n_models, len(q) * task.horizon + 1)
    return Predictive(probs, per_model, y)


def binary_predictions(p_event: np.ndarray, outcomes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Top-label confidence and correctness for a binary event.

    ``p_event`` has one entry per prediction and ``outcomes`` one row of
    observed event indicators per prediction.
    """
    p = np.asarray(p_event, dtype=float)
    o = np.asarray(outcomes, dtype=bool)
    guess = p >= 0.5
    conf = np.where(guess, p, 1.0 - p)
    correct = o == guess[:, None]
    return np.repeat(conf, o.shape[1]), correct.ravel()


def top_label_predictions(probs: np.ndarray, outcomes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Confidence of the predicted mode and whether each observed value hits it.

    ``probs`` is ``(S, n_values)``, ``outcomes`` is ``(S, m)`` integer values.
    """
    probs = np.asarray(probs, dtype=float)
    guess = probs.argmax(axis=1)
    conf = probs[np.arange(len(probs)), guess]
    correct = np.asarray(outcomes) == guess[:, None]
    return np.repeat(conf, correct.shape[1]), correct.ravel()


def ece(predictions, bins: int = 10) -> tuple[float, list[dict]]:
    """Expected calibration error over equal-width confidence bins.

    ``predictions`` is a sequence of ``(confidence, correct)`` pairs or a pair
    of arrays. Returns the ECE and one reliability row per bin.
    """
    if isinstance(predictions, tuple) and len(predictions) == 2 and np.ndim(predictions[0]) == 1:
        conf, corr = (np.asarray(x, dtype=float) for x in predictions)
    else:
        arr = np.asarray(predictions, dtype=float).reshape(-1, 2)
        conf, corr = arr[:, 0], arr[:, 1]
    if conf.size == 0:
        raise MonitorError("ece needs at least one prediction")
    if np.any((conf < 0) | (conf > 1)):
        raise MonitorError("confidences must lie in [0, 1]")
    idx = np.minimum((conf * bins).astype(int), bins - 1)
    n = np.bincount(idx, minlength=bins)
    s_conf = np.bincount(idx, conf, minlength=bins)
    s_acc = np.bincount(idx, corr, minlength=bins)
    table, total = [], 0.0
    for b in range(bins):
        mc = s_conf[b] / n[b] if n[b] else float("nan")
        ac = s_acc[b] / n[b] if n[b] else float("nan")
        if n[b]:
            total += n[b] / conf.size * abs(ac - mc)
        table.append({"lo": b / bins, "hi": (b + 1) / bins, "count": int(n[b]),
                      "confidence": float(mc), "accuracy": float(ac)})
    return float(total), table


# ---------------------------------------------------------------------------
# information-gain reward
# ---------------------------------------------------------------------------

def _mi_rows(post: FactoredPosterior, name: str, rng: np.random.Generator | None = None,
             n_mc: int = 256) -> np.ndarray:
    f = post.factor(name)
    if f.kind == TABULAR:
        h_mean, e_h = entropy_terms(post.alpha[name], f.mask())
        return np.maximum(h_mean - e_h, 0.0)
    if f.kind == NEURAL:
        rng = np.random.default_rng(0) if rng is None else rng
        vp = post.variational[name]
        probs = np.stack([np.exp(neural_log_table(f, nnkit.gaussian_sample(vp, rng)[0], post.hidden.get(name, 32)))
                          for _ in range(n_mc)])
        return np.maximum(_entropy(probs.mean(axis=0)) - _entropy(probs).mean(axis=0), 0.0)
    return np.zeros(1)


def mi_tables(post: FactoredPosterior, rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    """Per learned factor, the information gain of each context row."""
    return {name: _mi_rows(post, name, rng) for name in post.learned_names()}


def mi_reward_batch(post: FactoredPosterior, q, g, d, a, tables: dict | None = None) -> np.ndarray:
    """Information gain about θ from the next state, for each row of a batch."""
    q = np.asarray(q)
    a = np.where(q > 0, np.asarray(a), 0)
    tables = mi_tables(post) if tables is None else tables
    out = np.zeros(q.shape[0])
    for f in post.factors:
        if f.name not in tables:
            continue
        if f.name == "channel":
            ctx = a.sum(axis=1)
        elif post.structure.memoryless:
            ctx = np.zeros(q.shape[0], dtype=np.int64)
        else:
            i = int(f.name[3:])
            ctx = encode_bits(np.asarray(g)[:, list(post.structure.clusters[i])])
        out += tables[f.name][ctx]
    return out


def mi_reward(post: FactoredPosterior, s: EnvState, a) -> float:
    q, g, d = s.arrays()
    return float(mi_reward_batch(post, q[None], g[None], d[None], np.asarray(a)[None])[0])


def mi_reward_fn(post: FactoredPosterior):
    """``reward_fn`` for :func:`bayestwin.coma.train` paying the information gain."""
    tables = mi_tables(post)

    def fn(q, g, d, a, q2, g2, d2):
        return mi_reward_batch(post, q, g, d, a, tables)

    return fn


def mi_row_monte_carlo(alpha, n: int, rng: np.random.Generator, chunk: int = 200_000) -> float:
    """Sampling estimate of the information gain of one Dirichlet row."""
    alpha = np.asarray(alpha, dtype=float)
    total_p = np.zeros(alpha.size)
    total_h = 0.0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        x = rng.dirichlet(alpha, size=m)
        total_p += x.sum(axis=0)
        total_h += _entropy(x).sum()
        done += m
    return float(_entropy(total_p / n) - total_h / n)


def next_state_distribution(draw: ParameterDraw, q, g, d, a) -> np.ndarray:
    """Full distribution over (generation codes, delivery vector) for one (s, a)."""
    st = draw.structure
    a = np.where(np.asarray(q) > 0, np.asarray(a), 0)
    p = np.ones(1)
    for i, c in enumerate(st.clusters):
        ctx = 0 if st.memoryless else int(encode_bits(np.asarray(g)[list(c)][None])[0])
        p = np.outer(p, draw.table(f"gen{i}")[ctx]).ravel()
    tx = np.flatnonzero(a)
    row = draw.mpr_table()[tx.size]
    dv = [row[r] / comb(tx.size, r) for r in range(tx.size + 1) for _ in combinations(tx, r)]
    return np.outer(p, dv).ravel()


def mi_monte_carlo(post: FactoredPosterior, s: EnvState, a, n: int, rng: np.random.Generator) -> float:
    """Information gain over the whole next state, estimated from ``n`` draws."""
    q, g, d = s.arrays()
    ps = np.stack([next_state_distribution(sample_parameters(post, rng), q, g, d, a) for _ in range(n)])
    return float(_entropy(ps.mean(axis=0)) - _entropy(ps).mean())


def expected_entropy(alpha) -> float:
    """``E[H(θ)]`` for ``θ ~ Dir(alpha)``."""
    a = np.asarray(alpha, dtype=float)
    a0 = a.sum()
    return float(digamma(a0 + 1) - np.sum(a / a0 * digamma(a + 1)))


# ---------------------------------------------------------------------------
# counterfactual comparison
# ---------------------------------------------------------------------------

@dataclass
class Effect:
    mean_a: float
    mean_b: float
    diff: float
    se: float
    n: int = 0
    samples: dict = field(default_factory=dict, repr=False)


def _split(source, task: PredictionTask):
    if isinstance(source, tuple):
        return source
    return source, task.policy


def counterfactual_effect(source_a, source_b, task: PredictionTask, rng: np.random.Generator) -> Effect:
    """Mean ``y_p`` under two (model, policy) alternatives with common random numbers.

    A source is a model (posterior, draw or ground-truth config) using
    ``task.policy``, or a ``(model, policy)`` tuple.
    """
    seed = rng.integers(0, 2**63)
    ys = []
    for src in (source_a, source_b):
        model, policy = _split(src, task)
        t = PredictionTask(task.start, policy, task.horizon, task.n_models if isinstance(model, FactoredPosterior)
                           else 1, task.n_traj, task.metric, task.bins)
        ys.append(predict_metric(t, model, np.random.default_rng(seed)).samples.astype(float))
    ya, yb = ys
    m = min(ya.size, yb.size)
    diff = ya[:m] - yb[:m]
    se = float(diff.std(ddof=1) / np.sqrt(m)) if m > 1 else float("nan")
    return Effect(float(ya.mean()), float(yb.mean()), float(ya.mean() - yb.mean()), se, m, {"a": ya, "b": yb})


# ---------------------------------------------------------------------------
# csv output
# ---------------------------------------------------------------------------

def _header(fh, config_hash: str) -> None:
    if config_hash:
        fh.write(f"# config_hash={config_hash}\n")


def write_roc_csv(rows: Sequence[dict], path: str | Path, config_hash: str = "") -> None:
    """Rows carry ``seed``, ``T``, ``backend``, ``fpr``, ``tpr``."""
    with open(path, "w", newline="") as fh:
        _header(fh, config_hash)
        w = csv.writer(fh)
        w.writerow(["seed", "T", "backend", "fpr", "tpr"])
        for r in rows:
            w.writerow([r["seed"], r["T"], r["backend"], f"{r['fpr']:.6g}", f"{r['tpr']:.6g}"])


def write_reliability_csv(tables: dict, path: str | Path, config_hash: str = "") -> None:
    """``tables`` maps a label (e.g. backend) to a reliability table from :func:`ece`."""
    with open(path, "w", newline="") as fh:
        _header(fh, config_hash)
        w = csv.writer(fh)
        w.writerow(["label", "bin_lo", "bin_hi", "count", "confidence", "accuracy"])
        for label, table in tables.items():
            for r in table:
                w.writerow([label, r["lo"], r["hi"], r["count"], r["confidence"], r["accuracy"]])


def write_mi_trace_csv(rows: Sequence[dict], path: str | Path, config_hash: str = "") -> None:
    with open(path, "w", newline="") as fh:
        _header(fh, config_hash)
        w = csv.writer(fh)
        w.writerow(["seed", "arm", "round", "step", "mi_reward"])
        for r in rows:
            w.writerow([r["seed"], r.get("arm", ""), r["round"], r["step"], f"{r['mi_reward']:.6g}"])
