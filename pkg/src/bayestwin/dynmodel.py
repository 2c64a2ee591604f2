"""Factored transition model of the twin: Dirichlet posterior, MAP point estimate,
variational neural factors, likelihood scoring and model rollouts.

The case-study factorisation has one factor per arrival cluster (outcome =
cluster vector code, context = previous code or nothing), one channel factor
(context ``n_tx``, outcome ``n_rx``) and two known factors: the uniform choice
of which transmitters succeed, and the buffer update.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import comb, lgamma
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import digamma

from . import nnkit
from .env import (
    EnvConfig,
    EnvRng,
    EnvState,
    Transition,
    TransitionArrays,
    buffer_update,
    dynamics_step,
    encode_bits,
    stack_transitions,
)

FORMAT_VERSION = 1
BAYES_PRIOR = 0.01
FREQ_PRIOR = 1.01

TABULAR, NEURAL, KNOWN = "learned-tabular", "learned-neural", "known-deterministic"


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# factor structure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FactorSpec:
    """One factor of the transition model.

    ``context``/``outcome`` map stacked transitions to integer codes.  Known
    factors instead provide ``known_logp``: the (θ-free) log-probability of each
    transition under that factor.
    """

    name: str
    kind: str
    n_ctx: int = 1
    n_out: int = 1
    context: Callable[[TransitionArrays], np.ndarray] | None = field(default=None, compare=False)
    outcome: Callable[[TransitionArrays], np.ndarray] | None = field(default=None, compare=False)
    support: np.ndarray | None = field(default=None, compare=False)
    known_logp: Callable[[TransitionArrays], np.ndarray] | None = field(default=None, compare=False)

    @property
    def learned(self) -> bool:
        return self.kind != KNOWN

    def mask(self) -> np.ndarray:
        if self.support is None:
            return np.ones((self.n_ctx, self.n_out), dtype=bool)
        return self.support


@dataclass(frozen=True)
class ModelStructure:
    """What the twin knows a priori: device count, buffers and cluster partition."""

    K: int
    q_max: tuple[int, ...]
    clusters: tuple[tuple[int, ...], ...]
    memoryless: bool = True
    neural: tuple[str, ...] = ()

    @classmethod
    def from_env(cls, config: EnvConfig, memoryless: bool = True, neural: Iterable[str] = ()) -> "ModelStructure":
        return cls(config.K, config.q_max, config.clusters, memoryless, tuple(neural))

    def to_dict(self) -> dict:
        return {"K": self.K, "q_max": list(self.q_max), "clusters": [list(c) for c in self.clusters],
                "memoryless": self.memoryless, "neural": list(self.neural)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelStructure":
        return cls(int(d["K"]), tuple(d["q_max"]), tuple(tuple(c) for c in d["clusters"]),
                   bool(d["memoryless"]), tuple(d.get("neural", ())))

    def factors(self) -> tuple[FactorSpec, ...]:
        out = []
        for i, c in enumerate(self.clusters):
            c = list(c)
            n = 2 ** len(c)
            name = f"gen{i}"
            kind = NEURAL if name in self.neural else TABULAR
            if self.memoryless:
                ctx = lambda D: np.zeros(len(D), dtype=np.int64)  # noqa: E731
                n_ctx = 1
            else:
                ctx = (lambda c: lambda D: encode_bits(D.g[:, c]))(c)
                n_ctx = n
            out.append(FactorSpec(name, kind, n_ctx, n, ctx, (lambda c: lambda D: encode_bits(D.g2[:, c]))(c)))
        K = self.K
        support = np.tril(np.ones((K + 1, K + 1), dtype=bool))
        out.append(FactorSpec("channel", NEURAL if "channel" in self.neural else TABULAR, K + 1, K + 1,
                              lambda D: D.a.sum(axis=1), lambda D: D.d2.sum(axis=1), support))
        out.append(FactorSpec("assign", KNOWN, known_logp=_assign_logp))
        q_max = np.asarray(self.q_max)
        out.append(FactorSpec("buffer", KNOWN, known_logp=lambda D: np.where(
            np.all(buffer_update(D.q, D.g2, D.d2, q_max) == D.q2, axis=1), 0.0, -np.inf)))
        return tuple(out)


def _assign_logp(D: TransitionArrays) -> np.ndarray:
    n_tx = D.a.sum(axis=1)
    n_rx = D.d2.sum(axis=1)
    ok = np.all(D.d2 <= D.a, axis=1)
    lp = np.array([-np.log(comb(int(t), int(r))) if r <= t else -np.inf for t, r in zip(n_tx, n_rx)])
    return np.where(ok, lp, -np.inf)


def _as_arrays(data) -> TransitionArrays:
    if isinstance(data, TransitionArrays):
        return data
    return stack_transitions(list(data))


# ---------------------------------------------------------------------------
# posterior / draws
# ---------------------------------------------------------------------------

@dataclass
class FactoredPosterior:
    """Dirichlet tables per tabular factor (zero outside the support) and
    variational parameters per neural factor."""

    structure: ModelStructure
    alpha: dict[str, np.ndarray]
    prior: dict[str, np.ndarray]
    variational: dict[str, nnkit.VariationalParams] = field(default_factory=dict)
    hidden: dict[str, int] = field(default_factory=dict)

    @property
    def factors(self) -> tuple[FactorSpec, ...]:
        return self.structure.factors()

    def factor(self, name: str) -> FactorSpec:
        for f in self.factors:
            if f.name == name:
                return f
        raise ModelError(f"unknown factor {name!r}")

    def learned_names(self) -> list[str]:
        return [f.name for f in self.factors if f.learned]

    def copy(self) -> "FactoredPosterior":
        return FactoredPosterior(self.structure, {k: v.copy() for k, v in self.alpha.items()},
                                 {k: v.copy() for k, v in self.prior.items()}, dict(self.variational),
                                 dict(self.hidden))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FactoredPosterior):
            return NotImplemented
        same = lambda a, b: a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)  # noqa: E731
        return (self.structure == other.structure and same(self.alpha, other.alpha)
                and same(self.prior, other.prior))

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "structure": self.structure.to_dict(),
                "alpha": {k: v.tolist() for k, v in self.alpha.items()},
                "prior": {k: v.tolist() for k, v in self.prior.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "FactoredPosterior":
        if d.get("format_version") != FORMAT_VERSION:
            raise ModelError(f"unsupported posterior format version {d.get('format_version')!r} "
                             f"(expected {FORMAT_VERSION})")
        return cls(ModelStructure.from_dict(d["structure"]),
                   {k: np.array(v, dtype=float) for k, v in d["alpha"].items()},
                   {k: np.array(v, dtype=float) for k, v in d["prior"].items()})


def make_prior(structure: ModelStructure, value: float = BAYES_PRIOR) -> FactoredPosterior:
    """Uniform Dirichlet prior ``value`` on every supported cell."""
    if value <= 0:
        raise ModelError("Dirichlet parameters must be positive")
    alpha = {}
    for f in structure.factors():
        if f.kind == TABULAR:
            alpha[f.name] = np.where(f.mask(), float(value), 0.0)
    return FactoredPosterior(structure, alpha, {k: v.copy() for k, v in alpha.items()})


def collapsed_posterior(config: EnvConfig, strength: float = 1e12) -> FactoredPosterior:
    """Posterior concentrated on the ground-truth tables (draws equal the truth)."""
    structure = ModelStructure.from_env(config, memoryless=config.memoryless)
    post = make_prior(structure)
    for i, t in enumerate(config.gen_tables):
        post.alpha[f"gen{i}"] = np.maximum(t * strength, 1e-12)
    post.alpha["channel"] = np.where(post.alpha["channel"] > 0, np.maximum(config.mpr_table * strength, 1e-12), 0.0)
    return post


@dataclass
class ParameterDraw:
    """One model θ: log-probability tables for every learned factor."""

    structure: ModelStructure
    log_tables: dict[str, np.ndarray]

    def table(self, name: str) -> np.ndarray:
        return np.exp(self.log_tables[name])

    def gen_tables(self) -> list[np.ndarray]:
        return [self.table(f"gen{i}") for i in range(len(self.structure.clusters))]

    def mpr_table(self) -> np.ndarray:
        return self.table("channel")

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "structure": self.structure.to_dict(),
                "tables": {k: np.exp(v).tolist() for k, v in self.log_tables.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterDraw":
        if d.get("format_version") != FORMAT_VERSION:
            raise ModelError(f"unsupported draw format version {d.get('format_version')!r}")
        with np.errstate(divide="ignore"):
            tabs = {k: np.log(np.array(v, dtype=float)) for k, v in d["tables"].items()}
        return cls(ModelStructure.from_dict(d["structure"]), tabs)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParameterDraw):
            return NotImplemented
        return (self.structure == other.structure and self.log_tables.keys() == other.log_tables.keys()
                and all(np.array_equal(self.log_tables[k], other.log_tables[k]) for k in self.log_tables))


def truth_draw(config: EnvConfig) -> ParameterDraw:
    structure = ModelStructure.from_env(config, memoryless=config.memoryless)
    with np.errstate(divide="ignore"):
        logs = {f"gen{i}": np.log(t) for i, t in enumerate(config.gen_tables)}
        logs["channel"] = np.log(config.mpr_table)
    return ParameterDraw(structure, logs)


# ---------------------------------------------------------------------------
# learning
# ---------------------------------------------------------------------------

def count_table(spec: FactorSpec, data) -> np.ndarray:
    D = _as_arrays(data)
    counts = np.zeros((spec.n_ctx, spec.n_out))
    if len(D) == 0:
        return counts
    ctx, out = spec.context(D), spec.outcome(D)
    bad = (ctx < 0) | (ctx >= spec.n_ctx) | (out < 0) | (out >= spec.n_out)
    if np.any(bad) or np.any(~spec.mask()[np.clip(ctx, 0, spec.n_ctx - 1), np.clip(out, 0, spec.n_out - 1)]):
        raise ModelError(f"factor {spec.name!r}: observed context/outcome outside its domain")
    np.add.at(counts, (ctx, out), 1.0)
    return counts


def dirichlet_update(prior: FactoredPosterior, data) -> FactoredPosterior:
    """Conjugate update: add transition counts to every tabular factor's table."""
    post = prior.copy()
    D = _as_arrays(data)
    for f in post.factors:
        if f.kind == TABULAR:
            post.alpha[f.name] = post.alpha[f.name] + count_table(f, D)
    return post


def learn(structure: ModelStructure, data, prior_value: float) -> FactoredPosterior:
    return dirichlet_update(make_prior(structure, prior_value), data)


def _log_dirichlet(alpha: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Log of a Dirichlet draw per row, computed in log space.

    Uses ``Gamma(a) = Gamma(a+1) * U**(1/a)`` so that tiny shapes (0.01) do not
    underflow to exact zeros.
    """
    a = np.where(mask, alpha, 1.0)
    g = rng.standard_gamma(a + 1.0)
    u = rng.random(a.shape)
    with np.errstate(divide="ignore"):
        log_x = np.log(g) + np.log(u) / a
    log_x = np.where(mask, log_x, -np.inf)
    m = log_x.max(axis=-1, keepdims=True)
    return log_x - (m + np.log(np.exp(log_x - m).sum(axis=-1, keepdims=True)))


def sample_parameters(post: FactoredPosterior, rng: np.random.Generator) -> ParameterDraw:
    logs = {}
    for f in post.factors:
        if f.kind == TABULAR:
            logs[f.name] = _log_dirichlet(post.alpha[f.name], f.mask(), rng)
        elif f.kind == NEURAL:
            vp = post.variational.get(f.name)
            if vp is None:
                raise ModelError(f"neural factor {f.name!r} has not been fitted")
            theta, _ = nnkit.gaussian_sample(vp, rng)
            logs[f.name] = neural_log_table(f, theta, post.hidden.get(f.name, 32))
    return ParameterDraw(post.structure, logs)


def posterior_mean(post: FactoredPosterior) -> ParameterDraw:
    logs = {}
    for f in post.factors:
        if f.kind == TABULAR:
            a = post.alpha[f.name]
            with np.errstate(divide="ignore"):
                logs[f.name] = np.log(a / a.sum(axis=1, keepdims=True))
    return ParameterDraw(post.structure, logs)


def map_estimate(post: FactoredPosterior) -> ParameterDraw:
    """Dirichlet mode ``(alpha - 1) / sum(alpha - 1)`` per row."""
    logs = {}
    for f in post.factors:
        if f.kind != TABULAR:
            continue
        a, m = post.alpha[f.name], f.mask()
        if np.any(a[m] <= 1.0):
            raise ModelError(f"factor {f.name!r}: MAP needs every Dirichlet parameter > 1; "
                             f"learn with the frequentist prior {FREQ_PRIOR}")
        e = np.where(m, a - 1.0, 0.0)
        with np.errstate(divide="ignore"):
            logs[f.name] = np.log(e / e.sum(axis=1, keepdims=True))
    return ParameterDraw(post.structure, logs)


def dirichlet_log_density(theta: np.ndarray, alpha: np.ndarray) -> float:
    alpha = np.asarray(alpha, dtype=float)
    norm = sum(lgamma(a) for a in alpha) - lgamma(alpha.sum())
    return float(np.sum((alpha - 1.0) * np.log(theta)) - norm)


# ---------------------------------------------------------------------------
# likelihood and rollouts
# ---------------------------------------------------------------------------

def log_likelihood_terms(draw: ParameterDraw, data, factors: Sequence[str] | None = None) -> np.ndarray:
    """Per-transition ``log T_theta`` restricted to ``factors`` (default: all)."""
    D = _as_arrays(data)
    out = np.zeros(len(D))
    if len(D) == 0:
        return out
    for f in draw.structure.factors():
        if factors is not None and f.name not in factors:
            continue
        if f.kind == KNOWN:
            out = out + f.known_logp(D)
        else:
            out = out + draw.log_tables[f.name][f.context(D), f.outcome(D)]
    return out


def log_likelihood(draw: ParameterDraw, data, factors: Sequence[str] | None = None) -> float:
    return float(log_likelihood_terms(draw, data, factors).sum())


def stack_draws(draws: Sequence[ParameterDraw]) -> tuple[list[np.ndarray], np.ndarray]:
    """Batched tables ``(B, n_ctx, n_out)`` for :func:`bayestwin.env.dynamics_step`."""
    n_c = len(draws[0].structure.clusters)
    gen = [np.stack([d.table(f"gen{i}") for d in draws]) for i in range(n_c)]
    return gen, np.stack([d.mpr_table() for d in draws])


def rollout_batch(tables, structure: ModelStructure, q, g, d, a, rng: EnvRng):
    gen, mpr = tables
    return dynamics_step(q, g, d, a, structure.clusters, gen, mpr, structure.q_max, rng)


def rollout_step(draw: ParameterDraw, state: EnvState, a: Sequence[int], rng: EnvRng) -> EnvState:
    q, g, d = state.arrays()
    tables = stack_draws([draw])
    q2, g2, d2, _, _ = rollout_batch(tables, draw.structure, q[None], g[None], d[None],
                                     np.asarray(a, dtype=np.int64)[None], rng)
    return EnvState.from_arrays(q2[0], g2[0], d2[0], state.t + 1)


# ---------------------------------------------------------------------------
# variational neural factors
# ---------------------------------------------------------------------------

@dataclass
class VIHyper:
    hidden: int = 32
    lr: float = 1e-2
    steps: int = 500
    prior_sigma: float = 1.0
    sigma0: float = 0.05
    n_mc: int = 1


def _factor_net(spec: FactorSpec, hidden: int, rng=None) -> nnkit.Net:
    return nnkit.Net([spec.n_ctx, hidden, spec.n_out], hidden="tanh", output="identity", rng=rng)


def _masked_log_softmax(z: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    return z - (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))


def neural_log_table(spec: FactorSpec, theta: np.ndarray, hidden: int) -> np.ndarray:
    net = _factor_net(spec, hidden)
    net.set_params(nnkit.unflatten(theta, net.params))
    z = net.forward(np.eye(spec.n_ctx), cache=False)
    return _masked_log_softmax(z, spec.mask())


def neural_nll_and_grad(spec: FactorSpec, theta: np.ndarray, hidden: int, counts: np.ndarray):
    """Negative log-likelihood of a count table and its gradient in ``theta``."""
    net = _factor_net(spec, hidden)
    net.set_params(nnkit.unflatten(theta, net.params))
    z = net.forward(np.eye(spec.n_ctx))
    mask = spec.mask()
    logp = _masked_log_softmax(z, mask)
    nll = -float(np.sum(counts * np.where(mask, logp, 0.0)))
    p = np.exp(logp)
    grad_z = p * counts.sum(axis=1, keepdims=True) - counts
    grad_z = np.where(mask, grad_z, 0.0)
    return nll, nnkit.flatten(net.backward(grad_z))


class VIDivergence(ModelError):
    def __init__(self, msg: str, trace: list[float]):
        super().__init__(msg)
        self.trace = trace


def vi_fit(spec: FactorSpec, data, hyper: VIHyper | None = None, rng: np.random.Generator | None = None):
    """Minimise the free energy (expected NLL + KL) by reparameterised Adam.

    Returns ``(VariationalParams, trace)`` with the single-sample free-energy
    estimate recorded at every step.
    """
    if spec.kind != NEURAL:
        raise ModelError(f"vi_fit needs a learned-neural factor, got {spec.kind!r}")
    hyper = hyper or VIHyper()
    rng = rng if rng is not None else np.random.default_rng()
    counts = count_table(spec, data)
    net = _factor_net(spec, hyper.hidden, rng)
    vp = nnkit.VariationalParams.for_net(net, hyper.sigma0, hyper.prior_sigma)
    params = [vp.mu, vp.rho]
    opt = nnkit.Adam(lr=hyper.lr)
    trace = []
    for _ in range(hyper.steps):
        g_mu = np.zeros_like(vp.mu)
        g_rho = np.zeros_like(vp.rho)
        nll_sum = 0.0
        for _ in range(hyper.n_mc):
            theta, eps = nnkit.gaussian_sample(vp, rng)
            nll, g_theta = neural_nll_and_grad(spec, theta, hyper.hidden, counts)
            nll_sum += nll
            g_mu += g_theta
            g_rho += g_theta * eps * nnkit.sigmoid(vp.rho)
        kl = nnkit.kl_diag_gaussians(vp)
        k_mu, k_rho = nnkit.kl_grads(vp)
        fe = nll_sum / hyper.n_mc + kl
        trace.append(fe)
        if not np.isfinite(fe):
            raise VIDivergence(f"free energy diverged at step {len(trace)}", trace)
        opt.step(params, [g_mu / hyper.n_mc + k_mu, g_rho / hyper.n_mc + k_rho])
    return vp, trace


def vi_learn(structure: ModelStructure, data, hyper: VIHyper | None = None, rng=None,
             prior_value: float = BAYES_PRIOR) -> FactoredPosterior:
    """Posterior where tabular factors are conjugate and neural ones variational."""
    hyper = hyper or VIHyper()
    post = learn(structure, data, prior_value)
    for f in post.factors:
        if f.kind == NEURAL:
            vp, _ = vi_fit(f, data, hyper, rng)
            post.variational[f.name] = vp
            post.hidden[f.name] = hyper.hidden
    return post


def free_energy(spec: FactorSpec, vp: nnkit.VariationalParams, data, hidden: int, rng, n_mc: int = 64) -> float:
    counts = count_table(spec, data)
    tot = 0.0
    for _ in range(n_mc):
        theta, _ = nnkit.gaussian_sample(vp, rng)
        tot += neural_nll_and_grad(spec, theta, hidden, counts)[0]
    return tot / n_mc + nnkit.kl_diag_gaussians(vp)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_posterior(post: FactoredPosterior, path: str | Path) -> None:
    Path(path).write_text(json.dumps(post.to_dict(), indent=1))


def load_posterior(path: str | Path) -> FactoredPosterior:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"corrupt posterior file {path}: {exc}") from exc
    return FactoredPosterior.from_dict(d)


def entropy_terms(alpha: np.ndarray, mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per row: entropy of the mean predictive and expected entropy under Dirichlet(alpha).

    Expected entropy uses ``psi(a0 + 1) - sum_j (a_j / a0) psi(a_j + 1)``.
    """
    alpha = np.asarray(alpha, dtype=float)
    if mask is None:
        mask = alpha > 0
    a = np.where(mask, alpha, 0.0)
    a0 = a.sum(axis=-1, keepdims=True)
    p = a / a0
    with np.errstate(divide="ignore", invalid="ignore"):
        h_mean = -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=-1)
    e_h = digamma(a0[..., 0] + 1.0) - np.sum(np.where(mask, p * digamma(a + 1.0), 0.0), axis=-1)
    return h_mean, e_h

