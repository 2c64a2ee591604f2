"""Counterfactual multi-agent actor-critic trained on model rollouts.

Each agent runs its own small actor that sees only its local observation
``(q, g, d)`` and outputs ``L`` transmit probabilities, one per slot of an
``L``-slot frame; the slot ``t mod L`` picks which one is used.  A centralised
critic ``Q(s, a)`` is regressed on truncated lambda-returns computed with a
periodically synced target copy, and actors follow the policy gradient with
the counterfactual baseline that marginalises the agent's own action.

Training never touches the real system unless the model source *is* the real
system (the oracle-aided benchmark): a :class:`~bayestwin.dynmodel.FactoredPosterior`
is resampled once per virtual episode, a single
:class:`~bayestwin.dynmodel.ParameterDraw` is used as is, and an
:class:`~bayestwin.env.EnvConfig` supplies the ground-truth tables.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nnkit
from .dynmodel import FactoredPosterior, ModelStructure, ParameterDraw, sample_parameters, stack_draws
from .env import EnvConfig, EnvRng, device_rewards, dynamics_step, encode_bits, truth_tables

RewardFn = Callable[..., np.ndarray]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.95
    lam: float = 0.8
    n_step: int = 8
    n_critic: int = 4
    n_target: int = 50
    alpha_e: float = 0.01
    alpha_e_decay: float = 0.5  # fraction of the budget over which alpha_e decays to 0
    horizon: int = 40
    batch_episodes: int = 8
    episodes_per_draw: int = 1
    iterations: int = 400
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    actor_hidden: tuple[int, ...] = (64, 64)
    critic_hidden: tuple[int, ...] = (128, 128)
    L: int = 4
    reward_scale: float = 0.02
    random_start: bool = False
    eval_every: int = 0

    def __post_init__(self) -> None:
        self.actor_hidden = tuple(self.actor_hidden)
        self.critic_hidden = tuple(self.critic_hidden)
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma and lambda must lie in [0, 1]")
        if self.n_step < 1 or self.n_critic < 1 or self.n_target < 1:
            raise ValueError("n_step, n_critic and n_target must be >= 1")
        if self.alpha_e < 0:
            raise ValueError("alpha_e must be non-negative")
        if self.horizon < 1 or self.batch_episodes < 1 or self.L < 1:
            raise ValueError("horizon, batch_episodes and L must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["actor_hidden"] = list(self.actor_hidden)
        d["critic_hidden"] = list(self.critic_hidden)
        return d

    def alpha_at(self, it: int) -> float:
        span = self.alpha_e_decay * self.iterations
        if span <= 0:
            return 0.0
        return self.alpha_e * max(0.0, 1.0 - it / span)


# ---------------------------------------------------------------------------
# encodings
# ---------------------------------------------------------------------------

def obs_width(q_cap: int) -> int:
    return (q_cap + 1) * 4


def obs_code(q, g, d) -> np.ndarray:
    return (np.asarray(q) * 2 + g) * 2 + d


def encode_obs(q: np.ndarray, g: np.ndarray, d: np.ndarray, q_cap: int) -> np.ndarray:
    """One-hot of the joint local observation, ``(N, K)`` -> ``(K, N, W)``."""
    eye = np.eye(obs_width(q_cap))
    return eye[obs_code(q, g, d).T]


def encode_state(q, g, d, p, q_cap: int, L: int) -> np.ndarray:
    """Concatenated one-hots of every ``q^k``, ``g^k``, ``d^k`` plus the slot: ``(N, K*(q_cap+5) + L)``."""
    q, g, d = (np.asarray(x) for x in (q, g, d))
    N, K = q.shape
    eq, e2, el = np.eye(q_cap + 1), np.eye(2), np.eye(L)
    parts = [eq[q].reshape(N, -1), e2[g].reshape(N, -1), e2[d].reshape(N, -1), el[np.asarray(p)]]
    return np.concatenate(parts, axis=1)


def state_width(K: int, q_cap: int, L: int) -> int:
    return K * (q_cap + 5) + L


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class PolicySet:
    """K decentralised actors evaluated together as one grouped network."""

    def __init__(self, K: int, q_cap: int, L: int = 4, hidden: Sequence[int] = (64, 64),
                 rng: np.random.Generator | None = None):
        self.K, self.q_cap, self.L = K, q_cap, L
        self.net = nnkit.Net([obs_width(q_cap), *hidden, L], hidden="tanh", output="identity",
                             groups=K, rng=rng, out_scale=0.1)
        self.history: list[dict] = []

    def logits(self, q, g, d, cache: bool = False) -> np.ndarray:
        """Per-agent slot logits, shape ``(K, N, L)``."""
        return self.net.forward(encode_obs(q, g, d, self.q_cap), cache=cache)

    def transmit_probs(self, q, g, d, p) -> np.ndarray:
        """``P(a^k = 1)`` for ``(N, K)`` states at slots ``p``; zero on empty buffers."""
        z = self.logits(q, g, d)
        zk = z[:, np.arange(len(q)), np.asarray(p)]
        return np.where(q > 0, nnkit.sigmoid(zk.T), 0.0)

    def copy(self) -> "PolicySet":
        other = PolicySet.__new__(PolicySet)
        other.K, other.q_cap, other.L = self.K, self.q_cap, self.L
        other.net = self.net.copy()
        other.history = list(self.history)
        return other

    def save(self, path: str | Path) -> None:
        self.net.save(path)
        meta = {"K": self.K, "q_cap": self.q_cap, "L": self.L}
        Path(str(path) + ".policy.json").write_text(json.dumps(meta))

    @classmethod
    def load(cls, path: str | Path) -> "PolicySet":
        meta = json.loads(Path(str(path) + ".policy.json").read_text())
        ps = cls.__new__(cls)
        ps.K, ps.q_cap, ps.L = meta["K"], meta["q_cap"], meta["L"]
        ps.net = nnkit.Net.load(path)
        ps.history = []
        return ps


def actor_prob(policy: PolicySet, k: int, obs: Sequence[int], p: int) -> np.ndarray:
    """``(P(a=0), P(a=1))`` of agent ``k`` for local observation ``(q, g, d)`` at slot ``p``."""
    if not 0 <= p < policy.L:
        raise ValueError(f"slot {p} outside 0..{policy.L - 1}")
    q = np.zeros((1, policy.K), dtype=np.int64)
    g = np.zeros_like(q)
    d = np.zeros_like(q)
    q[0, k], g[0, k], d[0, k] = obs[0], obs[1], obs[2]
    p1 = policy.transmit_probs(q, g, d, np.array([p]))[0, k]
    return np.array([1.0 - p1, p1])


class CriticPair:
    """Centralised critic and its target copy.

    The network maps the global state to one value per joint action, so
    ``Q(s, a) = net(s)[code(a)]`` and every counterfactual ``Q(s, (a^-k, b))``
    comes from the same forward pass.
    """

    def __init__(self, K: int, q_cap: int, L: int, hidden: Sequence[int] = (128, 128),
                 rng: np.random.Generator | None = None, lr: float = 1e-3):
        self.K, self.q_cap, self.L = K, q_cap, L
        self.net = nnkit.Net([state_width(K, q_cap, L), *hidden, 2**K], hidden="tanh", output="identity", rng=rng)
        self.target = self.net.copy()
        self.opt = nnkit.Adam(lr=lr)
        self.updates = 0

    def features(self, q, g, d, p) -> np.ndarray:
        return encode_state(q, g, d, p, self.q_cap, self.L)

    def all_values(self, x: np.ndarray, target: bool = False, cache: bool = False) -> np.ndarray:
        net = self.target if target else self.net
        return net.forward(x, cache=cache)

    def q_value(self, q, g, d, p, a, target: bool = False) -> np.ndarray:
        vals = self.all_values(self.features(q, g, d, p), target)
        return vals[np.arange(len(vals)), encode_bits(a)]

    def sync(self) -> None:
        self.target.set_params([p.copy() for p in self.net.params])


# ---------------------------------------------------------------------------
# returns, advantages, entropy bonus
# ---------------------------------------------------------------------------

def lambda_return(rewards: Sequence[float], bootstrap: Sequence[float], gamma: float, lam: float, n: int) -> float:
    """Truncated lambda-return from ``n`` rewards and the ``n`` target values
    ``Qbar(s_{t+l}, a_{t+l})``, ``l = 1..n``."""
    rewards = np.asarray(rewards, dtype=float)
    bootstrap = np.asarray(bootstrap, dtype=float)
    if n < 1 or len(rewards) != n or len(bootstrap) != n:
        raise ValueError("rewards and bootstrap values must both have length n >= 1")
    g_l = [sum(gamma**j * rewards[j] for j in range(l)) + gamma**l * bootstrap[l - 1] for l in range(1, n + 1)]
    return float((1.0 - lam) * sum(lam ** (l - 1) * g_l[l - 1] for l in range(1, n)) + lam ** (n - 1) * g_l[n - 1])


def lambda_targets(rewards: np.ndarray, qbar: np.ndarray, gamma: float, lam: float, n: int) -> np.ndarray:
    """Vectorised :func:`lambda_return` for every start step of ``(H, B)`` rewards.

    ``qbar`` is ``(H+1, B)``.  Near the end of a segment the horizon shrinks to
    the ``H - t`` steps that are available.
    """
    H = rewards.shape[0]
    out = np.zeros_like(rewards, dtype=float)
    cum = np.zeros_like(rewards, dtype=float)
    n_eff = np.minimum(n, H - np.arange(H))
    for l in range(1, n + 1):
        valid = H - l + 1  # t in [0, valid) have t + l <= H
        if valid <= 0:
            break
        cum[:valid] += gamma ** (l - 1) * rewards[l - 1 : l - 1 + valid]
        g_l = cum[:valid] + gamma**l * qbar[l : l + valid]
        ne = n_eff[:valid]
        w = np.where(l < ne, (1.0 - lam) * lam ** (l - 1), np.where(l == ne, lam ** (l - 1), 0.0))
        out[:valid] += w[:, None] * g_l
    return out


def counterfactual_advantage(q_taken: float, q_alternatives: Sequence[float], pi: Sequence[float]) -> float:
    """``Q(s, a) - sum_b pi(b) Q(s, (a^-k, b))`` for one agent."""
    return float(q_taken - np.dot(pi, q_alternatives))


def entropy_reward(r, log_pi, alpha_e: float):
    """``r - alpha_e * log pi(a|s)``; ``log_pi`` is the joint log-probability."""
    log_pi = np.asarray(log_pi, dtype=float)
    if np.any(~np.isfinite(log_pi)):
        raise ValueError("executed action has zero probability")
    return r - alpha_e * log_pi


def control_reward(config: EnvConfig) -> RewardFn:
    beta = np.asarray(config.beta)
    q_max = np.asarray(config.q_max)

    def fn(q, g, d, a, q2, g2, d2):
        return device_rewards(q, g2, d2, q_max, config.xi) @ beta

    return fn


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------

@dataclass
class Rollout:
    """Arrays indexed ``[t, b, k]``; states and actions have ``H+1`` rows."""

    q: np.ndarray
    g: np.ndarray
    d: np.ndarray
    a: np.ndarray
    p1: np.ndarray
    slot: np.ndarray
    reward: np.ndarray
    overflow: np.ndarray

    @property
    def H(self) -> int:
        return self.reward.shape[0]

    def log_pi(self) -> np.ndarray:
        """Joint log-probability of the executed actions, ``(H+1, B)``."""
        pa = np.where(self.a == 1, self.p1, 1.0 - self.p1)
        with np.errstate(divide="ignore"):
            return np.log(pa).sum(axis=-1)


def source_structure(source, config: EnvConfig | None = None) -> ModelStructure:
    if isinstance(source, (FactoredPosterior, ParameterDraw)):
        return source.structure
    if isinstance(source, EnvConfig):
        return ModelStructure.from_env(source, memoryless=source.memoryless)
    raise TypeError(f"unsupported model source {type(source).__name__}")


def episode_tables(source, B: int, rng: np.random.Generator, per_draw: int = 1):
    """Transition tables for ``B`` parallel episodes."""
    if isinstance(source, FactoredPosterior):
        n = -(-B // per_draw)
        draws = [sample_parameters(source, rng) for _ in range(n)]
        draws = [draws[i // per_draw] for i in range(B)]
        return stack_draws(draws)
    if isinstance(source, ParameterDraw):
        return stack_draws([source])
    if isinstance(source, EnvConfig):
        return truth_tables(source)
    raise TypeError(f"unsupported model source {type(source).__name__}")


def initial_states(structure: ModelStructure, B: int, rng: np.random.Generator, random_start: bool = False):
    K = structure.K
    if not random_start:
        z = np.zeros((B, K), dtype=np.int64)
        return z, z.copy(), z.copy()
    q = rng.integers(0, np.asarray(structure.q_max) + 1, size=(B, K))
    return q, rng.integers(0, 2, size=(B, K)), rng.integers(0, 2, size=(B, K))


def rollout(policy, tables, structure: ModelStructure, B: int, H: int, reward_fn: RewardFn,
            rng: np.random.Generator, erng: EnvRng, start=None, t0: int = 0) -> Rollout:
    """Run ``B`` episodes of ``H`` steps; ``policy`` is a :class:`PolicySet` or a
    callable ``(q, g, d, t, rng) -> P(a=1)`` of shape ``(B, K)``."""
    K = structure.K
    if start is None:
        q, g, d = initial_states(structure, B, rng)
    else:
        q, g, d = (np.array(x, dtype=np.int64) for x in start)
    shape = (H + 1, B, K)
    Q, G, Dl, A = (np.zeros(shape, dtype=np.int64) for _ in range(4))
    P1 = np.zeros(shape)
    R = np.zeros((H, B))
    OV = np.zeros((H, B, K), dtype=bool)
    slots = np.zeros(H + 1, dtype=np.int64)
    gen, mpr = tables
    for t in range(H + 1):
        if isinstance(policy, PolicySet):
            slot = (t0 + t) % policy.L
            p1 = policy.transmit_probs(q, g, d, np.full(B, slot))
        else:
            slot = 0
            p1 = np.where(q > 0, policy(q, g, d, t0 + t, rng), 0.0)
        a = (rng.random((B, K)) < p1).astype(np.int64)
        Q[t], G[t], Dl[t], A[t], P1[t] = q, g, d, a, p1
        slots[t] = slot
        if t == H:
            break
        q2, g2, d2, a, over = dynamics_step(q, g, d, a, structure.clusters, gen, mpr, structure.q_max, erng)
        R[t] = reward_fn(q, g, d, a, q2, g2, d2)
        OV[t] = over
        q, g, d = q2, g2, d2
    return Rollout(Q, G, Dl, A, P1, slots, R, OV)


# ---------------------------------------------------------------------------
# updates
# ---------------------------------------------------------------------------

def _flat(ro: Rollout, n: int):
    """First ``n`` time steps flattened to ``(n*B, K)`` arrays plus slots."""
    B, K = ro.q.shape[1], ro.q.shape[2]
    q, g, d, a = (x[:n].reshape(-1, K) for x in (ro.q, ro.g, ro.d, ro.a))
    return q, g, d, a, np.repeat(ro.slot[:n], B)


def critic_update(critic: CriticPair, ro: Rollout, rewards: np.ndarray, cfg: TrainConfig,
                  targets: np.ndarray | None = None) -> float:
    """One gradient step on the squared lambda-return error; returns the loss."""
    H, B = rewards.shape
    q, g, d, a, p = _flat(ro, H + 1)
    x_all = critic.features(q, g, d, p)
    codes = encode_bits(a)
    if targets is None:
        targets = critic_targets(critic, x_all, codes, rewards, cfg)
    n = H * B
    out = critic.all_values(x_all[:n], cache=True)
    pred = out[np.arange(n), codes[:n]]
    err = pred - targets
    loss = float(np.mean(err**2))
    if not np.isfinite(loss):
        raise TrainingError("critic loss is not finite")
    g_out = np.zeros_like(out)
    g_out[np.arange(n), codes[:n]] = (2.0 / n) * err
    critic.opt.step(critic.net.params, critic.net.backward(g_out))
    critic.updates += 1
    if critic.updates % cfg.n_target == 0:
        critic.sync()
    return loss


def critic_targets(critic: CriticPair, x_all: np.ndarray, codes: np.ndarray, rewards: np.ndarray,
                   cfg: TrainConfig) -> np.ndarray:
    H, B = rewards.shape
    vals = critic.all_values(x_all, target=True)
    qbar = vals[np.arange(len(vals)), codes].reshape(H + 1, B)
    return lambda_targets(rewards, qbar, cfg.gamma, cfg.lam, cfg.n_step).reshape(-1)


def advantages(critic: CriticPair, ro: Rollout, H: int) -> np.ndarray:
    """Counterfactual advantages ``A^k``, shape ``(H, B, K)``."""
    B, K = ro.q.shape[1], ro.q.shape[2]
    q, g, d, a, p = _flat(ro, H)
    vals = critic.all_values(critic.features(q, g, d, p))
    N = len(q)
    rows = np.arange(N)[:, None]
    codes = encode_bits(a)[:, None]
    bit = 1 << np.arange(K)
    q0 = vals[rows, codes & ~bit]
    q1 = vals[rows, codes | bit]
    p1 = ro.p1[:H].reshape(-1, K)
    taken = np.where(a == 1, q1, q0)
    return (taken - ((1.0 - p1) * q0 + p1 * q1)).reshape(H, B, K)


def policy_update(policy: PolicySet, opt: nnkit.Adam, ro: Rollout, adv: np.ndarray) -> float:
    """One ascent step on ``mean sum_k log pi^k(a^k) A^k``; returns the gradient norm."""
    H, B, K = adv.shape
    q, g, d, a, slot = _flat(ro, H)
    N = len(q)
    z = policy.logits(q, g, d, cache=True)  # (K, N, L)
    zk = z[:, np.arange(N), slot]
    s = nnkit.sigmoid(zk)
    A = adv.reshape(-1, K).T
    if not np.all(np.isfinite(A)):
        raise TrainingError("non-finite advantage")
    live = (q.T > 0).astype(float)  # forced idles carry no gradient
    dlogp = (a.T - s) * live
    gz = np.zeros_like(z)
    gz[:, np.arange(N), slot] = -(dlogp * A) / N
    grads = policy.net.backward(gz)
    opt.step(policy.net.params, grads)
    return float(np.sqrt(sum(np.sum(gr * gr) for gr in grads)))


# ---------------------------------------------------------------------------
# training / evaluation
# ---------------------------------------------------------------------------

def make_policy(structure: ModelStructure, cfg: TrainConfig, rng: np.random.Generator) -> PolicySet:
    return PolicySet(structure.K, max(structure.q_max), cfg.L, cfg.actor_hidden, rng)


def train(source, reward_fn: RewardFn, cfg: TrainConfig, rng: np.random.Generator,
          policy: PolicySet | None = None, evaluate_fn: Callable[[PolicySet], float] | None = None) -> PolicySet:
    """Optimise decentralised actors on rollouts from ``source``.

    ``policy.history`` receives one row per iteration with the mean (unscaled)
    virtual return per step, the mean policy entropy and the critic loss.
    """
    structure = source_structure(source)
    init_rng, roll_rng, model_rng, gen_rng, chan_rng = (
        np.random.default_rng(x) for x in rng.integers(0, 2**63, size=5))
    erng = EnvRng(gen_rng, chan_rng)
    if policy is None:
        policy = make_policy(structure, cfg, init_rng)
    critic = CriticPair(structure.K, max(structure.q_max), cfg.L, cfg.critic_hidden, init_rng, cfg.critic_lr)
    actor_opt = nnkit.Adam(lr=cfg.actor_lr)
    B, H = cfg.batch_episodes, cfg.horizon
    for it in range(cfg.iterations):
        tables = episode_tables(source, B, model_rng, cfg.episodes_per_draw)
        start = initial_states(structure, B, roll_rng, cfg.random_start)
        ro = rollout(policy, tables, structure, B, H, reward_fn, roll_rng, erng, start=start)
        alpha = cfg.alpha_at(it)
        lp = ro.log_pi()[:H]
        rewards = entropy_reward(cfg.reward_scale * ro.reward, lp, alpha) if alpha > 0 else cfg.reward_scale * ro.reward
        try:
            loss = 0.0
            targets = None
            for _ in range(cfg.n_critic):
                if targets is None:
                    q, g, d, a, p = _flat(ro, H + 1)
                    targets = critic_targets(critic, critic.features(q, g, d, p), encode_bits(a), rewards, cfg)
                loss = critic_update(critic, ro, rewards, cfg, targets=targets)
                if critic.updates % cfg.n_target == 0:
                    targets = None
            adv = advantages(critic, ro, H)
            gnorm = policy_update(policy, actor_opt, ro, adv)
        except TrainingError as exc:
            raise TrainingError(f"iteration {it}: {exc}") from exc
        p1 = ro.p1[:H]
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = -(np.where(p1 > 0, p1 * np.log(p1), 0) + np.where(p1 < 1, (1 - p1) * np.log1p(-p1), 0))
        row = {"iteration": it, "mean_return": float(ro.reward.mean()), "entropy": float(ent.mean()),
               "critic_loss": loss, "grad_norm": gnorm}
        if evaluate_fn is not None and cfg.eval_every and (it + 1) % cfg.eval_every == 0:
            row["eval"] = float(evaluate_fn(policy))
        policy.history.append(row)
    return policy


@dataclass
class Evaluation:
    throughput: float
    overflow: float
    reward: float
    per_episode_throughput: list[float] = field(default_factory=list)


def evaluate(policy, config: EnvConfig, rng: np.random.Generator, episodes: int = 20, steps: int = 200) -> Evaluation:
    """Ground-truth throughput (packets delivered per step, whole system) and
    overflow probability (per device per step)."""
    structure = ModelStructure.from_env(config, memoryless=config.memoryless)
    erng = EnvRng(*(np.random.default_rng(x) for x in rng.integers(0, 2**63, size=2)))
    ro = rollout(policy, truth_tables(config), structure, episodes, steps, control_reward(config), rng, erng)
    delivered = ro.d[1:].sum(axis=-1)  # (H, B)
    return Evaluation(float(delivered.mean()), float(ro.overflow.mean()), float(ro.reward.mean()),
                      [float(x) for x in delivered.mean(axis=0)])


def write_history_csv(policy: PolicySet, path: str | Path, config_hash: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh)
        w.writerow(["iteration", "mean_return", "entropy", "critic_loss"])
        for r in policy.history:
            w.writerow([r["iteration"], r["mean_return"], r["entropy"], r["critic_loss"]])
