"""Ground-truth multi-access system: K devices, bursty packet arrivals, MPR channel.

Devices are indexed from 0.  Each device keeps a FIFO buffer of capacity
``q_max[k]``.  Per slot the joint generation vector is drawn cluster by
cluster, the channel delivers ``n_rx ~ mpr[n_tx]`` packets chosen uniformly
among the transmitters, and buffers follow ``q' = min(q_max, q + g' - d')``.

A joint cluster vector ``(g[c_0], g[c_1], ...)`` is encoded as the integer
``sum_j g[c_j] << j``.

All dynamics are written once as batched kernels over ``(B, K)`` arrays with
per-row tables; the single-state API (:func:`step` and friends) and the
learned-model rollouts in :mod:`bayestwin.dynmodel` both call them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import yaml


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def encode_bits(bits: np.ndarray) -> np.ndarray:
    """Rows of bits ``(..., n)`` -> integer codes, bit j weighted ``2**j``."""
    bits = np.asarray(bits, dtype=np.int64)
    return (bits << np.arange(bits.shape[-1])).sum(axis=-1)


def decode_bits(codes: np.ndarray, n: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    return (codes[..., None] >> np.arange(n)) & 1


@dataclass(frozen=True, eq=False)
class EnvConfig:
    """Immutable description of the physical system.

    ``gen_tables[i]`` has shape ``(n_ctx, 2**len(clusters[i]))`` with
    ``n_ctx = 1`` for memoryless arrivals and ``2**len(clusters[i])`` for the
    Markov case (row = previous cluster vector code).  ``mpr_table[n_tx, n_rx]``
    is the multi-packet reception law, shape ``(K+1, K+1)``.
    """

    K: int
    q_max: tuple[int, ...]
    clusters: tuple[tuple[int, ...], ...]
    gen_tables: tuple[np.ndarray, ...]
    mpr_table: np.ndarray
    xi: float = 50.0
    beta: tuple[float, ...] = ()
    gamma: float = 0.95

    def __post_init__(self) -> None:
        object.__setattr__(self, "q_max", tuple(int(q) for q in np.broadcast_to(self.q_max, (self.K,))))
        object.__setattr__(self, "clusters", tuple(tuple(int(k) for k in c) for c in self.clusters))
        object.__setattr__(self, "gen_tables", tuple(np.array(t, dtype=float, ndmin=2) for t in self.gen_tables))
        object.__setattr__(self, "mpr_table", np.array(self.mpr_table, dtype=float))
        beta = self.beta if len(self.beta) else (1.0,) * self.K
        object.__setattr__(self, "beta", tuple(float(b) for b in np.broadcast_to(beta, (self.K,))))
        for arr in (*self.gen_tables, self.mpr_table):
            arr.setflags(write=False)
        self.validate()

    def validate(self) -> None:
        K = self.K
        if K < 1:
            raise ConfigError("K must be at least 1")
        if any(q < 1 for q in self.q_max):
            raise ConfigError("q_max[k] >= 1 violated")
        members = [k for c in self.clusters for k in c]
        if any(len(c) == 0 for c in self.clusters):
            raise ConfigError("clusters must be non-empty")
        if len(members) != len(set(members)):
            raise ConfigError("clusters must be disjoint")
        if sorted(members) != list(range(K)):
            raise ConfigError(f"clusters must cover devices 0..{K - 1} (got {sorted(members)})")
        if len(self.gen_tables) != len(self.clusters):
            raise ConfigError("one gen_table per cluster required")
        for i, (c, t) in enumerate(zip(self.clusters, self.gen_tables)):
            n_out = 2 ** len(c)
            if t.shape[1] != n_out or t.shape[0] not in (1, n_out):
                raise ConfigError(f"gen_table[{i}] has shape {t.shape}, expected (1 or {n_out}, {n_out})")
            if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-9):
                raise ConfigError(f"gen_table[{i}] rows must be distributions summing to 1")
        m = self.mpr_table
        if m.shape != (K + 1, K + 1):
            raise ConfigError(f"mpr_table must have shape {(K + 1, K + 1)}")
        if np.any(m < 0) or np.any(np.abs(m.sum(axis=1) - 1.0) > 1e-9):
            raise ConfigError("mpr_table rows must sum to 1")
        if np.any(np.triu(m, 1) > 0):
            raise ConfigError("mpr_table assigns mass to n_rx > n_tx")
        if not self.xi > 0:
            raise ConfigError("xi must be positive")
        if any(b < 0 for b in self.beta):
            raise ConfigError("beta[k] >= 0 violated")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")

    @property
    def memoryless(self) -> bool:
        return all(t.shape[0] == 1 for t in self.gen_tables)

    def cluster_of(self, device: int) -> int:
        for i, c in enumerate(self.clusters):
            if device in c:
                return i
        raise ConfigError(f"unknown device {device}")

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "q_max": list(self.q_max),
            "clusters": [list(c) for c in self.clusters],
            "gen_tables": [t.tolist() for t in self.gen_tables],
            "mpr_table": self.mpr_table.tolist(),
            "xi": self.xi,
            "beta": list(self.beta),
            "gamma": self.gamma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        try:
            return cls(
                K=int(d["K"]),
                q_max=tuple(np.broadcast_to(d.get("q_max", 1), (int(d["K"]),))),
                clusters=d["clusters"],
                gen_tables=d["gen_tables"],
                mpr_table=d["mpr_table"],
                xi=float(d.get("xi", 50.0)),
                beta=tuple(d.get("beta", ())),
                gamma=float(d.get("gamma", 0.95)),
            )
        except KeyError as exc:
            raise ConfigError(f"missing config key {exc}") from exc

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EnvConfig):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None  # type: ignore[assignment]


def default_config(**overrides) -> EnvConfig:
    """Four devices, unit buffers, two exclusive-arrival clusters, 2-packet MPR."""
    K = 4
    pair = [0.2, 0.4, 0.4, 0.0]  # codes 00, 10, 01, 11
    mpr = np.zeros((K + 1, K + 1))
    mpr[0, 0] = 1.0
    mpr[1, 1] = 1.0
    mpr[2, 1], mpr[2, 2] = 0.8, 0.2
    mpr[3, 0] = 1.0
    mpr[4, 0] = 1.0
    kw = dict(K=K, q_max=(1,) * K, clusters=((0, 1), (2, 3)), gen_tables=(pair, pair),
              mpr_table=mpr, xi=50.0, beta=(1.0,) * K, gamma=0.95)
    kw.update(overrides)
    return EnvConfig(**kw)


def load_config(path: str | Path) -> EnvConfig:
    """Read an :class:`EnvConfig` from a YAML file (an ``env:`` section or top level)."""
    data = yaml.safe_load(Path(path).read_text())
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    if "env" in data:
        data = data["env"]
    if data == "default" or (isinstance(data, dict) and data.get("preset") == "default"):
        return default_config()
    return EnvConfig.from_dict(data)


def save_config(config: EnvConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump({"env": config.to_dict()}, sort_keys=False))


@dataclass(frozen=True)
class AnomalySpec:
    """Disconnect one device: its packets are never generated again."""

    device: int
    kind: str = "disconnect"


def inject_anomaly(config: EnvConfig, spec: AnomalySpec) -> EnvConfig:
    """Return a copy of ``config`` whose generator for ``spec.device`` is silenced.

    The device's arrival probability mass is moved onto the same joint vector
    with that device's bit cleared, so the other devices keep their marginals.
    """
    if spec.kind != "disconnect":
        raise ConfigError(f"unknown anomaly kind {spec.kind!r}")
    if not 0 <= spec.device < config.K:
        raise ConfigError(f"unknown device {spec.device}")
    i = config.cluster_of(spec.device)
    pos = config.clusters[i].index(spec.device)
    old = config.gen_tables[i]
    new = np.zeros_like(old)
    codes = np.arange(old.shape[1])
    target = codes & ~(1 << pos)
    for row in range(old.shape[0]):
        np.add.at(new[row], target, old[row])
    tables = list(config.gen_tables)
    tables[i] = new
    return replace(config, gen_tables=tuple(tables))


def revert_anomaly(anomalous: EnvConfig, original: EnvConfig) -> EnvConfig:
    return replace(anomalous, gen_tables=original.gen_tables)


# ---------------------------------------------------------------------------
# state types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnvState:
    q: tuple[int, ...]
    g: tuple[int, ...]
    d: tuple[int, ...]
    t: int = 0

    @property
    def K(self) -> int:
        return len(self.q)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (np.array(self.q, dtype=np.int64), np.array(self.g, dtype=np.int64),
                np.array(self.d, dtype=np.int64))

    @classmethod
    def from_arrays(cls, q, g, d, t: int = 0) -> "EnvState":
        return cls(tuple(int(x) for x in q), tuple(int(x) for x in g), tuple(int(x) for x in d), int(t))


@dataclass(frozen=True)
class Transition:
    s: EnvState
    a: tuple[int, ...]
    s_next: EnvState
    reward: float
    overflow: tuple[bool, ...] = field(default=())


class Observation(NamedTuple):
    q: int
    g: int
    d: int
    t: int


class EnvRng(NamedTuple):
    """Independent streams for packet generation and for the channel."""

    gen: np.random.Generator
    chan: np.random.Generator


def env_rng(seed) -> EnvRng:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    a, b = ss.spawn(2)
    return EnvRng(np.random.default_rng(a), np.random.default_rng(b))


# ---------------------------------------------------------------------------
# batched kernels
# ---------------------------------------------------------------------------

def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of ``probs`` (rows must sum to 1) by inverse CDF."""
    cdf = np.cumsum(probs, axis=-1)
    cdf = cdf / cdf[..., -1:]
    u = rng.random(probs.shape[:-1] + (1,))
    idx = (u >= cdf[..., :-1]).sum(axis=-1)
    return idx


def _rows(table: np.ndarray, ctx: np.ndarray) -> np.ndarray:
    """Select ``table[b, ctx[b]]`` where ``table`` is ``(B or 1, n_ctx, n_out)``."""
    if table.shape[0] == 1:
        return table[0, ctx]
    return table[np.arange(len(ctx)), ctx]


def generation_batch(prev_g: np.ndarray, clusters, tables, rng: np.random.Generator) -> np.ndarray:
    """Next generation vectors ``(B, K)``; ``tables[i]`` is ``(B or 1, n_ctx, n_out)``."""
    B = prev_g.shape[0]
    g = np.zeros_like(prev_g)
    for c, tab in zip(clusters, tables):
        c = list(c)
        ctx = np.zeros(B, dtype=np.int64) if tab.shape[1] == 1 else encode_bits(prev_g[:, c])
        code = sample_categorical(_rows(tab, ctx), rng)
        g[:, c] = decode_bits(code, len(c))
    return g


def assign_deliveries(a: np.ndarray, n_rx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Pick ``n_rx[b]`` of the transmitters in row ``b`` uniformly at random."""
    keys = rng.random(a.shape)
    keys = np.where(a > 0, keys, np.inf)
    ranks = np.argsort(np.argsort(keys, axis=1, kind="stable"), axis=1, kind="stable")
    return ((ranks < n_rx[:, None]) & (a > 0)).astype(np.int64)


def channel_batch(a: np.ndarray, mpr: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Delivery vectors for actions ``a`` under ``mpr`` of shape ``(B or 1, K+1, K+1)``."""
    n_tx = a.sum(axis=1)
    n_rx = sample_categorical(_rows(mpr, n_tx), rng)
    return assign_deliveries(a, n_rx, rng), n_rx


def buffer_update(q: np.ndarray, g_next: np.ndarray, d_next: np.ndarray, q_max) -> np.ndarray:
    return np.minimum(np.asarray(q_max), q + g_next - d_next)


def overflow_flags(q: np.ndarray, g_next: np.ndarray, d_next: np.ndarray, q_max) -> np.ndarray:
    return (q == np.asarray(q_max)) & (g_next == 1) & (d_next == 0)


def device_rewards(q, g_next, d_next, q_max, xi: float) -> np.ndarray:
    """Per-device reward: +xi on delivery, -xi on overflow, -1 otherwise."""
    over = overflow_flags(q, g_next, d_next, q_max)
    return np.where(d_next == 1, xi, np.where(over, -xi, -1.0))


def coerce_actions(a: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Devices with an empty buffer cannot transmit."""
    return np.where(q > 0, np.asarray(a, dtype=np.int64), 0)


def dynamics_step(q, g, d, a, clusters, gen_tables, mpr, q_max, rng: EnvRng):
    """Batched transition under given tables; returns ``(q', g', d', a, overflow)``."""
    a = coerce_actions(a, q)
    g_next = generation_batch(g, clusters, gen_tables, rng.gen)
    d_next, _ = channel_batch(a, mpr, rng.chan)
    over = overflow_flags(q, g_next, d_next, q_max)
    q_next = buffer_update(q, g_next, d_next, q_max)
    return q_next, g_next, d_next, a, over


def truth_tables(config: EnvConfig) -> tuple[list[np.ndarray], np.ndarray]:
    return [t[None] for t in config.gen_tables], config.mpr_table[None]


# ---------------------------------------------------------------------------
# single-state API
# ---------------------------------------------------------------------------

def reset(config: EnvConfig, seed=None) -> EnvState:
    """All buffers empty, no arrivals, no deliveries, t = 0."""
    config.validate()
    zeros = (0,) * config.K
    return EnvState(zeros, zeros, zeros, 0)


def sample_generation(prev_g: Sequence[int], config: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    prev = np.asarray(prev_g, dtype=np.int64)
    if prev.shape != (config.K,):
        raise ConfigError(f"prev_g must have length {config.K}")
    tables, _ = truth_tables(config)
    return generation_batch(prev[None], config.clusters, tables, rng)[0]


def sample_channel(a: Sequence[int], config: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    d, _ = channel_batch(a[None], config.mpr_table[None], rng)
    return d[0]


def reward(transition: Transition, config: EnvConfig) -> float:
    q, _, _ = transition.s.arrays()
    _, g2, d2 = transition.s_next.arrays()
    r = device_rewards(q, g2, d2, config.q_max, config.xi)
    return float(np.dot(config.beta, r))


def step(state: EnvState, a: Sequence[int], config: EnvConfig, rng: EnvRng) -> Transition:
    q, g, d = state.arrays()
    a = np.asarray(a, dtype=np.int64).reshape(config.K)
    tables, mpr = truth_tables(config)
    q2, g2, d2, a_eff, over = dynamics_step(q[None], g[None], d[None], a[None], config.clusters,
                                            tables, mpr, config.q_max, rng)
    s_next = EnvState.from_arrays(q2[0], g2[0], d2[0], state.t + 1)
    r = float(np.dot(config.beta, device_rewards(q, g2[0], d2[0], config.q_max, config.xi)))
    return Transition(state, tuple(int(x) for x in a_eff[0]), s_next, r, tuple(bool(x) for x in over[0]))


def observe(state: EnvState, k: int) -> Observation:
    return Observation(state.q[k], state.g[k], state.d[k], state.t)


def assemble_state(observations: Sequence[Observation], K: int | None = None) -> EnvState:
    """Rebuild the global state from one observation per device."""
    if K is not None and len(observations) != K:
        raise ConfigError(f"expected {K} observations, got {len(observations)}")
    if not observations:
        raise ConfigError("no observations")
    ts = {o.t for o in observations}
    if len(ts) != 1:
        raise ConfigError("observations come from different time steps")
    return EnvState(tuple(o.q for o in observations), tuple(o.g for o in observations),
                    tuple(o.d for o in observations), ts.pop())


class MultiAccessEnv:
    """Stateful wrapper around :func:`step` for interactive use."""

    def __init__(self, config: EnvConfig, seed=None):
        self.config = config
        self.rng = env_rng(seed)
        self.state = reset(config, seed)

    def reset(self, state: EnvState | None = None) -> EnvState:
        self.state = state if state is not None else reset(self.config)
        return self.state

    def step(self, a: Sequence[int]) -> Transition:
        tr = step(self.state, a, self.config, self.rng)
        self.state = tr.s_next
        return tr


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class TransitionArrays:
    """Column view of a transition list, shapes ``(T, K)`` / ``(T,)``."""

    q: np.ndarray
    g: np.ndarray
    d: np.ndarray
    a: np.ndarray
    q2: np.ndarray
    g2: np.ndarray
    d2: np.ndarray
    t: np.ndarray
    reward: np.ndarray

    def __len__(self) -> int:
        return len(self.reward)


def stack_transitions(data: Sequence[Transition], K: int | None = None) -> TransitionArrays:
    if not data:
        K = K or 0
        e = np.zeros((0, K), dtype=np.int64)
        return TransitionArrays(e, e, e, e, e, e, e, np.zeros(0, np.int64), np.zeros(0))
    cols = {n: [] for n in ("q", "g", "d", "a", "q2", "g2", "d2")}
    for tr in data:
        cols["q"].append(tr.s.q)
        cols["g"].append(tr.s.g)
        cols["d"].append(tr.s.d)
        cols["a"].append(tr.a)
        cols["q2"].append(tr.s_next.q)
        cols["g2"].append(tr.s_next.g)
        cols["d2"].append(tr.s_next.d)
    arr = {n: np.array(v, dtype=np.int64) for n, v in cols.items()}
    return TransitionArrays(**arr, t=np.array([tr.s.t for tr in data], dtype=np.int64),
                            reward=np.array([tr.reward for tr in data], dtype=float))


def write_trajectory_csv(data: Sequence[Transition], path: str | Path) -> None:
    if not data:
        raise ValueError("empty trajectory")
    K = data[0].s.K
    header = (["t"] + [f"q{k + 1}" for k in range(K)] + [f"g{k + 1}" for k in range(K)]
              + [f"d{k + 1}" for k in range(K)] + [f"a{k + 1}" for k in range(K)] + ["reward"]
              + [f"overflow{k + 1}" for k in range(K)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for tr in data:
            w.writerow([tr.s.t, *tr.s.q, *tr.s.g, *tr.s.d, *tr.a, repr(tr.reward),
                        *(int(o) for o in tr.overflow)])


def read_trajectory_csv(path: str | Path, K: int) -> list[Transition]:
    """Inverse of :func:`write_trajectory_csv`; next states come from the following row.

    The last row's successor is not stored, so it is dropped from the result.
    """
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    states = []
    for r in rows:
        st = EnvState(tuple(int(r[f"q{k + 1}"]) for k in range(K)), tuple(int(r[f"g{k + 1}"]) for k in range(K)),
                      tuple(int(r[f"d{k + 1}"]) for k in range(K)), int(r["t"]))
        states.append((st, r))
    out = []
    for (s, r), (s2, _) in zip(states[:-1], states[1:]):
        out.append(Transition(s, tuple(int(r[f"a{k + 1}"]) for k in range(K)), s2, float(r["reward"]),
                              tuple(bool(int(r[f"overflow{k + 1}"])) for k in range(K))))
    return out
