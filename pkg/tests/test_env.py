import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayestwin import env
from bayestwin.env import (
    AnomalySpec,
    ConfigError,
    EnvState,
    MultiAccessEnv,
    Transition,
    assemble_state,
    env_rng,
    inject_anomaly,
    observe,
    default_config,
    reset,
    revert_anomaly,
    sample_channel,
    sample_generation,
    step,
)


@pytest.fixture
def cfg():
    return default_config()


def test_reset_all_empty(cfg):
    s = reset(cfg, seed=3)
    assert s.q == (0, 0, 0, 0) and s.g == (0, 0, 0, 0) and s.d == (0, 0, 0, 0) and s.t == 0
    assert reset(cfg, 3) == reset(cfg, 3)


def test_non_covering_partition_rejected():
    with pytest.raises(ConfigError, match="cover"):
        default_config(clusters=((0, 1), (2,)), gen_tables=([0.2, 0.4, 0.4, 0.0], [0.5, 0.5]))


def test_overlapping_partition_rejected():
    with pytest.raises(ConfigError, match="disjoint"):
        default_config(clusters=((0, 1), (1, 2, 3)))


def test_mpr_mass_above_diagonal_rejected():
    m = np.eye(5)
    m[1] = [0.5, 0.0, 0.5, 0.0, 0.0]
    with pytest.raises(ConfigError):
        default_config(mpr_table=m)


def test_generation_frequencies(cfg):
    rng = np.random.default_rng(0)
    n = 100_000
    tables, _ = env.truth_tables(cfg)
    g = env.generation_batch(np.zeros((n, 4), dtype=np.int64), cfg.clusters, tables, rng)
    codes = env.encode_bits(g[:, [0, 1]])
    p = np.array([0.2, 0.4, 0.4, 0.0])
    freq = np.bincount(codes, minlength=4) / n
    sig = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(freq - p) <= 3 * sig + 1e-12)
    assert freq[3] == 0.0


def test_degenerate_generation_table():
    c = default_config(gen_tables=([1.0, 0, 0, 0], [1.0, 0, 0, 0]))
    rng = np.random.default_rng(1)
    for _ in range(50):
        assert sample_generation([1, 0, 1, 0], c, rng).tolist() == [0, 0, 0, 0]


def test_channel_examples(cfg):
    rng = np.random.default_rng(2)
    for _ in range(200):
        assert sample_channel([1, 0, 0, 0], cfg, rng).tolist() == [1, 0, 0, 0]
        assert sample_channel([1, 1, 1, 0], cfg, rng).tolist() == [0, 0, 0, 0]


def test_uniform_subset_delivery(cfg):
    rng = np.random.default_rng(3)
    a = np.tile([1, 1, 0, 0], (100_000, 1))
    d = env.assign_deliveries(a, np.ones(len(a), dtype=np.int64), rng)
    assert np.all(d.sum(axis=1) == 1)
    f = d[:, 0].mean()
    assert abs(f - 0.5) <= 3 * np.sqrt(0.25 / len(a))


@given(st.lists(st.integers(0, 1), min_size=4, max_size=4), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_step_invariants(a, seed):
    cfg = default_config()
    rng = env_rng(seed)
    s = reset(cfg)
    for _ in range(5):
        tr = step(s, a, cfg, rng)
        q, q2 = np.array(tr.s.q), np.array(tr.s_next.q)
        d2 = np.array(tr.s_next.d)
        assert np.all((0 <= q2) & (q2 <= 1))
        assert np.all(d2 <= np.array(tr.a)) and np.all(np.array(tr.a) <= q)
        assert tr.s_next.t == tr.s.t + 1
        s = tr.s_next


def _forced(q, g2, d2, a, q_max=1):
    """Transition from ``q`` with prescribed outcome (no sampling)."""
    cfg = default_config(q_max=(q_max,) * 4)
    s = EnvState(tuple(q), (0,) * 4, (0,) * 4, 0)
    s2 = EnvState(tuple(env.buffer_update(np.array(q), np.array(g2), np.array(d2), q_max)), tuple(g2), tuple(d2), 1)
    tr = Transition(s, tuple(a), s2, 0.0, tuple(env.overflow_flags(np.array(q), np.array(g2), np.array(d2), q_max)))
    return cfg, tr


def test_step_examples():
    cfg, tr = _forced([1, 0, 0, 0], [1, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0])
    assert tr.s_next.q[0] == 1 and tr.overflow[0]
    assert env.reward(tr, cfg) == -50 - 3
    cfg, tr = _forced([1, 0, 0, 0], [0, 0, 0, 0], [1, 0, 0, 0], [1, 0, 0, 0])
    assert tr.s_next.q[0] == 0
    assert env.reward(tr, cfg) == 50 - 3
    cfg, tr = _forced([0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0])
    assert env.reward(tr, cfg) == -4


def test_invalid_actions_coerced(cfg):
    tr = step(reset(cfg), [1, 1, 1, 1], cfg, env_rng(0))
    assert tr.a == (0, 0, 0, 0)


def test_determinism(cfg):
    def run(seed):
        e = MultiAccessEnv(cfg, seed)
        r = np.random.default_rng(99)
        return [e.step(r.integers(0, 2, 4)) for _ in range(50)]
    assert run(5) == run(5)


def test_observe_assemble_round_trip(cfg):
    e = MultiAccessEnv(cfg, 1)
    for _ in range(20):
        s = e.step([1, 1, 1, 1]).s_next
        obs = [observe(s, k) for k in range(4)]
        assert obs[2] == (s.q[2], s.g[2], s.d[2], s.t)
        assert assemble_state(obs, 4) == s
    with pytest.raises(ConfigError):
        assemble_state(obs[:3], 4)


def test_anomaly_table(cfg):
    bad = inject_anomaly(cfg, AnomalySpec(device=1))
    assert np.allclose(bad.gen_tables[0], [[0.6, 0.4, 0.0, 0.0]])
    assert np.allclose(bad.gen_tables[1], cfg.gen_tables[1])
    assert revert_anomaly(bad, cfg) == cfg
    with pytest.raises(ConfigError):
        inject_anomaly(cfg, AnomalySpec(device=7))


def test_config_yaml_round_trip(cfg, tmp_path):
    env.save_config(cfg, tmp_path / "env.yaml")
    assert env.load_config(tmp_path / "env.yaml") == cfg


def test_trajectory_csv(cfg, tmp_path):
    e = MultiAccessEnv(cfg, 4)
    data = [e.step([1, 0, 1, 0]) for _ in range(12)]
    env.write_trajectory_csv(data, tmp_path / "log.csv")
    header = (tmp_path / "log.csv").read_text().splitlines()[0].split(",")
    assert header[:5] == ["t", "q1", "q2", "q3", "q4"] and header[-1] == "overflow4"
    back = env.read_trajectory_csv(tmp_path / "log.csv", 4)
    assert back == data[:-1]
