import json

import numpy as np
import pytest
from scipy.stats import chisquare

from bayestwin import cli, coma, harness, monitor
from bayestwin.dynmodel import ModelStructure, learn
from bayestwin.env import MultiAccessEnv, encode_bits, default_config

TINY = dict(iterations=3, actor_hidden=(8,), critic_hidden=(8,), n_critic=1, horizon=10, batch_episodes=2)


def tiny(kind, **kw):
    base = dict(kind=kind, seeds=[0], train=TINY, explore_train={**TINY, "reward_scale": 1.0, "random_start": True},
                eval_episodes=2, eval_steps=10, T_grid=[0, 5], T_anomaly=[5], windows=40, burn_in=2, n_samples=3,
                T=20, T_H=3, start_states=4, n_models=2, n_traj=5, gt_outcomes=5, reliability_lag=2,
                rounds=2, T_d=3)
    base.update(kw)
    return harness.ExperimentConfig(**base)


def test_random_policy_shares_q_per_step():
    pol = harness.random_collection_policy(np.random.default_rng(0))
    p = pol(np.ones((5000, 4)), None, None, 0)
    assert np.all(p == p[:, :1])
    assert abs(p.mean() - 0.5) < 3 * np.sqrt(1 / 12 / 5000)
    q = np.array([[0, 1, 0, 1]])
    assert np.all(harness.transmit_probs(pol, q, q, q, 0, None)[0, [0, 2]] == 0)


def test_collect_chaining_and_empty():
    cfg = default_config()
    env = MultiAccessEnv(cfg, 0)
    pol = harness.random_collection_policy(np.random.default_rng(1))
    assert harness.collect(env, pol, 0, np.random.default_rng(2)) == []
    data = harness.collect(env, pol, 10, np.random.default_rng(2))
    assert len(data) == 10
    assert all(a.s_next == b.s for a, b in zip(data, data[1:]))
    with pytest.raises(ValueError):
        harness.collect(env, pol, -1, np.random.default_rng(2))


def test_collected_generation_frequencies():
    data = harness.collect_random(default_config(), 10_000, 3)
    g = np.array([tr.s_next.g for tr in data])
    p = np.array([0.2, 0.4, 0.4])
    for c in ((0, 1), (2, 3)):
        counts = np.bincount(encode_bits(g[:, c]), minlength=4)
        assert counts[3] == 0
        assert chisquare(counts[:3], p * len(data)).pvalue > 1e-3


def test_config_validation_and_hash(tmp_path):
    with pytest.raises(ValueError):
        harness.ExperimentConfig(seeds=[])
    with pytest.raises(ValueError):
        harness.ExperimentConfig(kind="nope")
    with pytest.raises(ValueError):
        harness.ExperimentConfig(T_H=0)
    with pytest.raises(ValueError):
        harness.ExperimentConfig.from_dict({"bogus": 1})
    a = tiny("control")
    assert a.config_hash() == tiny("control", out=str(tmp_path)).config_hash()
    assert a.config_hash() != tiny("control", T_grid=[1]).config_hash()
    (tmp_path / "exp.yaml").write_text("kind: anomaly\nseeds: [1, 2]\nwindows: 10\n")
    c = harness.load_experiment_config(tmp_path / "exp.yaml", out="x")
    assert c.kind == "anomaly" and c.seeds == [1, 2] and c.out == "x"


def test_dataset_and_record_round_trip(tmp_path):
    data = harness.collect_random(default_config(), 12, 0)
    harness.save(data, tmp_path / "d.json")
    assert harness.load(tmp_path / "d.json", "dataset") == data
    post = learn(ModelStructure.from_env(default_config()), data, 0.01)
    harness.save(post, tmp_path / "p.json")
    assert harness.load(tmp_path / "p.json", "posterior") == post
    pol = coma.PolicySet(4, 1, 4, (8,), np.random.default_rng(0))
    harness.save(pol, tmp_path / "pol.bin")
    q = np.ones((3, 4), dtype=int)
    back = harness.load(tmp_path / "pol.bin", "policy")
    assert np.array_equal(back.transmit_probs(q, q, q, np.arange(3)), pol.transmit_probs(q, q, q, np.arange(3)))
    rec = harness.ExperimentRecord("control", {"a": 1}, "abc", [{"seed": 0, "x": 1.5}])
    harness.save(rec, tmp_path / "r.json")
    assert harness.load(tmp_path / "r.json", "record") == rec


def test_version_and_corruption_errors(tmp_path):
    harness.save(harness.collect_random(default_config(), 2, 0), tmp_path / "d.json")
    d = json.loads((tmp_path / "d.json").read_text())
    d["format_version"] += 1
    (tmp_path / "d.json").write_text(json.dumps(d))
    with pytest.raises(harness.ArtifactError, match="version"):
        harness.load(tmp_path / "d.json", "dataset")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(harness.ArtifactError, match="corrupt"):
        harness.load(tmp_path / "bad.json", "record")


def test_control_smoke_and_determinism(tmp_path):
    cfg = tiny("control", out=str(tmp_path))
    rec = harness.run_experiment(cfg)
    assert rec.ok and len(rec.rows) == 6
    assert set(rec.summary) == {f"{T}/{b}" for T in (0, 5) for b in cfg.backends}
    o = rec.values("throughput", backend="oracle")
    assert o[0] == o[1]
    again = harness.run_experiment(tiny("control"))
    assert again.rows == rec.rows
    first = (tmp_path / "control.csv").read_text().splitlines()[0]
    assert first == f"# config_hash={rec.config_hash}"
    assert harness.load(tmp_path / "record.json", "record").rows == rec.rows


def test_seed_failure_is_isolated(monkeypatch):
    real = harness.collect_random

    def flaky(config, T, seed):
        if seed == 1:
            raise RuntimeError("boom")
        return real(config, T, seed)

    monkeypatch.setattr(harness, "collect_random", flaky)
    rec = harness.run_experiment(tiny("control", seeds=[0, 1], backends=["oracle"]))
    assert list(rec.errors) == [1] and "boom" in rec.errors[1]
    assert {r["seed"] for r in rec.rows} == {0}


def test_anomaly_smoke(tmp_path):
    pol = coma.PolicySet(4, 1, 4, (8,), np.random.default_rng(0))
    rec = harness.run_anomaly_experiment(tiny("anomaly", out=str(tmp_path)), policy=pol)
    assert rec.ok and {r["backend"] for r in rec.rows} == {"bayesian", "frequentist-map"}
    assert all(0 <= r["auc"] <= 1 for r in rec.rows)
    assert rec.meta["variance_convention"] == "population"
    assert {"q10", "q25", "q75", "q90"} <= set(rec.summary["5/bayesian"])
    assert (tmp_path / "roc.csv").read_text().startswith("# config_hash=")


def test_roc_null_and_sign_flip():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=4000), rng.normal(size=4000)
    assert abs(monitor.roc_auc(x, y)[1] - 0.5) < 0.03
    a, b = rng.normal(size=50), rng.normal(0.5, size=50)
    assert monitor.roc_auc(-b, -a)[1] == pytest.approx(monitor.roc_auc(a, b)[1])


def test_monitoring_windows_shape():
    cfg = default_config()
    pol = coma.PolicySet(4, 1, 4, (8,), np.random.default_rng(0))
    w = harness.monitoring_windows(pol, cfg, 7, 2, 3, np.random.default_rng(0))
    assert len(w) == 14 and np.all(w.t[:2] == [3, 4])
    assert np.all(w.a <= w.q) and np.all(w.d2 <= w.a)


def test_prediction_smoke(tmp_path):
    rec = harness.run_experiment(tiny("prediction", out=str(tmp_path)))
    assert rec.ok and len(rec.rows) == 3 * 2
    assert set(rec.extras["0"]["reliability"]) == {"bayesian", "frequentist-map"}
    assert len(rec.meta["reliability"]["bayesian"]) == 10
    assert (tmp_path / "reliability.csv").exists()
    thr = harness.run_experiment(tiny("prediction", event="threshold", n_models=1))
    assert thr.ok and all(0 <= r["ece"] <= 1 for r in thr.rows)


def test_exploration_smoke(tmp_path):
    rec = harness.run_experiment(tiny("exploration", out=str(tmp_path)))
    assert rec.ok
    for arm in ("random", "optimized"):
        assert [r["n_data"] for r in rec.select(arm=arm)] == [3, 6]
    assert len(rec.extras["0"]["mi_trace"]) == 2 * 2 * 3
    assert (tmp_path / "mi_trace.csv").read_text().startswith("# config_hash=")


def test_cli_end_to_end(tmp_path, capsys):
    d, p, pol = tmp_path / "d.json", tmp_path / "post.json", tmp_path / "pol.bin"
    assert cli.main(["collect", "--steps", "30", "--out", str(d)]) == 0
    assert (tmp_path / "d.csv").exists()
    assert cli.main(["learn", "--data", str(d), "--out", str(p)]) == 0
    assert cli.main(["train", "--model", str(p), "--iterations", "2", "--out", str(pol)]) == 0
    assert cli.main(["evaluate", "--policy", str(pol), "--episodes", "2", "--steps", "5"]) == 0
    assert cli.main(["detect", "--model", str(p), "--data", str(d), "--samples", "3", "--factors", "gen0",
                     "--window", "5"]) == 0
    out = capsys.readouterr().out
    assert '"scores"' in out
    assert cli.main(["predict", "--model", str(p), "--policy", str(pol), "--start", "1,0,1,0;0,0,0,0;0,0,0,0",
                     "--horizon", "2", "--models", "2", "--traj", "5", "--backend", "bayesian"]) == 0
    assert cli.main(["detect", "--model", str(p), "--data", str(d), "--backend", "frequentist-map"]) == 2


def test_cli_errors(tmp_path, monkeypatch):
    assert cli.main(["learn", "--data", str(tmp_path / "missing.json")]) == 2
    real = harness.collect_random

    def flaky(config, T, seed):
        raise RuntimeError("boom")

    monkeypatch.setattr(harness, "collect_random", flaky)
    (tmp_path / "exp.yaml").write_text("backends: [oracle]\nT_grid: [1]\n")
    assert cli.main(["experiment", "control", "--config", str(tmp_path / "exp.yaml"), "--seed", "0"]) == 1
    monkeypatch.setattr(harness, "collect_random", real)
