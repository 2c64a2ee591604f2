"""Finite-difference oracles shared by the unit and acceptance suites."""

import numpy as np

from bayestwin import coma, dynmodel, nnkit
from bayestwin.env import default_config

EPS = 1e-4


def rel_error(a, b, floor=1e-8):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def fd_grad(f, x, eps=EPS):
    """Central differences of scalar ``f`` w.r.t. array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def net_gradcheck(net, x, rng):
    """Max relative error of ``backward`` for the loss ``sum(R * net(x))``."""
    out = net.forward(x)
    R = rng.standard_normal(out.shape)
    grads = net.backward(R)
    worst = 0.0
    for p, g in zip(net.params, grads):
        num = fd_grad(lambda: float(np.sum(R * net.forward(x, cache=False))), p)
        worst = max(worst, rel_error(g, num))
    return worst


def architectures(seed):
    """(name, net, input) for every network shape the package trains."""
    rng = np.random.default_rng(seed)
    K, q_cap, L = 4, 1, 4
    N = 6
    q = rng.integers(0, 2, (N, K))
    g = rng.integers(0, 2, (N, K))
    d = rng.integers(0, 2, (N, K))
    p = rng.integers(0, L, N)
    actor = coma.PolicySet(K, q_cap, L, (16, 16), rng)
    actor.net.weights[-1] *= 10  # move off the near-zero init so gradients are not tiny
    critic = coma.CriticPair(K, q_cap, L, (16, 16), rng)
    out = [("actor", actor.net, coma.encode_obs(q, g, d, q_cap)),
           ("critic", critic.net, critic.features(q, g, d, p))]
    for hidden, head in (("relu", "softmax"), ("tanh", "sigmoid")):
        out.append((f"{hidden}-{head}", nnkit.Net([5, 7, 3], hidden=hidden, output=head, rng=rng),
                    rng.standard_normal((4, 5))))
    return out


def vi_gradcheck(seed):
    """Relative error of the dynamics-net likelihood gradient in theta."""
    rng = np.random.default_rng(seed)
    st = dynmodel.ModelStructure.from_env(default_config(), neural=("channel",))
    spec = next(f for f in st.factors() if f.name == "channel")
    hidden = 8
    n = dynmodel._factor_net(spec, hidden, rng).n_params()
    theta = rng.standard_normal(n) * 0.5
    counts = np.where(spec.mask(), rng.integers(0, 5, (spec.n_ctx, spec.n_out)), 0).astype(float)
    _, g = dynmodel.neural_nll_and_grad(spec, theta, hidden, counts)
    num = fd_grad(lambda: dynmodel.neural_nll_and_grad(spec, theta, hidden, counts)[0], theta)
    return rel_error(g, num)


def brute_force_alpha(structure, data, prior):
    """Dirichlet tables by explicit per-transition counting."""
    counts = {f.name: np.zeros(f.mask().shape, dtype=np.int64) for f in structure.factors()
              if f.kind != dynmodel.KNOWN}
    for tr in data:
        for i, c in enumerate(structure.clusters):
            out = sum(tr.s_next.g[k] << j for j, k in enumerate(c))
            ctx = 0 if structure.memoryless else sum(tr.s.g[k] << j for j, k in enumerate(c))
            counts[f"gen{i}"][ctx, out] += 1
        counts["channel"][sum(tr.a), sum(tr.s_next.d)] += 1
    return {f.name: np.where(f.mask(), prior + counts[f.name], 0.0) for f in structure.factors()
            if f.name in counts}


def random_dataset(rng, T):
    """Transitions from the default system under uniformly random actions."""
    from bayestwin.env import MultiAccessEnv
    e = MultiAccessEnv(default_config(), int(rng.integers(0, 2**31)))
    return [e.step(rng.integers(0, 2, 4)) for _ in range(T)]
