"""Small dense networks with hand-written reverse-mode gradients.

A :class:`Net` is a stack of affine layers.  Weights may carry a leading
*group* axis so that several independent networks of identical shape (for
example one actor per agent) run in a single batched matmul:

    W[l].shape == (in, out)            # plain network, input (B, in)
    W[l].shape == (G, in, out)         # G grouped networks, input (G, B, in)

Also here: Adam, diagonal-Gaussian variational parameters (reparameterised
sampling and closed-form KL) and the binary weight format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
HIDDEN_ACTIVATIONS = ("tanh", "relu")
OUTPUT_ACTIVATIONS = ("identity", "sigmoid", "softmax")


class NetError(ValueError):
    pass


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softplus_inv(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


class Net:
    """Feedforward network with cached activations for :meth:`backward`."""

    def __init__(
        self,
        sizes: list[int] | tuple[int, ...],
        hidden: str = "tanh",
        output: str = "identity",
        groups: int | None = None,
        rng: np.random.Generator | None = None,
        out_scale: float = 1.0,
    ):
        if len(sizes) < 2:
            raise NetError("need at least an input and an output size")
        if hidden not in HIDDEN_ACTIVATIONS:
            raise NetError(f"unknown hidden activation {hidden!r}")
        if output not in OUTPUT_ACTIVATIONS:
            raise NetError(f"unknown output activation {output!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.hidden = hidden
        self.output = output
        self.groups = groups
        rng = rng if rng is not None else np.random.default_rng(0)
        lead = () if groups is None else (groups,)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        n_layers = len(self.sizes) - 1
        for l, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            # fan-in scaled uniform
            bound = 1.0 / np.sqrt(n_in)
            if l == n_layers - 1:
                bound *= out_scale
            self.weights.append(rng.uniform(-bound, bound, size=lead + (n_in, n_out)))
            self.biases.append(np.zeros(lead + (n_out,)))
        self._cache: list[np.ndarray] | None = None

    # -- parameters -------------------------------------------------------
    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_params(self, params: list[np.ndarray]) -> None:
        if len(params) != 2 * len(self.weights):
            raise NetError("parameter list length mismatch")
        for l in range(len(self.weights)):
            w, b = params[2 * l], params[2 * l + 1]
            if w.shape != self.weights[l].shape or b.shape != self.biases[l].shape:
                raise NetError(f"shape mismatch in layer {l}")
            self.weights[l] = np.array(w, dtype=float)
            self.biases[l] = np.array(b, dtype=float)

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def copy(self) -> "Net":
        other = Net.__new__(Net)
        other.sizes = self.sizes
        other.hidden = self.hidden
        other.output = self.output
        other.groups = self.groups
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        other._cache = None
        return other

    # -- evaluation -------------------------------------------------------
    def _check_input(self, x: np.ndarray) -> None:
        want = 2 if self.groups is None else 3
        if x.ndim != want or x.shape[-1] != self.sizes[0]:
            raise NetError(
                f"input shape {x.shape} incompatible with layer 0 width {self.sizes[0]}"
                + ("" if self.groups is None else f" and {self.groups} groups")
            )
        if self.groups is not None and x.shape[0] != self.groups:
            raise NetError(f"expected {self.groups} groups, got {x.shape[0]}")

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        self._check_input(x)
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b[..., None, :] if self.groups is not None else h @ w + b
            if l < last:
                h = np.tanh(z) if self.hidden == "tanh" else np.maximum(z, 0.0)
            elif self.output == "sigmoid":
                h = sigmoid(z)
            elif self.output == "softmax":
                h = softmax(z)
            else:
                h = z
            acts.append(h)
        self._cache = acts if cache else None
        return h

    __call__ = forward

    def backward(self, grad_out: np.ndarray, input_grad: bool = False):
        """Gradients of ``sum(grad_out * forward(x))`` w.r.t. ``params``.

        Uses the activations cached by the last :meth:`forward`.  Returns a list
        aligned with :attr:`params`; with ``input_grad`` also the input gradient.
        """
        if self._cache is None:
            raise NetError("backward called without a cached forward pass")
        acts = self._cache
        g = np.asarray(grad_out, dtype=float)
        if g.shape != acts[-1].shape:
            raise NetError(f"grad_out shape {g.shape} != output shape {acts[-1].shape}")
        y = acts[-1]
        if self.output == "sigmoid":
            g = g * y * (1.0 - y)
        elif self.output == "softmax":
            g = y * (g - (g * y).sum(axis=-1, keepdims=True))
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        for l in range(len(self.weights) - 1, -1, -1):
            h_in = acts[l]
            grads[2 * l] = np.swapaxes(h_in, -1, -2) @ g
            grads[2 * l + 1] = g.sum(axis=-2)
            if l > 0 or input_grad:
                g = g @ np.swapaxes(self.weights[l], -1, -2)
                if l > 0:
                    h = acts[l]
                    g = g * (1.0 - h * h) if self.hidden == "tanh" else g * (h > 0)
        if input_grad:
            return grads, g
        return grads

    # -- persistence ------------------------------------------------------
    def manifest(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "sizes": list(self.sizes),
            "hidden": self.hidden,
            "output": self.output,
            "groups": self.groups,
            "shapes": [list(p.shape) for p in self.params],
        }

    def save(self, path: str | Path) -> None:
        """Write ``<path>`` (binary weights) and ``<path>.json`` (manifest)."""
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(encode_arrays(self.params))
        Path(str(path) + ".json").write_text(json.dumps(self.manifest(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "Net":
        path = Path(path)
        man_path = Path(str(path) + ".json")
        try:
            man = json.loads(man_path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise NetError(f"cannot read manifest {man_path}: {exc}") from exc
        if man.get("format_version") != FORMAT_VERSION:
            raise NetError(
                f"unsupported weight format version {man.get('format_version')!r} "
                f"(expected {FORMAT_VERSION})"
            )
        net = cls(man["sizes"], man["hidden"], man["output"], man["groups"])
        params = decode_arrays(path.read_bytes())
        if [list(p.shape) for p in params] != man["shapes"]:
            raise NetError(f"weight file {path} does not match its manifest")
        net.set_params(params)
        return net


def encode_arrays(arrays: list[np.ndarray]) -> bytes:
    """Little-endian float64 blobs, each preceded by ``ndim`` and its dims (uint64)."""
    chunks = [np.array([len(arrays)], dtype="<u8").tobytes()]
    for a in arrays:
        a = np.asarray(a, dtype="<f8")
        chunks.append(np.array([a.ndim, *a.shape], dtype="<u8").tobytes())
        chunks.append(a.tobytes(order="C"))
    return b"".join(chunks)


def decode_arrays(blob: bytes) -> list[np.ndarray]:
    try:
        pos = 0
        (n,) = np.frombuffer(blob, "<u8", 1, pos)
        pos += 8
        out = []
        for _ in range(int(n)):
            (ndim,) = np.frombuffer(blob, "<u8", 1, pos)
            pos += 8
            shape = tuple(int(s) for s in np.frombuffer(blob, "<u8", int(ndim), pos))
            pos += 8 * int(ndim)
            size = int(np.prod(shape)) if shape else 1
            out.append(np.frombuffer(blob, "<f8", size, pos).reshape(shape).copy())
            pos += 8 * size
    except ValueError as exc:
        raise NetError(f"corrupt weight blob: {exc}") from exc
    if pos != len(blob):
        raise NetError("corrupt weight blob: trailing bytes")
    return out


@dataclass
class Adam:
    """Adam; ``momentum=0, adaptive=False`` reduces it to plain gradient descent."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    adaptive: bool = True
    momentum: float | None = None
    t: int = 0
    m: list[np.ndarray] | None = field(default=None, repr=False)
    v: list[np.ndarray] | None = field(default=None, repr=False)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """In-place descent step."""
        opt_step(params, grads, self, self.lr)


def opt_step(params: list[np.ndarray], grads: list[np.ndarray], state: Adam, lr: float) -> list[np.ndarray]:
    if len(params) != len(grads):
        raise NetError("params/grads length mismatch")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise NetError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    if not state.adaptive:
        beta = state.momentum or 0.0
        if beta == 0.0:
            for p, g in zip(params, grads):
                p -= lr * g
            return params
        if state.m is None:
            state.m = [np.zeros_like(p) for p in params]
        for p, g, m in zip(params, grads, state.m):
            m *= beta
            m += g
            p -= lr * m
        return params
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass
class VariationalParams:
    """Mean-field Gaussian over a flat weight vector, sigma = softplus(rho)."""

    mu: np.ndarray
    rho: np.ndarray
    prior_sigma: np.ndarray

    def __post_init__(self) -> None:
        self.mu = np.asarray(self.mu, dtype=float)
        self.rho = np.asarray(self.rho, dtype=float)
        self.prior_sigma = np.broadcast_to(np.asarray(self.prior_sigma, dtype=float), self.mu.shape).copy()
        if self.mu.shape != self.rho.shape:
            raise NetError("mu and rho must have the same shape")
        if np.any(self.prior_sigma <= 0):
            raise NetError("prior standard deviations must be positive")

    @classmethod
    def for_net(cls, net: Net, sigma0: float = 0.05, prior_sigma: float = 1.0) -> "VariationalParams":
        mu = flatten(net.params)
        return cls(mu, np.full_like(mu, softplus_inv(sigma0)), np.full_like(mu, prior_sigma))

    @property
    def sigma(self) -> np.ndarray:
        return np.maximum(softplus(self.rho), 1e-12)

    def n_params(self) -> int:
        return 2 * self.mu.size


def flatten(arrays: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)


def unflatten(vec: np.ndarray, like: list[np.ndarray]) -> list[np.ndarray]:
    out, pos = [], 0
    for a in like:
        out.append(vec[pos : pos + a.size].reshape(a.shape))
        pos += a.size
    return out


def gaussian_sample(vp: VariationalParams, rng: np.random.Generator, eps: np.ndarray | None = None):
    """Reparameterised draw ``mu + sigma * eps``; returns ``(theta, eps)``."""
    if eps is None:
        eps = rng.standard_normal(vp.mu.shape)
    return vp.mu + vp.sigma * eps, eps


def kl_diag_gaussians(vp: VariationalParams, prior_sigma: np.ndarray | float | None = None) -> float:
    """KL(N(mu, sigma^2) || N(0, sigma_p^2)) summed over coordinates."""
    sp = vp.prior_sigma if prior_sigma is None else np.broadcast_to(prior_sigma, vp.mu.shape)
    s = vp.sigma
    return float(np.sum(np.log(sp / s) + (s * s + vp.mu * vp.mu) / (2.0 * sp * sp) - 0.5))


def kl_grads(vp: VariationalParams) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`kl_diag_gaussians` w.r.t. ``(mu, rho)``."""
    s = vp.sigma
    sp2 = vp.prior_sigma**2
    d_sigma = -1.0 / s + s / sp2
    return vp.mu / sp2, d_sigma * sigmoid(vp.rho)
