"""Small trainable function approximators with explicit backward passes.

Everything is float64 numpy. Parameters are exposed as flat lists of arrays
(``params``) so one optimizer and one serializer serve every model.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LEAK = 0.01
WEIGHTS_FORMAT_VERSION = 1


def _uniform_init(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def sigmoid(a):
    out = np.empty_like(a, dtype=float)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax(logits, axis=-1):
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


class Mlp:
    """Affine layers with leaky-ReLU (slope 0.01) between them; identity output.

    Parameters
    ----------
    sizes : sequence of int
        ``[in, hidden..., out]``.
    seed : int or numpy.random.Generator
        Initialisation is uniform in +-1/sqrt(fan_in).
    """

    def __init__(self, sizes, seed=0):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.sizes = sizes
        self.params = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            self.params.append(_uniform_init(rng, a, (a, b)))
            self.params.append(_uniform_init(rng, a, (b,)))

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def copy(self) -> "Mlp":
        other = Mlp.__new__(Mlp)
        other.sizes = list(self.sizes)
        other.params = [p.copy() for p in self.params]
        return other

    def forward(self, x):
        """Return ``(output, cache)``; ``x`` is ``(in,)`` or ``(n, in)``."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"expected input dim {self.sizes[0]}, got {x.shape[-1]}")
        acts = [x]
        pre = []
        h = x
        for i in range(self.n_layers):
            a = h @ self.params[2 * i] + self.params[2 * i + 1]
            pre.append(a)
            h = a if i == self.n_layers - 1 else np.where(a > 0, a, LEAK * a)
            acts.append(h)
        return h, (acts, pre)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out):
        """Return ``(param_grads, input_grad)`` for upstream ``grad_out``."""
        acts, pre = cache
        g = np.asarray(grad_out, dtype=float)
        if g.shape != acts[-1].shape:
            raise ValueError(f"upstream grad shape {g.shape} != output shape {acts[-1].shape}")
        grads = [None] * len(self.params)
        for i in reversed(range(self.n_layers)):
            if i != self.n_layers - 1:
                g = g * np.where(pre[i] > 0, 1.0, LEAK)
            inp = acts[i]
            if inp.ndim == 1:
                grads[2 * i] = np.outer(inp, g)
                grads[2 * i + 1] = g.copy()
            else:
                grads[2 * i] = inp.T @ g
                grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
        return grads, g


def mlp_forward(m: Mlp, x):
    return m.forward(x)[0]


def mlp_backward(m: Mlp, x, upstream):
    _, cache = m.forward(x)
    return m.backward(cache, upstream)


class GruCell:
    """Gated recurrent unit.

    ``z = s(x Wz + h Uz + bz)``, ``r = s(x Wr + h Ur + br)``,
    ``n = tanh(x Wn + (r*h) Un + bn)``, ``h' = (1-z) n + z h``.
    """

    names = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wn", "Un", "bn")

    def __init__(self, input_size, hidden_size, seed=0):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.input_size = int(input_size)
        self.hidden_size = int(hidden_size)
        fan = self.input_size + self.hidden_size
        self.params = []
        for _ in range(3):
            self.params.append(_uniform_init(rng, fan, (self.input_size, self.hidden_size)))
            self.params.append(_uniform_init(rng, fan, (self.hidden_size, self.hidden_size)))
            self.params.append(_uniform_init(rng, fan, (self.hidden_size,)))

    def copy(self) -> "GruCell":
        other = GruCell.__new__(GruCell)
        other.input_size, other.hidden_size = self.input_size, self.hidden_size
        other.params = [p.copy() for p in self.params]
        return other

    def step(self, x, h):
        """One update; returns ``(h_new, cache)``."""
        x = np.asarray(x, dtype=float)
        h = np.asarray(h, dtype=float)
        if x.shape[-1] != self.input_size or h.shape[-1] != self.hidden_size:
            raise ValueError(f"GRU expects x[..., {self.input_size}] and h[..., {self.hidden_size}], "
                             f"got {x.shape} and {h.shape}")
        Wz, Uz, bz, Wr, Ur, br, Wn, Un, bn = self.params
        z = sigmoid(x @ Wz + h @ Uz + bz)
        r = sigmoid(x @ Wr + h @ Ur + br)
        rh = r * h
        n = np.tanh(x @ Wn + rh @ Un + bn)
        h_new = (1.0 - z) * n + z * h
        return h_new, (x, h, z, r, rh, n)

    def step_backward(self, cache, dh_new):
        """Gradients of one step: ``(param_grads, dx, dh)``."""
        x, h, z, r, rh, n = cache
        Wz, Uz, bz, Wr, Ur, br, Wn, Un, bn = self.params
        dn = dh_new * (1.0 - z)
        dz = dh_new * (h - n)
        dh = dh_new * z
        dan = dn * (1.0 - n * n)
        drh = dan @ Un.T
        dr = drh * h
        dh = dh + drh * r
        daz = dz * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        dx = daz @ Wz.T + dar @ Wr.T + dan @ Wn.T
        dh = dh + daz @ Uz.T + dar @ Ur.T

        def outer(a, b):
            return np.outer(a, b) if a.ndim == 1 else a.T @ b

        def colsum(a):
            return a.copy() if a.ndim == 1 else a.sum(axis=0)

        grads = [outer(x, daz), outer(h, daz), colsum(daz),
                 outer(x, dar), outer(h, dar), colsum(dar),
                 outer(x, dan), outer(rh, dan), colsum(dan)]
        return grads, dx, dh


def gru_step(c: GruCell, x, h):
    return c.step(x, h)[0]


def gru_forward_sequence(c: GruCell, xs, h0=None):
    """Run over ``xs`` of shape ``(T, ..., in)``; returns ``(hs, caches)`` with ``hs[t] = h_{t+1}``."""
    xs = np.asarray(xs, dtype=float)
    h = np.zeros(xs.shape[1:-1] + (c.hidden_size,)) if h0 is None else np.asarray(h0, float)
    hs, caches = [], []
    for t in range(xs.shape[0]):
        h, cache = c.step(xs[t], h)
        hs.append(h)
        caches.append(cache)
    return np.array(hs), caches


def gru_backward_through_time(c: GruCell, xs, upstream, h0=None):
    """Exact gradients for a loss whose derivative w.r.t. each ``h_t`` is ``upstream[t]``.

    Returns ``(param_grads, dxs, dh0)``.
    """
    _, caches = gru_forward_sequence(c, xs, h0)
    upstream = np.asarray(upstream, dtype=float)
    grads = [np.zeros_like(p) for p in c.params]
    dxs = np.zeros_like(np.asarray(xs, dtype=float))
    dh = np.zeros_like(upstream[0])
    for t in reversed(range(len(caches))):
        g, dx, dh = c.step_backward(caches[t], upstream[t] + dh)
        for acc, gi in zip(grads, g):
            acc += gi
        dxs[t] = dx
    return grads, dxs, dh


# losses


def cross_entropy_smoothed(logits, labels, smoothing=0.0, reduction="mean"):
    """Cross entropy against ``(1 - s) onehot + s / C``; returns ``(loss, dlogits)``."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    labels = np.atleast_1d(np.asarray(labels))
    n, c = logits.shape
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must be in [0, 1)")
    if labels.shape[0] != n or labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must be {n} integers in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    target = np.full((n, c), smoothing / c)
    target[np.arange(n), labels] += 1.0 - smoothing
    losses = -(target * logp).sum(axis=1)
    grad = np.exp(logp) - target
    if reduction == "mean":
        return float(losses.mean()), grad / n
    return float(losses.sum()), grad


def bce_logit(logits, labels, reduction="mean"):
    """Binary cross entropy on logits via softplus; returns ``(loss, dlogits)``."""
    a = np.asarray(logits, dtype=float)
    y = np.asarray(labels, dtype=float)
    if np.any((y < 0) | (y > 1)):
        raise ValueError("labels must lie in [0, 1]")
    # softplus(a) - y a
    losses = np.logaddexp(0.0, a) - y * a
    grad = sigmoid(np.atleast_1d(a)).reshape(a.shape) - y
    if reduction == "mean":
        n = max(a.size, 1)
        return float(losses.sum() / n), grad / n
    return float(losses.sum()), grad


def l2(u, v, reduction="sum"):
    """Squared L2 distance ``sum ||u - v||^2``; returns ``(loss, du, dv)``."""
    d = np.asarray(u, dtype=float) - np.asarray(v, dtype=float)
    loss = float(np.sum(d * d))
    g = 2.0 * d
    if reduction == "mean":
        n = d.shape[0] if d.ndim > 1 else 1
        loss /= n
        g = g / n
    return loss, g, -g


# optimisation


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_step(state: AdamState, params, grads) -> AdamState:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ValueError(f"grad shape {np.shape(g)} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient; aborting training")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def check_finite_loss(loss: float, what: str = "loss") -> float:
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite {what}; aborting training")
    return loss


def iter_minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


# persistence


def params_to_json(arch: dict, params, metadata: dict | None = None) -> dict:
    return {
        "version": WEIGHTS_FORMAT_VERSION,
        "arch": arch,
        "shapes": [list(p.shape) for p in params],
        "params": [np.asarray(p, float).ravel().tolist() for p in params],
        "metadata": metadata or {},
    }


def params_from_json(d: dict):
    if d.get("version") != WEIGHTS_FORMAT_VERSION:
        raise ValueError(f"unsupported weights format version {d.get('version')!r}")
    params = [np.array(flat, dtype=float).reshape(shape) for flat, shape in zip(d["params"], d["shapes"])]
    return d["arch"], params, d.get("metadata", {})


def save_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload))


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())


def params_digest(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p, dtype=float).tobytes())
    return h.hexdigest()[:16]
