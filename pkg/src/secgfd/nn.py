"""Small dense reverse-mode kernel.

Covers exactly the operations the detector needs: affine maps, relu,
products with constant sparse matrices, concatenation and linear
combinations, row-wise cosine similarity and the two training losses.
Every op is recorded on a :class:`Tape`; :meth:`Tape.backward` replays the
tape in reverse and accumulates gradients into :class:`Param` objects.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import InternalError, InvalidInput

# ---------------------------------------------------------------- activations


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x):
    return (np.asarray(x) > 0).astype(np.float64)


def sigmoid(x):
    """Logistic function using the branch that never overflows."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def sigmoid_grad(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def softplus(x):
    """log(1 + e^x), stable for large |x|."""
    return np.logaddexp(0.0, x)


# -------------------------------------------------------------------- tensors


class Tensor:
    __slots__ = ("value", "parents", "backward_fn", "tape")

    def __init__(self, value, parents=(), backward_fn=None, tape=None):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Param(Tensor):
    """Learnable leaf: ``value`` and ``grad`` always share a shape."""

    __slots__ = ("grad", "name")

    def __init__(self, value, name=""):
        value = np.array(value, dtype=np.float64)
        super().__init__(value)
        self.grad = np.zeros_like(value)
        self.name = name

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape})"


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _tracked(x):
    return isinstance(x, Tensor)


class Tape:
    """Records one forward pass; replayed exactly once by :meth:`backward`."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._replayed = False

    def _record(self, value, parents, backward_fn):
        if self._replayed:
            raise InternalError("tape already replayed; record a new forward pass")
        node = Tensor(value, tuple(parents), backward_fn, self)
        self.nodes.append(node)
        return node

    def backward(self, out: Tensor, upstream=None):
        if self._replayed:
            raise InternalError("tape replayed twice")
        if out.tape is not self or not self.nodes or self.nodes[-1] is not out:
            raise InternalError("backward must start from the last recorded node")
        self._replayed = True
        seed = np.ones_like(out.value) if upstream is None else np.asarray(upstream, dtype=np.float64)
        if np.shape(seed) != np.shape(out.value):
            raise InternalError("upstream gradient shape mismatch")
        grads = {id(out): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not _tracked(parent):
                    continue
                if isinstance(parent, Param):
                    parent.grad += pg
                elif parent.tape is self:
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else prev + pg
                else:
                    raise InternalError("gradient reached a node from another tape")

    # ------------------------------------------------------------- ops

    def affine(self, X, W, b=None):
        """X @ W + b with row-broadcast bias."""
        x, w = _val(X), _val(W)
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
            raise InvalidInput(f"affine shape mismatch: {x.shape} @ {w.shape}")
        out = x @ w
        if b is not None:
            bv = _val(b)
            if bv.shape != (w.shape[1],):
                raise InvalidInput(f"bias shape {bv.shape} != ({w.shape[1]},)")
            out = out + bv

        def back(g):
            gx = g @ w.T if _tracked(X) else None
            gw = x.T @ g if _tracked(W) else None
            gb = g.sum(axis=0) if b is not None and _tracked(b) else None
            return gx, gw, gb

        return self._record(out, (X, W, b), back)

    def relu(self, X):
        x = _val(X)
        mask = x > 0
        return self._record(np.where(mask, x, 0.0), (X,), lambda g: (g * mask,))

    def sigmoid(self, X):
        s = sigmoid(_val(X))
        return self._record(s, (X,), lambda g: (g * s * (1.0 - s),))

    def spmm(self, S, X):
        """Constant sparse matrix times tracked dense matrix."""
        x = _val(X)
        if S.shape[1] != x.shape[0]:
            raise InvalidInput(f"shape mismatch: {S.shape} @ {x.shape}")
        St = S.T.tocsr()
        St.sort_indices()
        return self._record(S @ x, (X,), lambda g: (St @ g,))

    def scale(self, X, c):
        """Multiply by a constant scalar, or by a per-row constant vector."""
        c = np.asarray(c, dtype=np.float64)
        x = _val(X)
        cc = c[:, None] if c.ndim == 1 and x.ndim == 2 else c
        return self._record(x * cc, (X,), lambda g: (g * cc,))

    def lincomb(self, coefs, xs):
        out = sum(c * _val(x) for c, x in zip(coefs, xs))
        return self._record(out, tuple(xs), lambda g: tuple(c * g for c in coefs))

    def add(self, *xs):
        return self.lincomb([1.0] * len(xs), xs)

    def concat(self, xs):
        widths = [_val(x).shape[1] for x in xs]
        cuts = np.cumsum(widths)[:-1]
        out = np.concatenate([_val(x) for x in xs], axis=1)
        return self._record(out, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=1)))

    def row_cosine(self, A, B):
        """Row-wise cosine similarity; rows where either side is zero give 0."""
        a, b = _val(A), _val(B)
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        ok = (na > 0) & (nb > 0)
        inv_a = np.where(ok, 1.0 / np.where(ok, na, 1.0), 0.0)
        inv_b = np.where(ok, 1.0 / np.where(ok, nb, 1.0), 0.0)
        dot = np.einsum("ij,ij->i", a, b)
        s = dot * inv_a * inv_b

        def back(g):
            ga = g[:, None] * (b * (inv_a * inv_b)[:, None] - a * (s * inv_a ** 2)[:, None])
            gb = g[:, None] * (a * (inv_a * inv_b)[:, None] - b * (s * inv_b ** 2)[:, None])
            return ga, gb

        return self._record(s, (A, B), back)

    def weighted_bce(self, logits, y, mask, delta):
        value, grad = weighted_bce_with_logits(_val(logits), y, mask, delta)
        return self._record(np.float64(value), (logits,), lambda g: (g * grad,))

    def env_contrast(self, sims, y, mask):
        value, grad = env_contrast_loss(_val(sims), y, mask)
        return self._record(np.float64(value), (sims,), lambda g: (g * grad,))


# ------------------------------------------------------------------- losses


def weighted_bce_with_logits(logits, y, mask, delta):
    """Mean over masked nodes of -[delta*y*log p + (1-y)*log(1-p)], p = sigmoid(z).

    Returns ``(value, d value / d logits)``; the gradient has the logits' shape.
    """
    z = np.asarray(logits, dtype=np.float64)
    zf = z.reshape(-1)
    mask = np.asarray(mask, dtype=bool)
    yf = np.asarray(y).reshape(-1)
    n = int(mask.sum())
    if n == 0:
        raise InvalidInput("empty training mask")
    zm, ym = zf[mask], yf[mask].astype(np.float64)
    # -log p = softplus(-z), -log(1-p) = softplus(z); a saturated logit on a
    # zero-weight term must not produce 0 * inf
    with np.errstate(invalid="ignore"):
        pos = np.where(ym > 0, delta * ym * softplus(-zm), 0.0)
        neg = np.where(ym < 1, (1.0 - ym) * softplus(zm), 0.0)
    loss = np.sum(pos + neg) / n
    with np.errstate(invalid="ignore"):
        p = sigmoid(zm)
    g = np.zeros_like(zf)
    g[mask] = (-delta * ym * (1.0 - p) + (1.0 - ym) * p) / n
    return float(loss), g.reshape(z.shape)


def _logmeanexp(s):
    m = s.max()
    w = np.exp(s - m)
    return m + np.log(w.mean()), w / w.sum()


def env_contrast_loss(sims, y, mask):
    """-log( mean_normal e^s / mean_anomaly e^s ) over the masked nodes."""
    s = np.asarray(sims, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    y = np.asarray(y)
    normal = mask & (y == 0)
    anomaly = mask & (y == 1)
    if not normal.any() or not anomaly.any():
        raise InvalidInput("environment loss needs labelled normal and anomaly nodes")
    lse_n, w_n = _logmeanexp(s[normal])
    lse_a, w_a = _logmeanexp(s[anomaly])
    g = np.zeros_like(s)
    g[normal] = -w_n
    g[anomaly] = w_a
    return float(lse_a - lse_n), g


# ------------------------------------------------------------------ training


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Adam:
    """Adam with bias correction and optional L2 weight decay."""

    def __init__(self, params, lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {"step": self.step_count, "m": [a.copy() for a in self.m],
                "v": [a.copy() for a in self.v]}


def grad_check(loss_fn, params, epsilon=1e-5, n_coords=200, seed=0, floor=1e-6):
    """Largest relative error between tape gradients and central differences.

    ``loss_fn()`` must build a fresh tape and return ``(tape, loss_tensor)``.
    At least ``n_coords`` coordinates are sampled uniformly across all params
    (all of them when fewer exist). Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    for p in params:
        p.zero_grad()
    tape, loss = loss_fn()
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    sizes = np.array([p.value.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = np.arange(total) if total <= n_coords else rng.choice(total, n_coords, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for flat in np.sort(picks):
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(flat - offsets[pi], params[pi].value.shape)
        p = params[pi]
        orig = p.value[idx]
        p.value[idx] = orig + epsilon
        up = float(loss_fn()[1].value)
        p.value[idx] = orig - epsilon
        down = float(loss_fn()[1].value)
        p.value[idx] = orig
        num = (up - down) / (2 * epsilon)
        ana = analytic[pi][idx]
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
    return worst
