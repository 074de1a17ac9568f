"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Only the primitives the stream-adaptation networks actually need are
implemented: matmul, bias-add, elementwise arithmetic, ReLU, column
concatenation, row gather, batch normalization, and the fused loss heads
(softmax cross-entropy, diagonal-Gaussian KL, reparameterized sampling,
gradient reversal, and the adversarial query-disagreement term).

Everything is float64. No broadcasting beyond bias-add, no convolutions.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ParamStore",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "concat_cols",
    "concat_rows",
    "take_rows",
    "softmax_cross_entropy",
    "clamped_cross_entropy",
    "gaussian_kl",
    "reparameterize",
    "gradient_reverse",
    "neg_log_one_minus_prob",
    "batchnorm_train",
    "batchnorm_eval",
    "softmax",
    "adam_step",
    "sgd_step",
    "NumericError",
]

# query-term probabilities are capped at 1 - _ONE_MINUS_EPS before log(1-p)
_CLAMP = 1e-7


class NumericError(RuntimeError):
    """A forward or backward pass produced a non-finite value."""


class Tensor:
    """Dense n-d float64 array node in the computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_grad_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self.parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def backward(self):
        """Run reverse-mode accumulation from this (scalar) tensor."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar root, got shape {self.shape}")
        Tape(self).run()

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"


def _node(data, op, parents, grad_fn):
    """Build an interior graph node; drops edges when no parent needs grads."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out._grad_fn = grad_fn
    else:
        out.op = op
    return out


def constant(data):
    """Graph leaf that never receives gradients."""
    return Tensor(data, requires_grad=False)


class Tape:
    """Topologically ordered record of the graph below a root tensor.

    ``nodes`` lists every reachable tensor with parents before consumers,
    so the reversed walk visits each node exactly once and accumulates
    (never overwrites) parent gradients.
    """

    def __init__(self, root):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.root = root
        self.nodes = order  # parents precede children

    def run(self):
        root = self.root
        if root.grad is None:
            root.grad = np.ones_like(root.data)
        else:
            root.grad = root.grad + np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._grad_fn is None or node.grad is None:
                continue
            for parent, pgrad in zip(node.parents, node._grad_fn(node.grad)):
                if pgrad is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pgrad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out_data, "matmul", (a, b), grad_fn)


def add(a, b):
    """Elementwise add; the only broadcast allowed is bias-add (n,d)+(d,)."""
    bias = a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]
    if not bias and a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    out_data = a.data + b.data

    def grad_fn(g):
        return g, g.sum(axis=0) if bias else g

    return _node(out_data, "add", (a, b), grad_fn)


def sub(a, b):
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} - {b.shape}")

    def grad_fn(g):
        return g, -g

    return _node(a.data - b.data, "sub", (a, b), grad_fn)


def mul(a, b):
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")

    def grad_fn(g):
        return g * b.data, g * a.data

    return _node(a.data * b.data, "mul", (a, b), grad_fn)


def scale(a, c):
    c = float(c)

    def grad_fn(g):
        return (g * c,)

    return _node(a.data * c, "scale", (a,), grad_fn)


def relu(x):
    mask = x.data > 0.0  # subgradient at 0 is defined as 0

    def grad_fn(g):
        return (g * mask,)

    return _node(np.where(mask, x.data, 0.0), "relu", (x,), grad_fn)


def concat_cols(parts):
    """Concatenate 2-d tensors along columns (for input (+) one-hot condition)."""
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ValueError(f"concat_cols row mismatch: {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + widths)

    def grad_fn(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _node(out_data, "concat_cols", tuple(parts), grad_fn)


def take_rows(x, idx):
    idx = np.asarray(idx, dtype=np.intp)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node(x.data[idx], "take_rows", (x,), grad_fn)


def concat_rows(parts):
    """Stack 2-d tensors along rows (support and query share one batch)."""
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ValueError(f"concat_rows column mismatch: {[p.shape for p in parts]}")
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])
    out_data = np.concatenate([p.data for p in parts], axis=0)

    def grad_fn(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _node(out_data, "concat_rows", tuple(parts), grad_fn)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits):
    """Plain numpy softmax of a tensor or array (no graph)."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    return _softmax(z)


def softmax_cross_entropy(logits, labels):
    """Mean over rows of -log softmax(logits)[label], max-stabilized."""
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match logits rows {n}")
    if n == 0:
        return _node(np.float64(0.0), "softmax_cross_entropy", (logits,), lambda g: (np.zeros_like(logits.data),))
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k}): {labels.min()}..{labels.max()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsumexp - z[np.arange(n), labels]))
    p = _softmax(logits.data)

    def grad_fn(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return _node(np.float64(loss), "softmax_cross_entropy", (logits,), grad_fn)


def gaussian_kl(mu, logvar):
    """Mean over rows of KL(N(mu, diag(exp(logvar))) || N(0, I))."""
    if mu.shape != logvar.shape:
        raise ValueError(f"gaussian_kl shape mismatch: {mu.shape} vs {logvar.shape}")
    n = mu.shape[0]
    if n == 0:
        return _node(np.float64(0.0), "gaussian_kl", (mu, logvar),
                     lambda g: (np.zeros_like(mu.data), np.zeros_like(logvar.data)))
    ev = np.exp(logvar.data)
    total = 0.5 * np.sum(mu.data ** 2 + ev - 1.0 - logvar.data) / n

    def grad_fn(g):
        return mu.data * (g / n), (ev - 1.0) * (g / (2.0 * n))

    return _node(np.float64(total), "gaussian_kl", (mu, logvar), grad_fn)


def reparameterize(mu, logvar, noise):
    """z = mu + exp(logvar / 2) * noise; gradients reach mu and logvar only."""
    noise = np.asarray(noise, dtype=np.float64)
    if mu.shape != logvar.shape or mu.shape != noise.shape:
        raise ValueError(f"reparameterize shape mismatch: {mu.shape}, {logvar.shape}, {noise.shape}")
    std = np.exp(0.5 * logvar.data)

    def grad_fn(g):
        return g, g * 0.5 * std * noise

    return _node(mu.data + std * noise, "reparameterize", (mu, logvar), grad_fn)


def gradient_reverse(x, coeff):
    """Identity forward; backward multiplies the upstream gradient by -coeff."""
    coeff = float(coeff)
    if coeff < 0:
        raise ValueError(f"gradient_reverse coeff must be >= 0, got {coeff}")

    def grad_fn(g):
        return (-coeff * g,)

    return _node(x.data.copy(), "gradient_reverse", (x,), grad_fn)


def clamped_cross_entropy(logits, labels):
    """Mean -log(max(softmax(logits)[label], 1e-7)).

    Bounded variant of cross-entropy for the adversarial support term: rows
    at the floor contribute zero gradient, so ascending the term (through
    gradient reversal) cannot diverge.
    """
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    if n == 0:
        return _node(np.float64(0.0), "clamped_cross_entropy", (logits,),
                     lambda g: (np.zeros_like(logits.data),))
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k}): {labels.min()}..{labels.max()}")
    p = _softmax(logits.data)
    p_sel = p[np.arange(n), labels]
    clamped = p_sel < _CLAMP
    loss = float(np.mean(-np.log(np.maximum(p_sel, _CLAMP))))

    def grad_fn(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        d[clamped] = 0.0
        return (d * (g / n),)

    return _node(np.float64(loss), "clamped_cross_entropy", (logits,), grad_fn)


def neg_log_one_minus_prob(logits, idx):
    """Mean over rows of -log(1 - softmax(logits)[idx]).

    Probabilities are capped at 1 - 1e-7 before the log; rows at the cap
    contribute zero gradient.
    """
    idx = np.asarray(idx, dtype=np.intp)
    n, k = logits.shape
    if n == 0:
        return _node(np.float64(0.0), "neg_log_one_minus_prob", (logits,),
                     lambda g: (np.zeros_like(logits.data),))
    if idx.min() < 0 or idx.max() >= k:
        raise ValueError(f"index out of range [0, {k}): {idx.min()}..{idx.max()}")
    p = _softmax(logits.data)
    p_sel = p[np.arange(n), idx]
    clamped = p_sel > 1.0 - _CLAMP
    p_cap = np.where(clamped, 1.0 - _CLAMP, p_sel)
    loss = float(np.mean(-np.log1p(-p_cap)))

    def grad_fn(g):
        # d/dz of -log(1 - p_sel): (p_sel / (1 - p_sel)) * (onehot - p)
        factor = np.where(clamped, 0.0, p_sel / (1.0 - p_cap))
        d = -p * factor[:, None]
        d[np.arange(n), idx] += factor
        return (d * (g / n),)

    return _node(np.float64(loss), "neg_log_one_minus_prob", (logits,), grad_fn)


def batchnorm_train(x, gamma, beta, eps=1e-5):
    """Per-column standardization with learned scale/shift (training mode).

    Returns (y, batch_mean, batch_var); the stats are plain arrays for the
    caller's running-statistics update. Rejects batches of size 1.
    """
    n = x.shape[0]
    if n == 1:
        raise ValueError("batchnorm_train rejects batches of size 1; use eval mode")
    if n == 0:
        zero = np.zeros(x.shape[1])
        return _node(x.data.copy(), "batchnorm_train", (x, gamma, beta),
                     lambda g: (g, np.zeros_like(gamma.data), np.zeros_like(beta.data))), zero, zero + 1.0
    mean = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out_data = gamma.data * xhat + beta.data

    def grad_fn(g):
        dxhat = g * gamma.data
        dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _node(out_data, "batchnorm_train", (x, gamma, beta), grad_fn), mean, var


def batchnorm_eval(x, gamma, beta, running_mean, running_var, eps=1e-5):
    """Normalization against frozen running statistics (eval/generation mode)."""
    inv_std = 1.0 / np.sqrt(np.asarray(running_var) + eps)
    xhat = (x.data - np.asarray(running_mean)) * inv_std
    out_data = gamma.data * xhat + beta.data

    def grad_fn(g):
        return g * gamma.data * inv_std, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _node(out_data, "batchnorm_eval", (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# parameters and optimizers
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameter tensors plus per-parameter optimizer state.

    Adam moments and SGD velocity are zero-initialized when a parameter is
    registered; ``steps`` counts optimizer updates applied to this store.
    """

    def __init__(self):
        self.params = {}
        self.adam_m = {}
        self.adam_v = {}
        self.velocity = {}
        self.steps = 0

    def param(self, name, values):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.adam_m[name] = np.zeros_like(t.data)
        self.adam_v[name] = np.zeros_like(t.data)
        self.velocity[name] = np.zeros_like(t.data)
        return t

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def values_dict(self):
        """Copies of parameter values (no optimizer state)."""
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_values(self, values):
        for k, t in self.params.items():
            t.data = np.array(values[k], dtype=np.float64)

    def state_dict(self):
        return {
            "values": self.values_dict(),
            "adam_m": {k: v.copy() for k, v in self.adam_m.items()},
            "adam_v": {k: v.copy() for k, v in self.adam_v.items()},
            "velocity": {k: v.copy() for k, v in self.velocity.items()},
            "steps": self.steps,
        }

    def load_state_dict(self, state):
        self.load_values(state["values"])
        for k in self.params:
            self.adam_m[k] = np.array(state["adam_m"][k], dtype=np.float64)
            self.adam_v[k] = np.array(state["adam_v"][k], dtype=np.float64)
            self.velocity[k] = np.array(state["velocity"][k], dtype=np.float64)
        self.steps = int(state["steps"])

    def check_finite(self):
        for name, t in self.params.items():
            if not np.all(np.isfinite(t.data)):
                raise NumericError(f"non-finite values in parameter {name!r}")


def adam_step(store, lr, betas=(0.9, 0.999), eps=1e-8):
    """Standard bias-corrected Adam update over every parameter in the store."""
    b1, b2 = betas
    store.steps += 1
    t = store.steps
    for name, p in store.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def sgd_step(store, lr, momentum=0.9, weight_decay=5e-4):
    """Nesterov-momentum SGD with decoupled-in-gradient weight decay."""
    store.steps += 1
    for name, p in store.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        d = g + weight_decay * p.data
        buf = store.velocity[name]
        buf *= momentum
        buf += d
        if momentum > 0.0:
            d = d + momentum * buf  # Nesterov lookahead
        p.data -= lr * d
