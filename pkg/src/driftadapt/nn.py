"""Small network building blocks on top of the autodiff primitives.

Layers register their parameters into a ParamStore under dotted names, so
optimizer state, snapshots, and checkpoints all key off the same names.
Evaluation and generation paths use the plain-numpy forwards at the bottom
of this module (no tape, no gradients).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def glorot_uniform(rng, n_in, n_out):
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out))


class Linear:
    def __init__(self, store, name, n_in, n_out, rng):
        self.name = name
        self.w = store.param(f"{name}.w", glorot_uniform(rng, n_in, n_out))
        self.b = store.param(f"{name}.b", np.zeros(n_out))

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.w), self.b)


class BatchNorm1d:
    """Per-batch standardization with learned scale/shift and running stats.

    Train mode normalizes with batch statistics and updates running
    statistics (unbiased variance, momentum 0.1); eval mode normalizes with
    the running statistics. Size-1 batches are valid only in eval mode.
    """

    def __init__(self, store, name, width, momentum=0.1, eps=1e-5):
        self.name = name
        self.gamma = store.param(f"{name}.gamma", np.ones(width))
        self.beta = store.param(f"{name}.beta", np.zeros(width))
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, train):
        if train:
            y, mean, var = ad.batchnorm_train(x, self.gamma, self.beta, self.eps)
            n = x.shape[0]
            if n >= 2:
                unbiased = var * n / (n - 1)
                self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
                self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
            return y
        return ad.batchnorm_eval(x, self.gamma, self.beta,
                                 self.running_mean, self.running_var, self.eps)

    def stats_dict(self):
        return {"mean": self.running_mean.copy(), "var": self.running_var.copy()}

    def load_stats(self, stats):
        self.running_mean = np.array(stats["mean"], dtype=np.float64)
        self.running_var = np.array(stats["var"], dtype=np.float64)


class TwoLayerHead:
    """Linear -> ReLU -> Linear classifier head."""

    def __init__(self, store, name, n_in, hidden, n_out, rng):
        self.l1 = Linear(store, f"{name}.l1", n_in, hidden, rng)
        self.l2 = Linear(store, f"{name}.l2", hidden, n_out, rng)

    def __call__(self, x):
        return self.l2(ad.relu(self.l1(x)))


def one_hot(indices, width):
    indices = np.asarray(indices, dtype=np.intp)
    out = np.zeros((indices.shape[0], width))
    out[np.arange(indices.shape[0]), indices] = 1.0
    return out


# ---------------------------------------------------------------------------
# plain-numpy forwards over parameter-value dicts (eval / generation paths)
# ---------------------------------------------------------------------------

def np_linear(values, name, x):
    return x @ values[f"{name}.w"] + values[f"{name}.b"]


def np_two_layer(values, name, x):
    h = np.maximum(np_linear(values, f"{name}.l1", x), 0.0)
    return np_linear(values, f"{name}.l2", h)


def np_batchnorm(values, stats, name, x, eps=1e-5):
    xhat = (x - stats["mean"]) / np.sqrt(stats["var"] + eps)
    return values[f"{name}.gamma"] * xhat + values[f"{name}.beta"]
