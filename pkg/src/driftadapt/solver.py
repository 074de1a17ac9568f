"""Unified downstream classifier over domain-agnostic features.

One solver serves every environment seen so far: per step it takes a
cross-entropy term on the current environment's inferred features (gradients
flow back into the inference path) plus one term per replayed past
environment. Replayed features are constants by construction.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn


class SolverState:
    """Two-layer classifier head over the whole label set."""

    def __init__(self, feature_dim, num_classes, hidden_dim, rng):
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.hidden_dim = hidden_dim
        self.store = ad.ParamStore()
        self.net = nn.TwoLayerHead(self.store, "sol", feature_dim, hidden_dim, num_classes, rng)

    def logits(self, h):
        return self.net(h if isinstance(h, ad.Tensor) else ad.constant(np.atleast_2d(h)))


def solver_loss(state, h_current, y_current, replayed):
    """CE on current real features plus one CE term per replayed environment.

    h_current may be graph-attached (end-to-end training) or None for a
    replay-only step; replayed is a list of (features, labels) arrays.
    """
    terms = []
    if h_current is not None:
        y_current = np.asarray(y_current, dtype=np.intp)
        if len(y_current) and (y_current.min() < 0 or y_current.max() >= state.num_classes):
            raise ValueError(f"label outside [0, {state.num_classes}): "
                             f"{y_current.min()}..{y_current.max()}")
        terms.append(ad.softmax_cross_entropy(state.logits(h_current), y_current))
    for h_i, y_i in replayed:
        terms.append(ad.softmax_cross_entropy(state.logits(ad.constant(h_i)), np.asarray(y_i, dtype=np.intp)))
    if not terms:
        return ad.constant(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def predict(state, h):
    """Argmax class per row under the current solver parameters."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    return np.argmax(nn.np_two_layer(state.store.values_dict(), "sol", h), axis=1)


def evaluate_accuracy(state, inference_for_env, envs_seen, scope, env_index=None,
                      predict_fn=None):
    """Query accuracy against hidden evaluation labels.

    inference_for_env(env) must return evaluation-mode features for the
    env's query set. Scope: "first_task" (first env), "env_i" (env_index
    required), or "all_seen" (equal-weight mean over seen envs).
    """
    if not envs_seen:
        raise ValueError("no environments presented yet")
    if predict_fn is None:
        predict_fn = lambda h: predict(state, h)

    def one(env):
        h = inference_for_env(env)
        return float(np.mean(predict_fn(h) == env.eval_labels()))

    if scope == "first_task":
        return one(envs_seen[0])
    if scope == "env_i":
        matches = [e for e in envs_seen if e.index == env_index]
        if not matches:
            raise ValueError(f"environment {env_index} not seen yet")
        return one(matches[0])
    if scope == "all_seen":
        return float(np.mean([one(e) for e in envs_seen]))
    raise ValueError(f"unknown scope {scope!r}")
