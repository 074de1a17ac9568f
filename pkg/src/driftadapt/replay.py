"""Generative feature replay: frozen per-environment decoder snapshots,
conditional sampling, plus the memory-replay and noise-replay controls and
replay-as-augmentation.

A snapshot captures the decoder (with its normalization statistics), the
environment's condition id and label prior, and optionally the encoder and
the hypothesis classifier. Snapshots are deep copies: mutating the live
state never changes them.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .inference import decoder_condition


@dataclass
class Snapshot:
    env_index: int
    condition_id: int
    config: object  # InferenceConfig at capture time
    decoder_values: dict
    bn_stats: dict
    label_prior: np.ndarray
    encoder_values: dict = None
    hypothesis_values: dict = None

    def fingerprint(self):
        """Stable byte-level hash of every frozen array."""
        digest = hashlib.sha256()
        for group in (self.decoder_values, self.bn_stats,
                      self.encoder_values or {}, self.hypothesis_values or {}):
            for key in sorted(group):
                digest.update(key.encode())
                digest.update(np.ascontiguousarray(group[key]).tobytes())
        digest.update(self.label_prior.tobytes())
        return digest.hexdigest()

    def classes(self):
        return np.nonzero(self.label_prior)[0]


def _copy_values(values, prefix):
    return {k: v.copy() for k, v in values.items() if k.startswith(prefix)}


def take_snapshot(state, env, with_encoder=True, keep_hypothesis=True):
    """Freeze the decoder (and optionally encoder/hypothesis) after an env."""
    values = state.store_vae.values_dict()
    counts = np.bincount(env.support_y, minlength=state.config.num_classes).astype(np.float64)
    prior = counts / counts.sum()
    return Snapshot(
        env_index=env.index,
        condition_id=env.index,
        config=state.config,
        decoder_values=_copy_values(values, "dec."),
        bn_stats=state.dec_bn.stats_dict(),
        label_prior=prior,
        encoder_values=_copy_values(values, "enc.") if with_encoder else None,
        hypothesis_values=state.store_hyp.values_dict() if keep_hypothesis else None,
    )


def generate_features(snap, n, rng, label_mode="hypothesis"):
    """Sample n labeled features from the frozen decoder: h = g(z, c), z ~ N(0, I).

    label_mode "hypothesis": features are labeled by the frozen hypothesis
    classifier, restricted to the classes the environment actually saw.
    label_mode "condition": labels are drawn from the snapshot's label prior
    and fed to the decoder through the class slot of the condition (only
    meaningful when the decoder was trained with class conditioning).
    """
    cfg = snap.config
    if n == 0:
        return np.zeros((0, cfg.feature_dim)), np.zeros(0, dtype=np.intp)
    z = rng.standard_normal((n, cfg.latent_dim))
    if label_mode == "condition":
        y = rng.choice(cfg.num_classes, size=n, p=snap.label_prior).astype(np.intp)
        cond = decoder_condition(cfg, n, snap.condition_id, y)
    elif label_mode == "hypothesis":
        if snap.hypothesis_values is None:
            raise ValueError("hypothesis labeling requires a snapshot with a kept hypothesis")
        y = None
        cond = decoder_condition(cfg, n, snap.condition_id, None)
    else:
        raise ValueError(f"unknown label_mode {label_mode!r}")
    pre = np.maximum(nn.np_linear(snap.decoder_values, "dec.lin", np.concatenate([z, cond], axis=1)), 0.0)
    h = nn.np_batchnorm(snap.decoder_values, snap.bn_stats, "dec.bn", pre)
    if label_mode == "hypothesis":
        classes = snap.classes()
        logits = nn.np_two_layer(snap.hypothesis_values, "hyp", h)
        y = classes[np.argmax(logits[:, classes], axis=1)].astype(np.intp)
    return h, y


@dataclass
class MemoryBank:
    """Stored real (feature, label) pairs per environment, capped per class."""

    capacity_per_class: int = 64
    _features: dict = field(default_factory=dict)
    _labels: dict = field(default_factory=dict)

    def store(self, env_idx, h, y):
        h = np.asarray(h, dtype=np.float64)
        y = np.asarray(y, dtype=np.intp)
        keep_h, keep_y = [], []
        for c in np.unique(y):
            rows = np.nonzero(y == c)[0][: self.capacity_per_class]
            keep_h.append(h[rows])
            keep_y.append(y[rows])
        self._features[env_idx] = np.vstack(keep_h)
        self._labels[env_idx] = np.concatenate(keep_y)

    def size(self, env_idx):
        return len(self._labels.get(env_idx, ()))

    def stored(self, env_idx):
        return self._features[env_idx], self._labels[env_idx]

    def sample(self, env_idx, n, rng):
        """Uniform sample with replacement from the stored pairs."""
        if self.size(env_idx) == 0:
            raise ValueError(f"memory bank is empty for environment {env_idx}")
        idx = rng.integers(0, self.size(env_idx), size=n)
        return self._features[env_idx][idx], self._labels[env_idx][idx]


def memory_sample(bank, env_idx, n, rng):
    return bank.sample(env_idx, n, rng)


def noise_sample(feature_dim, n, label_range, rng):
    """Negative control: N(0, I) features with labels uniform over label_range."""
    label_range = np.asarray(label_range, dtype=np.intp)
    h = rng.standard_normal((n, feature_dim))
    y = label_range[rng.integers(0, len(label_range), size=n)]
    return h, y


def replay_counts(total, num_envs):
    """Split a replay budget evenly across past environments."""
    base, rem = divmod(total, num_envs)
    return [base + (1 if i < rem else 0) for i in range(num_envs)]


def augment_batch(snaps, h, y, ratio, rng, label_mode="condition"):
    """Replace a `ratio` fraction of the batch with generated features.

    Returns (merged_h, merged_y, kept_indices): kept_indices are the surviving
    rows of the original batch (in order), so callers that need gradients can
    re-slice their graph-attached copy of h.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    h = np.asarray(h, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    n = len(y)
    n_gen = int(round(ratio * n))
    if n_gen == 0 or not snaps:
        return h, y, np.arange(n, dtype=np.intp)
    kept = np.sort(rng.choice(n, size=n - n_gen, replace=False)).astype(np.intp)
    gen_h, gen_y = [], []
    for snap, count in zip(snaps, replay_counts(n_gen, len(snaps))):
        gh, gy = generate_features(snap, count, rng, label_mode)
        gen_h.append(gh)
        gen_y.append(gy)
    merged_h = np.vstack([h[kept]] + gen_h)
    merged_y = np.concatenate([y[kept]] + gen_y)
    return merged_h, merged_y, kept
