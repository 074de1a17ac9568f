"""Variational domain-agnostic feature inference.

An environment-conditioned encoder maps inputs to a latent Gaussian, a
decoder turns sampled latents into feature vectors shared by both streams,
and a hypothesis pair (classifier f, adversary f') estimates the domain
discrepancy of the feature distributions. The adversary sees features
through a gradient-reversal layer, so one backward pass trains f' to
maximize the measured discrepancy while the encoder/decoder minimize it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .streams import sample_query, sample_support


@dataclass
class InferenceConfig:
    input_dim: int
    condition_count: int
    num_classes: int
    latent_dim: int = 8
    feature_dim: int = 32
    hidden_dim: int = 64
    beta: float = 1.0
    # unit KL weight sits exactly on the posterior-collapse boundary at this
    # scale (the class bit costs ln K and buys ln K); 0.1 keeps z informative
    kl_weight: float = 0.1
    gamma: float = 4.0
    # class-conditioned decoding makes generated labels trivial but starves
    # the unlabeled-query path; default keeps the condition environment-only
    condition_on_class: bool = False

    @property
    def decoder_condition_width(self):
        extra = self.num_classes if self.condition_on_class else 0
        return self.condition_count + extra


@dataclass
class GrlSchedule:
    """Coefficient ramp for the gradient-reversal layer: 0 up to `amplitude`."""

    amplitude: float = 0.3
    horizon: float = 2000.0


def grl_coeff(sched, i):
    if i < 0:
        raise ValueError(f"step must be >= 0, got {i}")
    return 2.0 * sched.amplitude / (1.0 + math.exp(-i / sched.horizon)) - sched.amplitude


@dataclass
class TrainSettings:
    """Optimizer settings: Adam drives the encoder/decoder, Nesterov SGD
    drives the hypothesis pair (and the solver, outside this module)."""

    batch_size: int = 64
    adam_lr: float = 1e-3
    sgd_lr: float = 2e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4


class InferenceState:
    """Parameters of the encoder, decoder, and hypothesis pair f / f'."""

    def __init__(self, config, rng):
        self.config = config
        self.store_vae = ad.ParamStore()   # encoder + decoder (Adam)
        self.store_hyp = ad.ParamStore()   # classifier f (SGD)
        self.store_adv = ad.ParamStore()   # adversary f' (SGD)
        c = config
        self.enc_trunk = nn.Linear(self.store_vae, "enc.trunk", c.input_dim + c.condition_count, c.hidden_dim, rng)
        self.enc_mu = nn.Linear(self.store_vae, "enc.mu", c.hidden_dim, c.latent_dim, rng)
        self.enc_logvar = nn.Linear(self.store_vae, "enc.logvar", c.hidden_dim, c.latent_dim, rng)
        self.dec_lin = nn.Linear(self.store_vae, "dec.lin", c.latent_dim + c.decoder_condition_width, c.feature_dim, rng)
        self.dec_bn = nn.BatchNorm1d(self.store_vae, "dec.bn", c.feature_dim)
        # f and f' share one architecture (two-layer heads)
        self.hyp = nn.TwoLayerHead(self.store_hyp, "hyp", c.feature_dim, c.hidden_dim, c.num_classes, rng)
        self.adv = nn.TwoLayerHead(self.store_adv, "adv", c.feature_dim, c.hidden_dim, c.num_classes, rng)

    def _check_condition(self, env_idx):
        if not 0 <= env_idx < self.config.condition_count:
            raise ValueError(f"condition id {env_idx} outside [0, {self.config.condition_count})")

    def zero_grads(self):
        self.store_vae.zero_grad()
        self.store_hyp.zero_grad()
        self.store_adv.zero_grad()


def _as_tensor(x):
    return x if isinstance(x, ad.Tensor) else ad.constant(np.atleast_2d(x))


def encode(state, x, env_idx):
    """Per-row (mu, logvar) of the latent posterior, conditioned on the environment."""
    state._check_condition(env_idx)
    x = _as_tensor(x)
    n = x.shape[0]
    if x.shape[1] != state.config.input_dim:
        raise ValueError(f"encode expects width {state.config.input_dim}, got {x.shape}")
    cond = ad.constant(nn.one_hot(np.full(n, env_idx, dtype=np.intp), state.config.condition_count))
    trunk = ad.relu(state.enc_trunk(ad.concat_cols([x, cond])))
    return state.enc_mu(trunk), state.enc_logvar(trunk)


def decoder_condition(config, n, env_idx, class_labels):
    """Environment one-hot, optionally extended with a class one-hot slot.

    Unlabeled rows (class_labels None, or label -1) carry zeros in the
    class slot.
    """
    cond = nn.one_hot(np.full(n, env_idx, dtype=np.intp), config.condition_count)
    if config.condition_on_class:
        cls = np.zeros((n, config.num_classes))
        if class_labels is not None:
            labels = np.asarray(class_labels, dtype=np.intp)
            rows = np.nonzero(labels >= 0)[0]
            cls[rows, labels[rows]] = 1.0
        cond = np.concatenate([cond, cls], axis=1)
    return cond


def decode(state, z, env_idx, class_labels=None, train=True):
    """Latents to domain-agnostic features: linear -> ReLU -> batch norm."""
    state._check_condition(env_idx)
    z = _as_tensor(z)
    if z.shape[1] != state.config.latent_dim:
        raise ValueError(f"decode expects width {state.config.latent_dim}, got {z.shape}")
    cond = ad.constant(decoder_condition(state.config, z.shape[0], env_idx, class_labels))
    pre = ad.relu(state.dec_lin(ad.concat_cols([z, cond])))
    return state.dec_bn(pre, train=train)


def mdd_loss(state, h_support, y_support, h_query, gamma, coeff):
    """Margin-style adversarial discrepancy between the two feature batches.

    Support term: gamma-scaled clamped cross-entropy of f'(h_s) toward f's
    current predictions. Query term: mean -log(1 - p_{f'}(f's prediction)).
    The adversary sees both batches through gradient reversal, so descending
    the summed loss trains f' to maximize the measured discrepancy while the
    feature path is pushed to shrink it. Both terms are probability-clamped,
    so the reversed (ascending) side stays bounded. Targets come from f's
    predictions, not from y_support.
    """
    del y_support  # kept for the operation contract; targets are f's argmax
    pred_s = np.argmax(state.hyp(h_support).data, axis=1) if h_support.shape[0] else np.zeros(0, dtype=np.intp)
    support_logits = state.adv(ad.gradient_reverse(h_support, coeff))
    support_term = ad.scale(ad.clamped_cross_entropy(support_logits, pred_s), gamma)
    pred_q = np.argmax(state.hyp(h_query).data, axis=1) if h_query.shape[0] else np.zeros(0, dtype=np.intp)
    query_logits = state.adv(ad.gradient_reverse(h_query, coeff))
    query_term = ad.neg_log_one_minus_prob(query_logits, pred_q)
    return support_term, query_term


def inference_loss(state, batch_support, batch_query, env_idx, step, rng,
                   sched=None):
    """Classification + KL + weighted adversarial discrepancy for one step.

    Returns (total, parts); parts carries the component tensors plus the
    graph-attached support/query features for downstream losses.
    """
    sched = sched or GrlSchedule()
    cfg = state.config
    x_s, y_s = batch_support
    x_q = batch_query
    y_s = np.asarray(y_s, dtype=np.intp)

    mu_s, logvar_s = encode(state, x_s, env_idx)
    z_s = ad.reparameterize(mu_s, logvar_s, rng.standard_normal(mu_s.shape))
    mu_q, logvar_q = encode(state, x_q, env_idx)
    z_q = ad.reparameterize(mu_q, logvar_q, rng.standard_normal(mu_q.shape))

    # One decoder batch carries the sampled latents (classifier/solver path)
    # and the posterior means (adversary path). Sharing the batch keeps the
    # normalization statistics common to both streams, and giving the
    # adversary the deterministic features stops the encoder from hiding
    # the domain offset under the reparameterization noise: the evaluation
    # path is exactly the mean path.
    n_s, n_q = z_s.shape[0], z_q.shape[0]
    labels_cat = np.concatenate([y_s, np.full(n_q, -1, dtype=np.intp),
                                 y_s, np.full(n_q, -1, dtype=np.intp)])
    h_all = decode(state, ad.concat_rows([z_s, z_q, mu_s, mu_q]), env_idx,
                   class_labels=labels_cat, train=True)
    offsets = np.cumsum([0, n_s, n_q, n_s, n_q])
    h_s, h_q, h_s_mean, h_q_mean = (
        ad.take_rows(h_all, np.arange(offsets[i], offsets[i + 1])) for i in range(4))

    ce = ad.softmax_cross_entropy(state.hyp(h_s), y_s)
    kl = ad.gaussian_kl(mu_s, logvar_s)
    coeff = grl_coeff(sched, step)
    mdd_support, mdd_query = mdd_loss(state, h_s_mean, y_s, h_q_mean, cfg.gamma, coeff)

    total = ad.add(ce, ad.scale(kl, cfg.kl_weight))
    total = ad.add(total, ad.scale(ad.add(mdd_support, mdd_query), cfg.beta))
    parts = {
        "ce": ce, "kl": kl, "mdd_support": mdd_support, "mdd_query": mdd_query,
        "coeff": coeff, "h_support": h_s, "h_query": h_q,
        "h_support_mean": h_s_mean, "h_query_mean": h_q_mean,
    }
    return total, parts


def step_inference_optimizers(state, settings):
    ad.adam_step(state.store_vae, settings.adam_lr)
    ad.sgd_step(state.store_hyp, settings.sgd_lr, settings.momentum, settings.weight_decay)
    ad.sgd_step(state.store_adv, settings.sgd_lr, settings.momentum, settings.weight_decay)


def warmup(state, env, steps, rng, settings=None, sched=None, start_step=0):
    """Train the inference module alone (no solver gradients) for `steps` steps."""
    if steps < 0:
        raise ValueError(f"warmup steps must be >= 0, got {steps}")
    settings = settings or TrainSettings()
    step = start_step
    for _ in range(steps):
        xs, ys = sample_support(env, settings.batch_size, rng)
        xq = sample_query(env, settings.batch_size, rng)
        state.zero_grads()
        total, _ = inference_loss(state, (xs, ys), xq, env.index, step, rng, sched)
        if not np.isfinite(total.item()):
            raise ad.NumericError(f"non-finite inference loss at warmup step {step}")
        total.backward()
        step_inference_optimizers(state, settings)
        step += 1
    return step


# ---------------------------------------------------------------------------
# evaluation-mode feature path (no gradients): z = mu, batch norm running stats
# ---------------------------------------------------------------------------

def np_infer_features(config, encoder_values, decoder_values, bn_stats, x, env_idx):
    """Deterministic features for evaluation/generation-time consumers."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    cond = nn.one_hot(np.full(n, env_idx, dtype=np.intp), config.condition_count)
    trunk = np.maximum(nn.np_linear(encoder_values, "enc.trunk", np.concatenate([x, cond], axis=1)), 0.0)
    mu = nn.np_linear(encoder_values, "enc.mu", trunk)
    dec_cond = decoder_condition(config, n, env_idx, None)
    pre = np.maximum(nn.np_linear(decoder_values, "dec.lin", np.concatenate([mu, dec_cond], axis=1)), 0.0)
    return nn.np_batchnorm(decoder_values, bn_stats, "dec.bn", pre)
