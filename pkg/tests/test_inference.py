"""Inference module tests: conditional encode/decode, the GRL schedule
closed form, the adversarial discrepancy formula, loss composition, warmup,
and the minimax gradient wiring.
"""

import numpy as np
import pytest

from driftadapt import autodiff as ad
from driftadapt.inference import (GrlSchedule, InferenceConfig, InferenceState,
                                  TrainSettings, decode, encode, grl_coeff,
                                  inference_loss, mdd_loss, np_infer_features,
                                  warmup)
from driftadapt.solver import SolverState
from driftadapt.streams import Environment


def tiny_state(**kw):
    cfg = dict(input_dim=2, condition_count=2, num_classes=2, latent_dim=2,
               feature_dim=4, hidden_dim=3)
    cfg.update(kw)
    return InferenceState(InferenceConfig(**cfg), np.random.default_rng(0))


def toy_env(n=60, gap=4.0, seed=0):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(n, 2)) + [-gap / 2, 0.0]
    x1 = rng.normal(size=(n, 2)) + [gap / 2, 0.0]
    x = np.vstack([x0, x1])
    y = np.array([0] * n + [1] * n)
    return Environment(0, x, y, x.copy(), y.copy())


class FixedNoise:
    """rng stand-in replaying a fixed noise sequence for repeatable losses."""

    def __init__(self, seed=0):
        self._rng = np.random.default_rng(seed)
        self._cache = {}
        self._calls = 0

    def standard_normal(self, shape):
        key = (self._calls, tuple(shape))
        self._calls += 1
        if key not in self._cache:
            self._cache[key] = self._rng.standard_normal(shape)
        return self._cache[key]

    def reset(self):
        self._calls = 0


# ---------------------------------------------------------------------------
# encode / decode
# ---------------------------------------------------------------------------

def test_encode_empty_batch():
    state = tiny_state()
    mu, logvar = encode(state, np.zeros((0, 2)), 0)
    assert mu.shape == (0, 2) and logvar.shape == (0, 2)


def test_encode_condition_changes_output():
    state = tiny_state()
    x = np.random.default_rng(1).normal(size=(5, 2))
    mu0, _ = encode(state, x, 0)
    mu1, _ = encode(state, x, 1)
    assert not np.allclose(mu0.data, mu1.data)


def test_encode_rejects_bad_width_and_condition():
    state = tiny_state()
    with pytest.raises(ValueError):
        encode(state, np.zeros((3, 5)), 0)
    with pytest.raises(ValueError):
        encode(state, np.zeros((3, 2)), 2)


def _set(store, name, values):
    store.params[name].data = np.array(values, dtype=np.float64)


def test_encode_matches_forward_by_hand_oracle():
    # 2-unit network with hand-set weights; expectation computed from the
    # written-out formula relu(x (+) onehot(c) @ W + b) @ Wmu + bmu
    state = tiny_state(hidden_dim=2)
    w_trunk = np.array([[0.5, -1.0], [1.0, 0.2], [0.3, 0.3], [-0.2, 0.4]])
    b_trunk = np.array([0.1, -0.1])
    w_mu = np.array([[1.0, 2.0], [-1.0, 0.5]])
    b_mu = np.array([0.05, -0.05])
    _set(state.store_vae, "enc.trunk.w", w_trunk)
    _set(state.store_vae, "enc.trunk.b", b_trunk)
    _set(state.store_vae, "enc.mu.w", w_mu)
    _set(state.store_vae, "enc.mu.b", b_mu)
    x = np.array([[0.0, 0.0], [1.0, -1.0]])
    mu, _ = encode(state, x, 1)
    inp = np.hstack([x, np.tile([0.0, 1.0], (2, 1))])
    hidden = np.maximum(inp @ w_trunk + b_trunk, 0.0)
    np.testing.assert_allclose(mu.data, hidden @ w_mu + b_mu, atol=1e-12)
    # x = 0: only the condition row and biases feed the output
    mu_zero, _ = encode(state, np.zeros((1, 2)), 1)
    expected = np.maximum(w_trunk[3] + b_trunk, 0.0) @ w_mu + b_mu
    np.testing.assert_allclose(mu_zero.data[0], expected, atol=1e-12)


def test_decode_shape_contract_and_determinism():
    state = tiny_state()
    z = np.random.default_rng(2).normal(size=(6, 2))
    h1 = decode(state, z, 0, class_labels=np.zeros(6, dtype=int), train=True)
    assert h1.shape == (6, 4)
    h_eval_a = decode(state, z, 0, train=False)
    h_eval_b = decode(state, z, 0, train=False)
    np.testing.assert_array_equal(h_eval_a.data, h_eval_b.data)


def test_decode_matches_manual_computation():
    # class-conditioned decoding mode: the class one-hot extends the condition
    state = tiny_state(latent_dim=1, feature_dim=2, condition_count=1,
                       num_classes=2, hidden_dim=2, condition_on_class=True)
    w = np.array([[1.0, -1.0], [0.5, 0.5], [2.0, 0.0], [0.0, 2.0]])  # z, env, class0, class1
    b = np.array([0.0, 0.1])
    _set(state.store_vae, "dec.lin.w", w)
    _set(state.store_vae, "dec.lin.b", b)
    z = np.array([[1.5], [-0.5]])
    labels = np.array([1, 0])
    h = decode(state, z, 0, class_labels=labels, train=False)
    inp = np.array([[1.5, 1.0, 0.0, 1.0], [-0.5, 1.0, 1.0, 0.0]])
    pre = np.maximum(inp @ w + b, 0.0)
    expected = (pre - state.dec_bn.running_mean) / np.sqrt(state.dec_bn.running_var + 1e-5)
    np.testing.assert_allclose(h.data, expected, atol=1e-12)


def test_np_infer_features_matches_autodiff_eval_path():
    state = tiny_state()
    x = np.random.default_rng(3).normal(size=(8, 2))
    mu, _ = encode(state, x, 1)
    h_ref = decode(state, mu, 1, class_labels=None, train=False)
    values = state.store_vae.values_dict()
    h_np = np_infer_features(state.config, values, values, state.dec_bn.stats_dict(), x, 1)
    np.testing.assert_allclose(h_np, h_ref.data, atol=1e-12)


# ---------------------------------------------------------------------------
# GRL schedule
# ---------------------------------------------------------------------------

def test_grl_coeff_zero_at_start():
    assert grl_coeff(GrlSchedule(), 0) == 0.0


def test_grl_coeff_limit():
    assert grl_coeff(GrlSchedule(amplitude=0.3, horizon=2000.0), 10**7) > 0.2999


def test_grl_coeff_at_horizon_matches_extended_precision():
    mp = pytest.importorskip("mpmath")
    mp.mp.dps = 40
    expected = 2 * mp.mpf("0.3") / (1 + mp.e ** (-mp.mpf(2000) / 2000)) - mp.mpf("0.3")
    got = grl_coeff(GrlSchedule(amplitude=0.3, horizon=2000.0), 2000)
    assert abs(got - float(expected)) < 1e-12


def test_grl_coeff_monotone_and_bounded():
    sched = GrlSchedule()
    values = [grl_coeff(sched, i) for i in range(0, 20000, 50)]
    assert all(0.0 <= v < 0.3 for v in values)
    assert all(b >= a for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        grl_coeff(sched, -1)


# ---------------------------------------------------------------------------
# adversarial discrepancy
# ---------------------------------------------------------------------------

def test_mdd_uniform_adversary_query_term_closed_form():
    # zeroed f and f' produce uniform outputs; query term = -log(1 - 1/K)
    state = tiny_state(num_classes=4)
    for store in (state.store_hyp, state.store_adv):
        for p in store.params.values():
            p.data[:] = 0.0
    h = ad.constant(np.random.default_rng(4).normal(size=(10, 4)))
    support, query = mdd_loss(state, h, None, h, gamma=4.0, coeff=0.1)
    assert abs(query.item() - (-np.log(1 - 0.25))) < 1e-12
    assert abs(support.item() - 4.0 * np.log(4)) < 1e-12


def test_mdd_empty_query_batch():
    state = tiny_state()
    h_s = ad.constant(np.random.default_rng(5).normal(size=(6, 4)))
    h_q = ad.constant(np.zeros((0, 4)))
    support, query = mdd_loss(state, h_s, None, h_q, gamma=2.0, coeff=0.1)
    assert query.item() == 0.0
    support_only, _ = mdd_loss(state, h_s, None, h_q, gamma=2.0, coeff=0.1)
    assert support.item() == support_only.item()


def test_mdd_matches_brute_force_formula():
    # hand evaluation of gamma*CE(f'(h_s), argmax f(h_s)) and
    # mean -log(1 - softmax(f'(h_q))[argmax f(h_q)]) in extended precision
    mp = pytest.importorskip("mpmath")
    mp.mp.dps = 40
    state = tiny_state(num_classes=2)
    rng = np.random.default_rng(6)
    h_s = rng.normal(size=(3, 4))
    h_q = rng.normal(size=(2, 4))
    gamma = 3.0
    support, query = mdd_loss(state, ad.constant(h_s), None, ad.constant(h_q),
                              gamma=gamma, coeff=0.2)

    def np_head(store, h):
        v = store.values_dict()
        hidden = np.maximum(h @ v["hyp.l1.w" if "hyp.l1.w" in v else "adv.l1.w"]
                            + v["hyp.l1.b" if "hyp.l1.b" in v else "adv.l1.b"], 0)
        k2 = "hyp.l2" if "hyp.l2.w" in v else "adv.l2"
        return hidden @ v[f"{k2}.w"] + v[f"{k2}.b"]

    f_s = np_head(state.store_hyp, h_s)
    f_q = np_head(state.store_hyp, h_q)
    adv_s = np_head(state.store_adv, h_s)
    adv_q = np_head(state.store_adv, h_q)

    exp_support = mp.mpf(0)
    for logits, target in zip(adv_s, np.argmax(f_s, axis=1)):
        denom = mp.fsum([mp.e ** mp.mpf(v) for v in logits])
        exp_support += -mp.log(mp.e ** mp.mpf(logits[target]) / denom)
    exp_support = gamma * exp_support / len(adv_s)
    exp_query = mp.mpf(0)
    for logits, target in zip(adv_q, np.argmax(f_q, axis=1)):
        denom = mp.fsum([mp.e ** mp.mpf(v) for v in logits])
        p = mp.e ** mp.mpf(logits[target]) / denom
        exp_query += -mp.log(1 - p)
    exp_query /= len(adv_q)
    assert abs(support.item() - float(exp_support)) < 1e-12
    assert abs(query.item() - float(exp_query)) < 1e-12


# ---------------------------------------------------------------------------
# loss composition and descent
# ---------------------------------------------------------------------------

def _toy_batches(state, n=16, seed=0):
    rng = np.random.default_rng(seed)
    xs = rng.normal(size=(n, state.config.input_dim))
    ys = rng.integers(0, state.config.num_classes, size=n)
    xq = rng.normal(size=(n, state.config.input_dim))
    return (xs, ys), xq


def test_inference_loss_beta_zero_is_supervised_cvae_loss():
    state = tiny_state(beta=0.0)
    batch_s, xq = _toy_batches(state)
    noise = FixedNoise()
    total, parts = inference_loss(state, batch_s, xq, 0, step=10, rng=noise)
    expected = parts["ce"].item() + state.config.kl_weight * parts["kl"].item()
    assert abs(total.item() - expected) < 1e-12


def test_inference_loss_zero_kl_weight_deterministic_encoder():
    state = tiny_state(kl_weight=0.0)
    # force logvar to a hard floor: weights zero, bias -40
    state.store_vae.params["enc.logvar.w"].data[:] = 0.0
    state.store_vae.params["enc.logvar.b"].data[:] = -40.0
    batch_s, xq = _toy_batches(state)
    total, parts = inference_loss(state, batch_s, xq, 0, step=100, rng=FixedNoise())
    mdd = parts["mdd_support"].item() + parts["mdd_query"].item()
    assert abs(total.item() - (parts["ce"].item() + state.config.beta * mdd)) < 1e-12
    # the reparameterized sample collapses onto mu
    mu, logvar = encode(state, batch_s[0], 0)
    z = ad.reparameterize(mu, logvar, np.random.default_rng(0).standard_normal(mu.shape))
    assert np.max(np.abs(z.data - mu.data)) < 1e-8


def test_one_small_step_decreases_loss_over_seeds():
    # descent check with frozen reparameterization noise, 10 random seeds
    wins = 0
    for seed in range(10):
        state = tiny_state()
        batch_s, xq = _toy_batches(state, seed=seed)
        noise = FixedNoise(seed)
        state.zero_grads()
        total, _ = inference_loss(state, batch_s, xq, 0, step=0, rng=noise)
        before = total.item()
        total.backward()
        ad.adam_step(state.store_vae, lr=1e-4)
        ad.sgd_step(state.store_hyp, lr=1e-3, momentum=0.0, weight_decay=0.0)
        ad.sgd_step(state.store_adv, lr=1e-3, momentum=0.0, weight_decay=0.0)
        noise.reset()
        after, _ = inference_loss(state, batch_s, xq, 0, step=0, rng=noise)
        if after.item() < before:
            wins += 1
    assert wins == 10


# ---------------------------------------------------------------------------
# warmup
# ---------------------------------------------------------------------------

def test_warmup_zero_steps_leaves_state():
    state = tiny_state()
    before = {k: v.copy() for k, v in state.store_vae.values_dict().items()}
    out = warmup(state, toy_env(), 0, np.random.default_rng(0))
    assert out == 0
    for k, v in state.store_vae.values_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_warmup_trains_f_on_separable_env():
    env = toy_env(n=80)
    state = InferenceState(InferenceConfig(input_dim=2, condition_count=1,
                                           num_classes=2), np.random.default_rng(1))
    warmup(state, env, 300, np.random.default_rng(2), TrainSettings(batch_size=32))
    values = state.store_vae.values_dict()
    h = np_infer_features(state.config, values, values, state.dec_bn.stats_dict(),
                          env.support_x, 0)
    hv = state.store_hyp.values_dict()
    logits = np.maximum(h @ hv["hyp.l1.w"] + hv["hyp.l1.b"], 0) @ hv["hyp.l2.w"] + hv["hyp.l2.b"]
    acc = np.mean(np.argmax(logits, axis=1) == env.support_y)
    assert acc > 0.9


def test_warmup_never_touches_solver_params():
    env = toy_env()
    state = InferenceState(InferenceConfig(input_dim=2, condition_count=1,
                                           num_classes=2), np.random.default_rng(3))
    solver = SolverState(32, 2, 16, np.random.default_rng(4))
    before = solver.store.values_dict()
    warmup(state, env, 20, np.random.default_rng(5), TrainSettings(batch_size=16))
    after = solver.store.values_dict()
    for k in before:
        np.testing.assert_array_equal(before[k], after[k])


def test_warmup_rejects_negative_steps():
    with pytest.raises(ValueError):
        warmup(tiny_state(), toy_env(), -1, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# minimax wiring
# ---------------------------------------------------------------------------

def test_minimax_reversed_gradient_is_minus_coeff_times_plain():
    # feature-side gradients through the GRL equal -coeff times the plain
    # pass; the adversary's own parameters receive the plain gradients
    state = tiny_state(num_classes=3, feature_dim=4)
    rng = np.random.default_rng(7)
    h_data = rng.normal(size=(5, 4))
    coeff = 0.37

    def adversary_loss(use_grl):
        h = ad.Tensor(h_data.copy(), requires_grad=True)
        inp = ad.gradient_reverse(h, coeff) if use_grl else h
        logits = state.adv(inp)
        loss = ad.softmax_cross_entropy(logits, np.array([0, 1, 2, 0, 1]))
        state.store_adv.zero_grad()
        loss.backward()
        return h.grad, {k: p.grad.copy() for k, p in state.store_adv.params.items()}

    grad_rev, adv_rev = adversary_loss(True)
    grad_plain, adv_plain = adversary_loss(False)
    np.testing.assert_allclose(grad_rev, -coeff * grad_plain, rtol=0, atol=1e-12)
    for k in adv_plain:
        np.testing.assert_allclose(adv_rev[k], adv_plain[k], rtol=0, atol=1e-12)


def test_minimax_wiring_through_full_inference_loss():
    # encoder parameters: grad(beta>0, coeff=c) - grad(beta=0) must equal
    # -c times the plain discrepancy gradient for every encoder parameter
    def encoder_grads(state, coeff, use_grl):
        batch_s, xq = _toy_batches(state, seed=3)
        noise = FixedNoise(3)
        mu_s, logvar_s = encode(state, batch_s[0], 0)
        z_s = ad.reparameterize(mu_s, logvar_s, noise.standard_normal(mu_s.shape))
        h_s = decode(state, z_s, 0, class_labels=batch_s[1], train=True)
        mu_q, logvar_q = encode(state, xq, 0)
        z_q = ad.reparameterize(mu_q, logvar_q, noise.standard_normal(mu_q.shape))
        h_q = decode(state, z_q, 0, class_labels=None, train=True)
        eff = coeff if use_grl else 0.0
        pred_s = np.argmax(state.hyp(h_s).data, axis=1)
        pred_q = np.argmax(state.hyp(h_q).data, axis=1)
        if use_grl:
            logits_s = state.adv(ad.gradient_reverse(h_s, coeff))
            logits_q = state.adv(ad.gradient_reverse(h_q, coeff))
        else:
            logits_s = state.adv(h_s)
            logits_q = state.adv(h_q)
        loss = ad.add(ad.scale(ad.softmax_cross_entropy(logits_s, pred_s), 4.0),
                      ad.neg_log_one_minus_prob(logits_q, pred_q))
        state.zero_grads()
        loss.backward()
        return {k: p.grad.copy() for k, p in state.store_vae.params.items()
                if p.grad is not None}

    coeff = 0.25
    state = tiny_state()
    reversed_grads = encoder_grads(state, coeff, use_grl=True)
    plain_grads = encoder_grads(state, coeff, use_grl=False)
    for k in plain_grads:
        np.testing.assert_allclose(reversed_grads[k], -coeff * plain_grads[k],
                                   rtol=0, atol=1e-12)
