import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safeproj import autodiff as ad
from safeproj.constraints import InverterSetBuilder
from safeproj.envs.feeder import RadialFeeder, solve_powerflow
from safeproj.qp import LinearConstraintSet, project, project_node
from safeproj.sysid import linearize_grid
from safeproj.training.direct import DirectConfig, DirectGradientTrainer, curtailment_objective
from safeproj.training.memory import ReplayMemory, RolloutRecord
from safeproj.training.nn import (
    Module,
    RMSprop,
    checkpoint_text,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from safeproj.training.policies import (
    FeederPolicy,
    LSTMPolicy,
    SigmaSchedule,
    gaussian_logprob,
    gaussian_logprob_node,
)
from safeproj.training.ppo import PPOConfig, PPOTrainer, act, gae, imitate, ppo_loss


def param_fd_check(module, loss_fn, n_checks=12, h=1e-6, seed=0):
    """Max relative error between backprop and central differences on random entries."""
    rng = np.random.default_rng(seed)
    module.zero_grad()
    loss = loss_fn()
    ad.backward(loss)
    worst = 0.0
    named = module.named_parameters()
    names = list(named)
    for _ in range(n_checks):
        p = named[names[rng.integers(len(names))]]
        idx = tuple(rng.integers(s) for s in p.value.shape)
        g = p.grad[idx]
        old = p.value[idx]
        p.value[idx] = old + h
        fp = float(loss_fn().value)
        p.value[idx] = old - h
        fm = float(loss_fn().value)
        p.value[idx] = old
        fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(g - fd) / max(abs(fd), 1e-6))
    return worst


def zero_params(module):
    for p in module.params:
        p.value[...] = 0.0


def random_seq(rng, B, L):
    return rng.uniform(0, 1, size=(B, L, 7))


# ------------------------------------------------------------------ layers

def test_lstm_gradient_matches_fd():
    rng = np.random.default_rng(0)
    pol = LSTMPolicy(T=3, H=2, hidden=5, rng=rng)
    obs = random_seq(rng, 2, 5)
    w = rng.normal(size=(2, 3))
    err = param_fd_check(pol, lambda: ad.sum(ad.mul(ad.square(pol.forward_normalized(obs)), w)),
                         n_checks=30)
    assert err <= 1e-4


def test_lstm_zero_weights_constant_output():
    rng = np.random.default_rng(1)
    pol = LSTMPolicy(T=4, H=2, hidden=6, rng=rng)
    zero_params(pol)
    pol.head.b.value[...] = 0.3
    out = pol.forward_normalized(random_seq(rng, 3, 6)).value
    np.testing.assert_allclose(out, 0.3)
    np.testing.assert_allclose(pol.mean(random_seq(rng, 1, 6)).value, 20.0 + 45.0 * 0.3)


def test_lstm_stateless_between_calls():
    rng = np.random.default_rng(2)
    pol = LSTMPolicy(T=4, H=2, hidden=6, rng=rng)
    obs = random_seq(rng, 1, 6)
    a = pol.forward_normalized(obs).value
    pol.forward_normalized(random_seq(rng, 5, 6))
    np.testing.assert_array_equal(pol.forward_normalized(obs).value, a)
    with pytest.raises(ad.ContractError):
        pol.forward_normalized(random_seq(rng, 1, 5))


def test_feeder_policy_zero_weights_gives_biases():
    pol = FeederPolicy(5, [1, 3, 4], [0.02, 0.03, 0.04], rng=np.random.default_rng(0),
                       utility_hidden=(8, 4), inverter_hidden=(4, 3))
    zero_params(pol)
    pol.inv_b[-1].value[:] = np.array([[0.5, -0.25]])
    rng = np.random.default_rng(1)
    obs = rng.uniform(0, 0.02, size=(4, 15))
    out = pol.mean(obs).value
    s = np.array([0.02, 0.03, 0.04])
    # active power is a residual on each inverter's available power
    np.testing.assert_allclose(out[:, 0::2], obs[:, 10 + np.array([1, 3, 4])] + 0.5 * s)
    np.testing.assert_allclose(out[:, 1::2], np.tile(-0.25 * s, (4, 1)))


def test_feeder_policy_default_output_bias():
    pol = FeederPolicy(5, [1, 3], [0.02, 0.02], rng=np.random.default_rng(0))
    np.testing.assert_array_equal(pol.inv_b[-1].value[:, 0], 0.05)
    absolute = FeederPolicy(5, [1, 3], [0.02, 0.02], rng=np.random.default_rng(0), p_residual=False)
    np.testing.assert_array_equal(absolute.inv_b[-1].value[:, 0], 1.0)
    zero_params(absolute)
    np.testing.assert_array_equal(absolute.mean(np.ones((2, 15))).value, 0.0)
    with pytest.raises(ad.ContractError):
        pol.mean(np.zeros((1, 14)))


def test_inverter_heads_permute_with_local_observations():
    rng = np.random.default_rng(3)
    emb = ad.constant(rng.normal(size=(2, 6)))
    local = rng.normal(size=(3, 2, 3))
    swapped = local[[1, 0, 2]]
    shared = FeederPolicy(4, [0, 1, 2], [1.0] * 3, rng=rng, utility_hidden=(6,),
                          share_inverter_weights=True)
    a = shared.inverter_stage(emb, local).value
    b = shared.inverter_stage(emb, swapped).value
    np.testing.assert_allclose(b, a[[1, 0, 2]], atol=1e-14)
    # unshared heads: swapping observations and heads together swaps the outputs
    own = FeederPolicy(4, [0, 1, 2], [1.0] * 3, rng=rng, utility_hidden=(6,))
    a = own.inverter_stage(emb, local).value
    for W, bb in zip(own.inv_W, own.inv_b):
        W.value = W.value[[1, 0, 2]]
        bb.value = bb.value[[1, 0, 2]]
    b = own.inverter_stage(emb, swapped).value
    np.testing.assert_allclose(b, a[[1, 0, 2]], atol=1e-14)


def toy_feeder_case():
    f = RadialFeeder(np.array([0, 1]), np.array([0.04, 0.05]), np.array([0.02, 0.02]),
                     np.array([0, 1]))
    m = linearize_grid(lambda p, q: solve_powerflow(f, p, q), 2)
    s = np.array([0.5, 0.5])
    builder = InverterSetBuilder(m, f.pv_buses, s, M=8)
    pol = FeederPolicy(2, f.pv_buses, s, rng=np.random.default_rng(0), utility_hidden=(8, 6),
                       inverter_hidden=(5, 3))
    p_av = np.array([0.45, 0.45])
    C = builder.build(p_av, np.zeros(2), np.zeros(2))
    obs = np.concatenate([np.ones(2), np.zeros(2), p_av])[None]
    return pol, C, builder, p_av, obs


def test_end_to_end_gradient_through_projection():
    pol, C, _, p_av, obs = toy_feeder_case()
    u0 = project(pol.mean(obs).value[0], C)
    assert np.any(u0.lambda_star > 1e-6)  # some voltage/box rows bind

    def full_loss():
        u_hat = pol.mean(obs)
        u = project_node(u_hat, [C])
        main = curtailment_objective(u, p_av[None], pol.s)
        aux = ad.sum(ad.square(ad.sub(u, u_hat)))
        return ad.add(main, ad.mul(aux, 10.0))

    assert param_fd_check(pol, full_loss, n_checks=40, h=1e-6) <= 1e-3


# ---------------------------------------------------------------- training

def test_rmsprop_skips_nonfinite():
    p = ad.parameter([1.0])
    opt = RMSprop([p], lr=0.1)
    p.grad = np.array([np.nan])
    assert not opt.step()
    assert p.value[0] == 1.0
    p.grad = np.array([2.0])
    assert opt.step()
    # first RMSprop step: lr * g / sqrt((1 - alpha) g^2) = lr / 0.1
    np.testing.assert_allclose(p.value, [1.0 - 0.1 / np.sqrt(0.01)], atol=1e-6)


def test_checkpoint_roundtrip_is_byte_identical(tmp_path):
    pol = LSTMPolicy(T=3, H=2, hidden=4, rng=np.random.default_rng(0))
    save_checkpoint(tmp_path / "a.json", pol.state_dict(), {"seed": 0})
    state, meta = load_checkpoint(tmp_path / "a.json")
    pol2 = LSTMPolicy(T=3, H=2, hidden=4, rng=np.random.default_rng(9))
    pol2.load_state_dict(state)
    save_checkpoint(tmp_path / "b.json", pol2.state_dict(), meta)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    for k, v in pol.state_dict().items():
        np.testing.assert_array_equal(pol2.state_dict()[k], v)


def test_checkpoint_contracts():
    pol = LSTMPolicy(T=3, H=2, hidden=4)
    text = checkpoint_text(pol.state_dict())
    with pytest.raises(ValueError):
        parse_checkpoint(text.replace('"version":1', '"version":7'))
    with pytest.raises(ValueError):
        LSTMPolicy(T=3, H=2, hidden=5).load_state_dict(parse_checkpoint(text)[0])


def test_sigma_schedule_monotone():
    s = SigmaSchedule(0.1, 0.01, 100)
    vals = [s(k) for k in range(150)]
    assert vals[0] == 0.1 and vals[-1] == pytest.approx(0.01)
    assert np.all(np.diff(vals) <= 0)
    s.raise_floor(0.05)
    assert s(149) == 0.05


def test_gaussian_logprob_matches_scipy():
    from scipy.stats import norm

    rng = np.random.default_rng(0)
    mu = rng.normal(size=4)
    x = rng.normal(size=4)
    scale = np.array([1.0, 2.0, 0.5, 3.0])
    ref = np.sum(norm.logpdf(x / scale, mu / scale, 0.1))
    np.testing.assert_allclose(gaussian_logprob(x, mu, 0.1, scale), ref)
    node = gaussian_logprob_node(x[None], ad.constant(mu[None]), 0.1, scale)
    np.testing.assert_allclose(node.value[0], ref)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 15))
def test_memory_fifo_and_sampling(n, cap):
    mem = ReplayMemory(cap, rng=np.random.default_rng(n))
    for i in range(n):
        mem.append(RolloutRecord(np.array([i]), None, None, float(i)))
    kept = [r.cost for r in mem]
    assert kept == [float(i) for i in range(max(0, n - cap), n)]
    batch = mem.sample(8)
    costs = [r.cost for r in batch]
    assert len(costs) == len(set(costs)) == min(8, len(mem))
    assert set(costs) <= set(kept)
    assert [r.cost for r in mem.recent(3)] == kept[-3:]


def test_gae_matches_hand_computation():
    r = np.array([1.0, 0.0, 2.0])
    v = np.array([0.5, 0.2, 0.1])
    adv, ret = gae(r, v, bootstrap=0.3, gamma=0.9, lam=0.95)
    d = r + 0.9 * np.array([0.2, 0.1, 0.3]) - v
    expect = [d[0] + 0.855 * (d[1] + 0.855 * d[2]), d[1] + 0.855 * d[2], d[2]]
    np.testing.assert_allclose(adv, expect)
    np.testing.assert_allclose(ret, adv + v)


class BiasPolicy(Module):
    """Plan = a trainable bias, independent of the observation."""

    def __init__(self, b, scale=1.0):
        self.b = ad.parameter(np.asarray(b, dtype=np.float64))
        self.action_scale = scale

    def named_parameters(self):
        return {"b": self.b}

    def mean(self, obs):
        B = np.asarray(obs).reshape(-1, 1).shape[0] if np.ndim(obs) else 1
        return ad.stack([self.b] * B, axis=0)


def halfplane(n=1, hi=1.0):
    return LinearConstraintSet(n, G=np.eye(n), h=np.full(n, hi))


def test_ratio_one_at_old_parameters():
    pol = BiasPolicy([0.3, 0.2])
    rng = np.random.default_rng(0)
    C = LinearConstraintSet(2, G=[[1.0, 1.0]], h=[1.0])
    obs = np.zeros((16, 1))
    acts = [act(pol, obs[i], C, 0.1, rng, "prof") for i in range(16)]
    adv = rng.normal(size=16)
    for variant in ("prof", "clip"):
        cfg = PPOConfig(variant=variant, lambda_aux=0.0)
        samples = np.stack([a.sample for a in acts])
        if variant == "clip":
            acts_c = [act(pol, obs[i], C, 0.1, np.random.default_rng(i), "clip") for i in range(16)]
            samples = np.stack([a.sample for a in acts_c])
            lp = [a.logprob for a in acts_c]
        else:
            lp = [a.logprob for a in acts]
        loss, info = ppo_loss(pol, obs, [C] * 16, samples, lp, np.full(16, 0.1), adv, cfg)
        assert info["ratio_mean"] == pytest.approx(1.0, abs=1e-12)
        assert info["surrogate"] == pytest.approx(-adv.mean(), abs=1e-12)


def test_zero_advantage_update_is_auxiliary_only():
    pol = BiasPolicy([1.5, 0.2])  # outside {u1 + u2 <= 1}
    C = LinearConstraintSet(2, G=[[1.0, 1.0]], h=[1.0])
    rng = np.random.default_rng(0)
    obs = np.zeros((8, 1))
    acts = [act(pol, obs[i], C, 0.1, rng, "prof") for i in range(8)]
    samples = np.stack([a.sample for a in acts])
    lp = [a.logprob for a in acts]
    cfg = PPOConfig(variant="prof")
    pol.zero_grad()
    loss, info = ppo_loss(pol, obs, [C] * 8, samples, lp, np.full(8, 0.1), np.zeros(8), cfg)
    ad.backward(loss)
    g = pol.b.grad.copy()
    proj = project(pol.b.value, C).u_star
    # d/db lambda ||P(b) - b||^2 = -2 lambda (P(b) - b) since (P(b) - b) is normal to the face
    np.testing.assert_allclose(g, -2 * 10.0 * (proj - pol.b.value), atol=1e-9)


def test_ppo_reaches_boundary_optimum():
    # cost (u - 2)^2 with u <= 1: constrained optimum u = 1, cost 1
    pol = BiasPolicy([0.2])
    C = halfplane()
    cfg = PPOConfig(gae_lambda=0.0, variant="prof")
    trainer = PPOTrainer(pol, None, cfg, rng=np.random.default_rng(1))
    rng = np.random.default_rng(0)
    for _ in range(200):
        recs = []
        for _ in range(64):
            a = act(pol, np.zeros(1), C, 0.1, rng, "prof")
            recs.append(RolloutRecord(np.zeros(1), a.sample, a.u, float((a.u[0] - 2) ** 2), C=C,
                                      logprob=a.logprob, extra={"sigma": 0.1}))
        trainer.update(recs)
    u = project(pol.b.value, C).u_star[0]
    assert (u - 2) ** 2 <= 1.05


def test_nonfinite_loss_raises_sigma_floor():
    pol = BiasPolicy([0.2])
    sched = SigmaSchedule(0.1, 0.01, 10)
    trainer = PPOTrainer(pol, None, PPOConfig(), sigma_schedule=sched)
    rec = RolloutRecord(np.zeros(1), np.array([0.2]), np.array([0.2]), float("nan"), C=halfplane(),
                        logprob=0.0, extra={"sigma": 0.1})
    trainer.update([rec, rec])
    assert trainer.skipped > 0 and sched.floor == pytest.approx(0.02)


def test_ppo_config_validation():
    for kw in ({"variant": "x"}, {"gamma": 0.0}, {"eps": 0.0}, {"lambda_aux": -1.0}):
        with pytest.raises(ValueError):
            PPOConfig(**kw)


def test_act_executes_projected_plan():
    pol = BiasPolicy([3.0, 0.0])
    C = LinearConstraintSet(2, G=[[1.0, 0.0]], h=[1.0])
    rng = np.random.default_rng(0)
    for v in ("prof", "clip"):
        a = act(pol, np.zeros(1), C, 0.1, rng, v)
        assert C.contains(a.u, 1e-8) and C.contains(a.mu, 1e-8)
    a = act(pol, np.zeros(1), C, 0.1, rng, "prof", explore_dims=1)
    assert a.sample[1] == a.mu[1]
    d = act(pol, np.zeros(1), C, 0.1, rng, deterministic=True)
    np.testing.assert_allclose(d.u, [1.0, 0.0], atol=1e-8)


# ---------------------------------------------------------- direct gradient

def direct_case(p_av, row=None, lam=10.0, b0=(0.0, 0.0), objective=None):
    s = np.array([1.0])
    G = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
    h = [p_av, 0.0, 1.0, 1.0]
    if row is not None:
        G.append(row[0])
        h.append(row[1])
    C = LinearConstraintSet(2, G=G, h=h)
    pol = BiasPolicy(list(b0), scale=np.array([1.0, 1.0]))
    pol.s = s

    def batch_fn(records):
        n = len(records)
        return np.zeros((n, 1)), [C] * n, np.full((n, 1), p_av)

    # every sample is identical here, so small batches lose nothing
    cfg = DirectConfig(lr=1e-2, batches=2, batch=8, lambda_aux=lam)
    tr = DirectGradientTrainer(pol, batch_fn, cfg, objective=objective)
    mem = ReplayMemory(100)
    for _ in range(64):
        mem.append(RolloutRecord(np.zeros(1), None, None, 0.0))
    return tr, mem, C, pol


def test_direct_no_binding_reaches_p_av():
    tr, mem, C, pol = direct_case(0.6, b0=(0.1, 0.0))
    for _ in range(60):
        tr.update(mem)
    u = project(pol.b.value, C).u_star
    assert abs(u[0] - 0.6) <= 1e-3
    assert tr.history[-1]["objective"] <= 1e-3


def test_direct_single_row_reaches_halfspace_projection():
    # voltage-like row p <= 0.4 below p_av = 0.7: projection of p_av onto it is 0.4
    tr, mem, C, pol = direct_case(0.7, row=([1.0, 0.0], 0.4), b0=(0.1, 0.0))
    for _ in range(60):
        tr.update(mem)
    u = project(pol.b.value, C).u_star
    assert abs(u[0] - 0.4) <= 1e-3


def test_direct_without_auxiliary_stalls_on_boundary():
    # objective with interior optimum p = 0.2, start outside the set (p_hat > p_av)
    def obj(u, p_av, records):
        p = ad.slice(u, (slice(None), slice(0, 1)))
        return ad.mean(ad.square(ad.sub(p, 0.2)))

    runs = {}
    for lam in (0.0, 10.0):
        tr, mem, C, pol = direct_case(0.5, lam=lam, b0=(0.9, 0.0), objective=obj)
        for _ in range(200):
            tr.update(mem)
        runs[lam] = project(pol.b.value, C).u_star[0]
    assert runs[0.0] == pytest.approx(0.5, abs=1e-6)  # stuck at the face
    assert abs(runs[10.0] - 0.2) <= 1e-3


# --------------------------------------------------------------- imitation

def test_imitate_constant_expert():
    rng = np.random.default_rng(0)
    pol = LSTMPolicy(T=3, H=2, hidden=4, rng=rng)
    X = random_seq(rng, 128, 5)
    Y = np.full((128, 3), 42.5)
    hist = imitate(pol, X, Y, epochs=100, lr=1e-2, batch=32)
    # RMSprop steps have a fixed size, so finish with a smaller rate
    hist += imitate(pol, X, Y, epochs=100, lr=1e-3, batch=32)
    assert hist[-1] < 1e-3 and hist[-1] < hist[0]
    np.testing.assert_allclose(pol.mean(X[:4]).value, 42.5, atol=0.5)
