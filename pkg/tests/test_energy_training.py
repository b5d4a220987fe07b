import numpy as np
import pytest

from mibounds import bounds_static as bs
from mibounds import enumeration as en
from mibounds import energy_training as et
from mibounds._numerics import logsumexp
from mibounds.models import DiscreteJoint, GaussianMixturePosteriorModel, LinearGaussianVAE
from mibounds import multisample_ais as ms
from mibounds.variational import (ConditionalGaussian, Critic, PriorProposal, TableCritic, TableProposal,
                                  constant_critic, optimal_critic)


def instance(seed, nx=4, nz=5):
    return (DiscreteJoint.random(nx, nz, seed), TableProposal.random(nx, nz, seed + 50),
            TableCritic.random(nx, nz, seed + 90))


def direct_ibal(m, q, T):
    """BA of the normalized energy posterior, written out cell by cell."""
    logpi = q.log_table + T
    logpi = logpi - logsumexp(logpi, axis=1)[:, None]
    mask = m.table > 0
    return float(np.sum(m.table[mask] * (logpi - m.log_pz[None, :])[mask]))


# ---------------------------------------------------------------------------
# MINE-DV / MINE-F / IBAL identities
# ---------------------------------------------------------------------------

def test_constant_critic_mine_equals_ba_exactly():
    m = LinearGaussianVAE.random(2, 3, 0)
    q = ConditionalGaussian(3, 2, "affine", seed=1)
    ba = bs.ba_lower(m, q, 400, 5)
    assert et.mine_dv(m, q, constant_critic(0.7), 400, 5).value == ba.value
    # the MINE-F term e^{T-1} cancels E_p[T] only at c = 1
    assert et.mine_f(m, q, constant_critic(1.0), 400, 5).value == ba.value
    d, qd, _ = instance(3)
    assert abs(en.mine_dv(d, qd, TableCritic.constant(4, 5, -2.0)) - en.ba_lower(d, qd)) < 1e-12
    assert abs(en.mine_f(d, qd, TableCritic.constant(4, 5, 1.0)) - en.ba_lower(d, qd)) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_enumerated_ladder_and_marginal_kl(seed):
    m, q, c = instance(seed)
    f, dv, ib = en.mine_f(m, q, c), en.mine_dv(m, q, c), en.ibal(m, q, c)
    assert f <= dv + 1e-12 <= ib + 2e-12 <= m.analytic_mi() + 3e-12
    # KL[p(x) || pi(x)] with pi(x) proportional to p(x) Z(x)
    logZ = logsumexp(q.log_table + c.table, axis=1)
    log_pix = np.log(m.px) + logZ - logsumexp(np.log(m.px) + logZ)
    kl = float(np.sum(m.px * (np.log(m.px) - log_pix)))
    assert abs((ib - dv) - kl) < 1e-10
    assert abs(en.marginal_kl(m, q, c) - kl) < 1e-10
    assert abs(ib - direct_ibal(m, q, c.table)) < 1e-10
    assert abs(et.ibal_value_exact(m, q, c) - ib) < 1e-15


@pytest.mark.parametrize("seed", range(5))
def test_ibal_gain_capped_by_posterior_kl(seed):
    m, q, c = instance(seed)
    post = m.table / m.px[:, None]
    mask = m.table > 0
    kl = float(np.sum(m.table[mask] * (np.log(post) - q.log_table)[mask]))
    assert en.ibal(m, q, c) - en.ba_lower(m, q) <= kl + 1e-10


def test_optimal_critic_is_tight():
    m, q, _ = instance(7)
    shift = np.random.default_rng(1).normal(size=4)
    c = TableCritic(en.optimal_critic_table(m, q, shift=shift))
    assert abs(et.ibal_value_exact(m, q, c) - m.analytic_mi()) < 1e-10
    # MINE-DV needs the unshifted T* = log p(x,z) / (p(x) q(z|x))
    star = TableCritic(en.optimal_critic_table(m, q) - np.log(m.px)[:, None])
    assert abs(en.mine_dv(m, q, star) - m.analytic_mi()) < 1e-10


def test_constant_critic_ibal_is_ba():
    m, q, _ = instance(8)
    assert abs(et.ibal_value_exact(m, q, TableCritic.constant(4, 5, 3.3)) - en.ba_lower(m, q)) < 1e-12


def test_giwae_converges_to_ibal_in_k():
    m = DiscreteJoint.random(3, 3, 4)
    q = TableProposal.random(3, 3, 5)
    c = TableCritic.random(3, 3, 6)
    ib = en.ibal(m, q, c)
    diffs = [abs(en.giwae(m, q, c, K)[0] - ib) for K in (1, 2, 4, 8, 16, 32, 64, 128, 256)]
    assert all(a > b for a, b in zip(diffs, diffs[1:]))
    assert diffs[-1] < diffs[4] and diffs[-1] < 2e-3


@pytest.mark.parametrize("seed", range(3))
def test_mc_mine_matches_enumeration(seed):
    m, q, c = instance(seed + 20)
    n = 100_000
    for est, exact in ((et.mine_f(m, q, c, n, seed), en.mine_f(m, q, c)),
                       (et.mine_dv(m, q, c, n, seed), en.mine_dv(m, q, c))):
        assert abs(est.value - exact) < 4 * est.std_error


def test_degenerate_dv_partition_raises():
    m = LinearGaussianVAE.random(1, 2, 0)
    q = ConditionalGaussian(2, 1, "affine", seed=None)
    with pytest.raises(et.DegenerateEstimateError):
        et.mine_dv(m, q, constant_critic(-np.inf), 50, 0)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def test_ibal_gradient_unbiased():
    m, q, c = instance(11, nx=3, nz=4)
    mean, se = et.mine_ais_gradient_mc(m, q, c, 100_000, 0)
    exact = en.ibal_grad_critic(m, q, c).ravel()
    z = np.abs(mean - exact) / np.maximum(se, 1e-12)
    assert np.all((z < 4) | (np.abs(mean - exact) < 1e-12))


def test_ibal_gradient_matches_finite_differences():
    m, q, c = instance(12)
    g = en.ibal_grad_critic(m, q, c).ravel()
    h = 1e-5
    fd = np.zeros_like(g)
    base = c.params.copy()
    for i in range(base.size):
        for s in (1, -1):
            p = base.copy()
            p[i] += s * h
            fd[i] += s * en.ibal(m, q, TableCritic(p.reshape(4, 5))) / (2 * h)
    assert np.allclose(g, fd, atol=1e-8)


def test_plug_in_optimal_critic_has_zero_gradient():
    m, q, _ = instance(13)
    c = TableCritic(en.optimal_critic_table(m, q))
    assert np.max(np.abs(en.ibal_grad_critic(m, q, c))) < 1e-12
    mean, se = et.mine_ais_gradient_mc(m, q, c, 20_000, 1)
    assert np.all(np.abs(mean) <= 4 * se + 1e-12)


def test_m0_negatives_give_zero_critic_gradient():
    m = LinearGaussianVAE.random(2, 3, 0)
    c = Critic(3, 2, (8,), seed=0)
    before = c.params.copy()
    st = et.train_mine_ais(m, PriorProposal(m), c, 3, 16, mcmc={"M": 0}, seed=0, lr=1e-2)
    assert np.array_equal(c.params, before)
    assert st.losses == [0.0, 0.0, 0.0]


def test_k1_giwae_critic_gradient_is_zero():
    m = LinearGaussianVAE.random(2, 3, 0)
    q = ConditionalGaussian(3, 2, "affine", seed=1)
    g = et.critic_gradient("giwae", m, q, Critic(3, 2, (8,), seed=2), 1, 32, 0)
    assert np.all(g == 0.0)


def test_negative_samples_target_energy_posterior():
    m, q, c = instance(14, nx=2, nz=3)
    pi = en.energy_posterior(m, q, c)
    rng = np.random.default_rng(0)
    x = np.repeat([0, 1], 50_000)
    z, acc = et.negative_samples(et.EnergyPosterior(q, c), x, np.zeros_like(x), 1, 0, 0.0, rng)
    assert acc == 1.0
    for xi in (0, 1):
        freq = np.bincount(z[x == xi], minlength=3) / 50_000
        assert np.all(np.abs(freq - pi[xi]) < 4 * np.sqrt(pi[xi] * (1 - pi[xi]) / 50_000) + 1e-12)


def test_hmc_negatives_match_posterior_with_optimal_critic():
    # at T* the energy posterior is p(z|x), so posterior-initialized HMC stays put in law
    m = LinearGaussianVAE.random(1, 2, 3)
    q = PriorProposal(m)
    energy = et.EnergyPosterior(q, optimal_critic(m, q))
    rng = np.random.default_rng(0)
    x, z = m.sample_joint(20_000, rng)
    zn, acc = et.negative_samples(energy, x, z, 5, 10, 0.2, rng)
    r = (zn - m.posterior_mean(x))[:, 0] / np.sqrt(m.posterior_cov[0, 0])
    assert abs(r.mean()) < 0.05 and abs(r.var() - 1) < 0.05
    assert 0.5 < acc <= 1.0


# ---------------------------------------------------------------------------
# AIS evaluation of the IBAL
# ---------------------------------------------------------------------------

def test_constant_critic_modes_equal_ba():
    m = LinearGaussianVAE.random(2, 4, 0)
    q = PriorProposal(m)
    ba = bs.ba_lower(m, q, 500, 3)
    energy = et.EnergyPosterior(q, constant_critic(0.4))
    assert energy.is_constant
    for mode in (et.UPPER, et.APPROX_LOWER):
        est = et.eval_ibal_ais(m, energy, 5, 3, 500, 3, mode=mode)
        assert np.allclose(est.draws, ba.draws, atol=1e-12)


def test_fixed_batch_evaluation_uses_given_rows():
    m = LinearGaussianVAE.random(2, 4, 0)
    q = PriorProposal(m)
    X, _ = m.sample_joint(40, 8)
    z = m.sample_posterior(X, np.random.default_rng(3))
    ba = q.log_prob(X, z) - m.log_prior(z)
    energy = et.EnergyPosterior(q, constant_critic(0.4))
    for mode in (et.UPPER, et.APPROX_LOWER):
        est = et.eval_ibal_ais(m, energy, 5, 3, 999, 3, mode=mode, data=X)
        assert est.draws.shape == (40,)
        assert np.allclose(est.draws, ba, atol=1e-12)


def test_t1_approx_lower_is_ba_on_shared_seed():
    m = LinearGaussianVAE.random(2, 4, 1)
    q = ConditionalGaussian(4, 2, "affine", seed=2)
    energy = et.EnergyPosterior(q, Critic(4, 2, (8,), seed=3))
    est = et.eval_ibal_ais(m, energy, 1, 4, 300, 9, mode=et.APPROX_LOWER)
    assert np.allclose(est.draws, bs.ba_lower(m, q, 300, 9).draws, atol=1e-12)
    assert est.approximate


def test_optimal_critic_modes_match_multisample_ais():
    m = LinearGaussianVAE.random(2, 5, 0)
    q = PriorProposal(m)
    energy = et.EnergyPosterior(q, optimal_critic(m, q))
    mi = m.analytic_mi()
    up = et.eval_ibal_ais(m, energy, 200, 4, 200, 0, mode=et.UPPER, schedule="sigmoid")
    lo = et.eval_ibal_ais(m, energy, 200, 4, 200, 0, mode=et.APPROX_LOWER, schedule="sigmoid")
    assert lo.value - 4 * lo.std_error <= mi <= up.value + 4 * up.std_error
    assert up.value - lo.value < 0.1
    path = ms.default_path(m, 200, kind="sigmoid")
    ref = ms.im_ais(m, path, None, 4, 200, 200, 0, direction="lower_logz")
    assert abs(up.value - ref.upper_mi.value) < 4 * np.hypot(up.std_error, ref.upper_mi.std_error)


def test_discrete_ibal_modes_bracket_exact_value():
    m, q, c = instance(15, nx=3, nz=4)
    energy = et.EnergyPosterior(q, c)
    exact = en.ibal(m, q, c)
    up = et.eval_ibal_ais(m, energy, 3, 2, 50_000, 0, mode=et.UPPER)
    assert up.value >= exact - 4 * up.std_error
    lo = et.eval_ibal_ais(m, energy, 3, 2, 50_000, 0, mode=et.APPROX_LOWER)
    assert lo.approximate and not up.approximate


def test_eval_ibal_argument_errors():
    m = LinearGaussianVAE.random(1, 2, 0)
    energy = et.EnergyPosterior(PriorProposal(m), constant_critic(0.0))
    with pytest.raises(ValueError):
        et.eval_ibal_ais(m, energy, 0, 1, 5, 0)
    with pytest.raises(ValueError):
        et.eval_ibal_ais(m, energy, 2, 1, 5, 0, mode="lower")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def test_trained_giwae_beats_ba():
    m = GaussianMixturePosteriorModel.default()
    q = ConditionalGaussian(1, 2, "affine", seed=0)
    et.train_bound("ba", m, q, None, 1, 800, 64, 0, lr=1e-2)
    ba = bs.ba_lower(m, q, 4000, 99)
    head = bs.iwae_lower_mi(m, q, 100, 4000, 99)[0].value - ba.value
    assert head > 1.0
    c = Critic(1, 2, (32, 32), seed=1)
    et.train_bound("giwae", m, q, c, 100, 600, 32, 1, lr=3e-3, train_q=False)
    g = bs.giwae_lower(m, q, c, 100, 4000, 99)[0]
    gain = g.draws - ba.draws
    assert gain.mean() > 0.5
    assert gain.mean() > 3 * gain.std(ddof=1) / np.sqrt(gain.size)


def test_mine_ais_training_improves_ibal():
    m, q, _ = instance(16, nx=3, nz=4)
    c = TableCritic.constant(3, 4)
    start = en.ibal(m, q, c)
    st = et.train_mine_ais(m, q, c, 300, 64, seed=0, lr=0.05)
    assert en.ibal(m, q, c) > start + 0.5 * (m.analytic_mi() - start)
    assert len(st.losses) == 300 and st.step == 300


def test_mine_ais_fixed_batch_only_touches_its_rows():
    m, q, _ = instance(16, nx=3, nz=4)
    c = TableCritic.constant(3, 4)
    et.train_mine_ais(m, q, c, 50, 8, seed=0, lr=0.05, data=np.zeros(5, dtype=int))
    assert np.ptp(c.table[0]) > 0
    assert np.all(c.table[1:] == 0.0)


def test_train_state_round_trip(tmp_path):
    m = LinearGaussianVAE.random(2, 3, 0)
    q = ConditionalGaussian(3, 2, "affine", seed=1)
    c = Critic(3, 2, (8,), seed=2)
    st = et.train_bound("giwae", m, q, c, 4, 5, 16, 0, lr=1e-2)
    p = tmp_path / "state.json"
    st.save(p)
    back = et.TrainState.load(p)
    assert back.to_json() == st.to_json()
    assert np.array_equal(back.critic_params, c.params)
    # resuming from the loaded state continues the same trajectory
    c2 = Critic(3, 2, (8,), params=back.critic_params)
    q2 = ConditionalGaussian(3, 2, "affine", seed=1)
    q2.params = back.q_params
    et.train_bound("giwae", m, q2, c2, 4, 3, 16, 7, lr=1e-2, state=back)
    et.train_bound("giwae", m, q, c, 4, 3, 16, 7, lr=1e-2, state=st)
    assert np.array_equal(c2.params, c.params) and back.step == 8


def test_nan_loss_aborts():
    m = LinearGaussianVAE.random(1, 2, 0)
    c = Critic(2, 1, (4,), seed=0)
    c.params = np.full_like(c.params, np.nan)
    with pytest.raises(et.TrainingError, match="non-finite"):
        et.train_bound("mine_dv", m, ConditionalGaussian(2, 1, "affine", seed=0), c, 1, 2, 8, 0)


def test_training_argument_errors():
    m = LinearGaussianVAE.random(1, 2, 0)
    q = ConditionalGaussian(2, 1, "affine", seed=0)
    with pytest.raises(ValueError):
        et.train_bound("nce", m, q, Critic(2, 1, (4,)), 2, 1, 4, 0)
    with pytest.raises(ValueError):
        et.train_bound("giwae", m, q, Critic(2, 1, (4,)), 2, 1, 4, 0, schedule="alternating")


def test_mine_ais_learning_rate_decays_linearly():
    m, q, _ = instance(16, nx=3, nz=4)
    st = et.train_mine_ais(m, q, TableCritic.constant(3, 4), 5, 8, seed=0, lr=0.05, lr_final=0.01)
    assert st.critic_opt.lr == pytest.approx(0.01)
    assert st.config["lr_final"] == 0.01
