import numpy as np
import pytest

from mibounds import ais_engine as ae
from mibounds import bounds_static as bs
from mibounds import enumeration as en
from mibounds import multisample_ais as ms
from mibounds._numerics import logmeanexp
from mibounds.models import (Capability, DiscreteJoint, LinearGaussianVAE, UnsupportedCapabilityError)
from mibounds.variational import ConditionalGaussian, PriorProposal, TableProposal


def _lvae():
    m = LinearGaussianVAE.random(2, 4, 3)
    q = ConditionalGaussian(4, 2, "mlp", hidden=6, seed=2)
    return m, q


@pytest.mark.parametrize("variant", ["im_ais", "cr_ais", "ir_ais"])
def test_k1_equals_single_sample_ais(variant):
    m, q = _lvae()
    path = ae.AnnealedPath.for_model(m, q, 6)
    kernel = ae.HMCKernel(0.2, 5)
    fn = ms.ESTIMATORS[variant]
    lo = fn(m, path, kernel, 1, 6, 40, 11, direction="lower_logz").lower_logz.draws
    hi = fn(m, path, kernel, 1, 6, 40, 11, direction="upper_logz").upper_logz.draws
    rng = np.random.default_rng(11)
    x, z = m.sample_joint(40, rng)
    assert np.array_equal(lo, ae.ais_forward(path, kernel, x, rng).log_weight)
    rng = np.random.default_rng(11)
    x, z = m.sample_joint(40, rng)
    assert np.array_equal(hi, ae.ais_backward(path, kernel, x, z, rng).log_weight)


def test_t1_im_equals_iwae_and_ir_equals_riwae():
    m, q = _lvae()
    path = ae.AnnealedPath.for_model(m, q, 1)
    for K in (1, 3, 7):
        im = ms.im_ais(m, path, None, K, 1, 60, 5, direction="upper_logz")
        iw_lo, _ = bs.iwae_lower_mi(m, q, K, 60, 5)
        assert np.array_equal(im.lower_mi.draws, iw_lo.draws)
        im_u = ms.im_ais(m, path, None, K, 1, 60, 5, direction="lower_logz")
        assert np.array_equal(im_u.upper_mi.draws, bs.iwae_upper_mi(m, q, K, 60, 5).draws)
        ir = ms.ir_ais(m, path, None, K, 1, 60, 5)
        rw = bs.riwae_bounds(m, q, K, 60, 5)
        assert np.array_equal(ir.lower_logz.draws, rw.lower_logz.draws)
        assert np.array_equal(ir.upper_logz.draws, rw.upper_logz.draws)


def test_t1_prior_base_saturates_at_log_k():
    m = LinearGaussianVAE.random(10, 100, 0)
    s = ms.im_ais(m, None, None, 100, 1, 500, 0, direction="upper_logz")
    assert abs(s.lower_mi.value - np.log(100)) < 0.05


def test_bdmc_is_composition():
    m, q = _lvae()
    path = ae.AnnealedPath.for_model(m, q, 4)
    b = ms.bdmc(m, path, ae.HMCKernel(0.2, 5), 3, 4, 30, 9)
    im = ms.im_ais(m, path, ae.HMCKernel(0.2, 5), 3, 4, 30, 9, direction="lower_logz")
    cr = ms.cr_ais(m, path, ae.HMCKernel(0.2, 5), 3, 4, 30, 9, direction="upper_logz")
    assert np.array_equal(b.lower_logz.draws, im.lower_logz.draws)
    assert np.array_equal(b.upper_logz.draws, cr.upper_logz.draws)
    assert np.array_equal(b.lower_mi.draws, cr.lower_mi.draws)


@pytest.mark.parametrize("variant", ["im_ais", "ir_ais", "cr_ais", "bdmc"])
@pytest.mark.parametrize("kernel_name", ["metropolis", "perfect"])
def test_discrete_enumeration_match(variant, kernel_name):
    m = DiscreteJoint.random(3, 4, 2)
    q = TableProposal.random(3, 4, 3)
    K, T, n = 2, 2, 100_000
    path = ae.AnnealedPath.for_model(m, q, T)
    kernel = ae.kernel_from_name(kernel_name, True)
    fn = ms.bdmc if variant == "bdmc" else ms.ESTIMATORS[variant]
    s = fn(m, path, kernel, K, T, n, 4)
    for d, est in (("lower_mi", s.lower_mi), ("upper_mi", s.upper_mi)):
        exact = en.enumerate_bound(m, {"estimator": variant, "direction": d, "q": q, "K": K,
                                       "path": path, "kernel": kernel})
        assert abs(est.value - exact) < 4 * est.std_error, (d, est.value, exact)


def test_enumerated_bounds_tighten_with_k_and_sandwich():
    m = DiscreteJoint.random(4, 4, 8)
    q = TableProposal.random(4, 4, 9)
    path = ae.AnnealedPath.for_model(m, q, 3)
    kernel = ae.DiscreteMetropolisKernel()
    mi = m.analytic_mi()
    for variant in ("im_ais", "ir_ais", "cr_ais"):
        prev = None
        for K in (1, 2, 3):
            lo, hi = en.ais_mi(m, path, kernel, variant, K)
            assert lo <= mi + 1e-12 <= hi + 2e-12
            if prev is not None:
                assert lo >= prev[0] - 1e-12 and hi <= prev[1] + 1e-12
            prev = (lo, hi)
    # log K caps on the improvement over single-sample AIS
    lo1, hi1 = en.ais_mi(m, path, kernel, "im_ais", 1)
    for K in (2, 3):
        assert en.ais_mi(m, path, kernel, "cr_ais", K)[0] <= lo1 + np.log(K) + 1e-12
        assert en.ais_mi(m, path, kernel, "cr_ais", K)[1] >= hi1 - np.log(K) - 1e-12
        assert en.ais_mi(m, path, kernel, "ir_ais", K)[1] >= hi1 - np.log(K) - 1e-12


def test_cr_upper_mi_improvement_capped_by_log_k():
    m, q = _lvae()
    path = ae.AnnealedPath.for_model(m, q, 5)
    kernel = ae.HMCKernel(0.2, 5)
    base = ms.ais_bounds(m, path, kernel, 5, 2000, 1, direction="lower_logz").upper_mi
    for K in (2, 4):
        cr = ms.cr_ais(m, path, kernel, K, 5, 2000, 1, direction="lower_logz").upper_mi
        assert cr.value >= base.value - np.log(K) - 3 * np.hypot(cr.std_error, base.std_error)


def test_perfect_bridge_cr_upper_nonincreasing_in_k():
    m = LinearGaussianVAE.random(2, 3, 0)
    base = ae.FixedGaussian(np.zeros(2), np.ones(2))
    path = ae.AnnealedPath.for_model(m, base, 3)
    vals = []
    for K in (1, 2, 4, 8):
        s = ms.cr_ais(m, path, ae.PerfectKernel(), K, 3, 20_000, 0, direction="upper_logz").upper_logz
        vals.append((s.value, s.std_error))
    for (a, sa), (b, sb) in zip(vals, vals[1:]):
        # common random numbers make neighbouring K strongly correlated; 3 sigma of the unpaired spread
        assert b <= a + 3 * np.hypot(sa, sb)


def test_perfect_bridge_gap_halves_with_t():
    m = LinearGaussianVAE.random(2, 3, 0)
    base = ae.FixedGaussian(np.zeros(2), np.ones(2))
    gaps = {}
    for T in (8, 16):
        path = ae.AnnealedPath.for_model(m, base, T)
        s = ms.bdmc(m, path, ae.PerfectKernel(), 2, T, 40_000, T)
        d = s.upper_logz.draws - s.lower_logz.draws
        gaps[T] = (d.mean(), d.std(ddof=1) / np.sqrt(d.size))
    r = gaps[8][0] / gaps[16][0]
    se = r * np.hypot(gaps[8][1] / gaps[8][0], gaps[16][1] / gaps[16][0])
    assert abs(r - 2.0) < 3 * se + 0.1


def test_bdmc_encloses_log_evidence_t500():
    m = LinearGaussianVAE.random(3, 6, 1)
    path = ae.AnnealedPath.for_model(m, PriorProposal(m), 500)
    x, _ = m.sample_joint(32, 0)
    kernel = ae.adapt_step_size(ae.HMCKernel(0.1, 10), path, x, warmup_iters=2, seed=0).kernel
    s = ms.bdmc(m, path, kernel, 2, 500, 64, 1)
    rng = np.random.default_rng(1)
    xs, _ = m.sample_joint(64, rng)
    ev = m.log_evidence(xs)
    d_lo = s.lower_logz.draws - ev
    d_hi = s.upper_logz.draws - ev
    assert d_lo.mean() <= 3 * d_lo.std(ddof=1) / 8
    assert d_hi.mean() >= -3 * d_hi.std(ddof=1) / 8
    assert s.upper_logz.value - s.lower_logz.value < 0.05


def test_bdmc_gap_shrinks_with_t_majority():
    m = LinearGaussianVAE.random(2, 6, 4)
    kernel = ae.HMCKernel(0.1, 5)
    wins = 0
    for r in range(20):
        gaps = []
        for T in (50, 200):
            path = ae.AnnealedPath.for_model(m, PriorProposal(m), T)
            s = ms.bdmc(m, path, kernel, 1, T, 20, 100 + r)
            gaps.append(s.upper_logz.value - s.lower_logz.value)
        wins += gaps[1] < gaps[0]
    assert wins >= 15


def test_capability_honesty():
    class NoPosterior(LinearGaussianVAE):
        capabilities = LinearGaussianVAE.capabilities & ~Capability.EXACT_POSTERIOR_SAMPLE

    m = NoPosterior(np.ones((3, 2)))
    kernel = ae.HMCKernel(0.1, 3)
    with pytest.raises(UnsupportedCapabilityError):
        ms.ir_ais(m, None, kernel, 2, 3, 5, 0, direction="lower_logz")
    with pytest.raises(UnsupportedCapabilityError):
        ms.cr_ais(m, None, kernel, 2, 3, 5, 0)
    with pytest.raises(UnsupportedCapabilityError):
        ms.im_ais(m, None, kernel, 2, 3, 5, 0)
    ok = ms.im_ais(m, None, kernel, 2, 3, 5, 0, direction="lower_logz")
    assert ok.upper_mi is not None and ok.lower_mi is None
    assert ms.cr_ais(m, None, kernel, 2, 3, 5, 0, direction="lower_logz").upper_mi is not None


def test_chain_slot_permutation_invariance():
    m, q = _lvae()
    path = ae.AnnealedPath.for_model(m, q, 3)
    kernel = ae.HMCKernel(0.2, 5)
    x, z = m.sample_joint(10, 0)
    est, w, _ = ms.im_upper_logz(path, kernel, x, z, 5, np.random.default_rng(1))
    perm = np.random.default_rng(2).permutation(5)
    assert np.allclose(logmeanexp(w[:, perm], axis=1), est, rtol=0, atol=1e-13)


def test_parameter_errors_and_diagnostics():
    m, q = _lvae()
    with pytest.raises(ValueError):
        ms.im_ais(m, None, None, 0, 3, 5, 0)
    with pytest.raises(ValueError):
        ms.im_ais(m, None, None, 1, 0, 5, 0)
    with pytest.raises(ValueError):
        ms.cr_ais(m, None, None, 1, 2, 5, 0, direction="sideways")
    s = ms.cr_ais(m, None, ae.HMCKernel(0.2, 5), 2, 4, 10, 0)
    assert 0.0 < s.diagnostics["mean_accept"] <= 1.0
    assert s.diagnostics["divergences"] == 0
    assert s.lower_mi.metadata["K"] == 2 and s.lower_mi.metadata["T"] == 4
