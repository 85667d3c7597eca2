"""Subset coder: posterior identities, ordinal probability model,
GP reconstruction term, KL, prediction rules, and gradient checks."""

import numpy as np
import pytest
import scipy.special as sp

from deepcoder import autodiff as ad, gp, vogpae
from deepcoder.autodiff import Tape
from deepcoder.errors import InvalidArgumentError, ShapeError

from conftest import fd_gradient, max_rel_error


def make_state(seed: int, n: int = 6, d0: int = 3, d1: int = 2,
               levels=None) -> vogpae.VogpaeState:
    levels = levels or [3, 4]
    rng = np.random.default_rng(seed)
    z0 = rng.standard_normal((n, d0))
    return vogpae.init_vogpae_state(z0, levels, d1, rng)


# ------------------------------------------------------------------- state

def test_init_threshold_quantiles():
    state = make_state(0, levels=[4])
    got = state.interior_thresholds(0)
    want = sp.ndtri(np.arange(1, 4) / 4.0)
    assert np.max(np.abs(got - want)) < 1e-10
    assert np.all(np.diff(got) > 0.0)


def test_init_defaults():
    state = make_state(1)
    assert state.d1 == 2
    assert abs(state.sigma_v2 - 0.1) < 1e-12
    assert abs(state.sigma_r2 - 0.1) < 1e-12
    assert np.all(state.params["log_S"] == 0.0)
    assert state.params["M"].shape == (6, 2)
    # M carries component scores of z0: top dimension near unit scale
    assert 0.2 < np.std(state.params["M"][:, 0]) < 3.0
    assert abs(np.mean(state.params["M"])) < 1.0


def test_init_mean_structure_tracks_inputs():
    # two well-separated z0 clusters must map to separated M rows
    rng = np.random.default_rng(7)
    z0 = np.vstack([rng.normal(-3.0, 0.05, (8, 4)),
                    rng.normal(3.0, 0.05, (8, 4))])
    state = vogpae.init_vogpae_state(z0, [3], 3, rng)
    m_top = state.params["M"][:, 0]
    gap = abs(np.mean(m_top[:8]) - np.mean(m_top[8:]))
    spread = max(np.std(m_top[:8]), np.std(m_top[8:]))
    assert gap > 4.0 * spread


def test_init_constant_inputs_fall_back_to_noise():
    rng = np.random.default_rng(3)
    state = vogpae.init_vogpae_state(np.ones((6, 3)), [3], 2, rng)
    m = state.params["M"]
    assert np.std(m) < 0.5  # N(0, 0.1) fallback scale
    assert np.std(m) > 0.0


def test_init_rejects_tiny_problems(rng):
    with pytest.raises(InvalidArgumentError):
        vogpae.init_vogpae_state(np.zeros((1, 3)), [3], 2, rng)
    with pytest.raises(InvalidArgumentError):
        vogpae.init_vogpae_state(np.zeros((4, 3)), [1], 2, rng)


# --------------------------------------------------------------- posterior

def test_posterior_identity_kernel_case():
    # sf2 -> 0 with unit noise makes K = I: q_mean = 0, q_var = S + 1
    state = make_state(2)
    state.params["dec.log_sf2"] = np.array(np.log(1e-18))
    state.params["dec.log_noise"] = np.array(0.0)
    state.params["log_S"] = np.log(0.5 + np.zeros((6, 2)))
    q_mean, q_var = vogpae.variational_posterior(state)
    assert np.max(np.abs(q_mean)) < 1e-9
    assert np.max(np.abs(q_var - 1.5)) < 1e-9


def test_posterior_matches_loo_assembly(rng):
    state = make_state(3, n=8)
    q_mean, q_var = vogpae.variational_posterior(state)
    kmat = gp.kernel_matrix(state.params["M"], state.params["M"],
                            state.dec_kernel()) + state.sigma_v2 * np.eye(8)
    loo_mean, loo_var = gp.loo_posterior(gp.CholFactor(kmat),
                                         state.params["M"])
    assert np.max(np.abs(q_mean - loo_mean)) < 1e-12
    ref_var = np.exp(state.params["log_S"]) + loo_var[:, None]
    assert np.max(np.abs(q_var - ref_var)) < 1e-12


def test_taped_posterior_matches_plain(rng):
    state = make_state(4, n=7)
    q_mean, q_var = vogpae.variational_posterior(state)
    tape = Tape()
    svars = vogpae.lift_state(tape, state)
    tm, tv = vogpae.taped_posterior(svars, 7)
    assert np.max(np.abs(tm.value - q_mean)) < 1e-10
    assert np.max(np.abs(tv.value - q_var)) < 1e-10


# ----------------------------------------------------------------- ordinal

def test_level_probs_symmetric_split():
    probs = vogpae.ordinal_level_probs(0.0, np.array([0.0]), 1.0)
    assert np.max(np.abs(probs - 0.5)) < 1e-12


def test_level_probs_far_left_mass():
    probs = vogpae.ordinal_level_probs(-100.0, np.array([-1.0, 0.0, 1.0]),
                                       1.0)
    assert abs(probs[0] - 1.0) < 1e-12
    assert np.max(probs[1:]) < 1e-12


def test_level_probs_match_quadrature_oracle():
    import mpmath
    mpmath.mp.dps = 30
    gamma = np.array([-1.0, 0.0, 1.0])
    f, sig = 0.3, 0.5
    probs = vogpae.ordinal_level_probs(f, gamma, sig)
    edges = [-mpmath.inf] + [mpmath.mpf(g) for g in gamma] + [mpmath.inf]
    for s in range(4):
        hi = (edges[s + 1] - f) / sig
        lo = (edges[s] - f) / sig
        ref = float(mpmath.ncdf(hi) - mpmath.ncdf(lo))
        assert abs(probs[s] - ref) < 1e-12
    assert abs(probs.sum() - 1.0) < 1e-12


def test_level_probs_reject_disorder():
    with pytest.raises(InvalidArgumentError):
        vogpae.ordinal_level_probs(0.0, np.array([0.5, 0.1]), 1.0)
    with pytest.raises(InvalidArgumentError):
        vogpae.ordinal_level_probs(0.0, np.array([0.0]), 0.0)


def test_ordinal_loglik_uniform_construction():
    # thresholds at standard-normal quantiles with f=0 and sigma_o=1
    # give exactly uniform level probabilities
    levels = [4]
    n, d1 = 5, 2
    state = make_state(5, n=n, d1=d1, levels=levels)
    state.params["cls.w"] = np.zeros((d1, 1))
    state.params["cls.log_sigma"] = np.array(0.0)
    y = np.array([[1], [2], [3], [4], [2]])
    tape = Tape()
    svars = vogpae.lift_state(tape, state)
    z1 = [tape.leaf(np.zeros((n, d1)))]
    ll = vogpae.ordinal_loglik(z1, y, svars, levels)
    assert abs(float(ll.value) - n * np.log(0.25)) < 1e-9


def test_ordinal_loglik_certain_region():
    levels = [2]
    state = make_state(6, n=2, d1=1, levels=levels)
    state.params["cls.w"] = np.array([[1.0]])
    state.params["cls.log_sigma"] = np.array(0.0)
    state.params["cls.gamma0_q0"] = np.array([0.0])
    y = np.array([[2], [2]])
    tape = Tape()
    svars = vogpae.lift_state(tape, state)
    z1 = [tape.leaf(np.full((2, 1), 30.0))]
    ll = vogpae.ordinal_loglik(z1, y, svars, levels)
    assert abs(float(ll.value)) < 1e-9


def test_ordinal_loglik_matches_per_term_oracle(rng):
    levels = [3, 4]
    n, d1 = 4, 2
    state = make_state(7, n=n, d1=d1, levels=levels)
    y = np.column_stack([rng.integers(1, 4, n), rng.integers(1, 5, n)])
    z1v = rng.standard_normal((n, d1))
    tape = Tape()
    svars = vogpae.lift_state(tape, state)
    ll = float(vogpae.ordinal_loglik([tape.leaf(z1v)], y, svars,
                                     levels).value)
    f = z1v @ state.params["cls.w"]
    sig = state.sigma_o
    ref = 0.0
    for i in range(n):
        for q, lq in enumerate(levels):
            probs = vogpae.ordinal_level_probs(
                f[i, q], state.interior_thresholds(q), sig)
            ref += np.log(max(probs[y[i, q] - 1], 1e-12))
    assert abs(ll - ref) < 1e-9


def test_ordinal_loglik_probability_floor(rng):
    # impossible labels under a sharp split still yield a finite value
    levels = [2]
    state = make_state(8, n=2, d1=1, levels=levels)
    state.params["cls.w"] = np.array([[1.0]])
    state.params["cls.log_sigma"] = np.array(0.0)
    state.params["cls.gamma0_q0"] = np.array([0.0])
    y = np.array([[1], [1]])
    tape = Tape()
    svars = vogpae.lift_state(tape, state)
    z1 = [tape.leaf(np.full((2, 1), 40.0))]
    ll = float(vogpae.ordinal_loglik(z1, y, svars, levels).value)
    assert np.isfinite(ll)
    assert abs(ll - 2.0 * np.log(1e-12)) < 1e-6


# --------------------------------------------------------- reconstruction

def test_gp_recon_single_point_closed_form():
    state = make_state(9, n=2, d0=1, d1=1)
    z0 = np.array([[0.7]])
    sf2 = state.dec_kernel().sf2
    nv = state.sigma_v2
    tape = Tape()
    svars = vogpae.lift_state(tape, state)
    z1 = [tape.leaf(np.array([[0.3]]))]
    got = float(vogpae.gp_recon_loglik(z0, z1, svars).value)
    v = sf2 + nv
    ref = -0.5 * np.log(2 * np.pi * v) - 0.7 ** 2 / (2 * v)
    assert abs(got - ref) < 1e-10


def test_gp_recon_noise_monotonicity_zero_targets():
    # with zero targets the quadratic term vanishes; growing the noise
    # inflates the determinant, so the log-density strictly drops
    state = make_state(10, n=4, d0=2, d1=2)
    z0 = np.zeros((4, 2))
    z1v = np.random.default_rng(0).standard_normal((4, 2))

    def value(log_noise):
        state.params["dec.log_noise"] = np.array(log_noise)
        tape = Tape()
        svars = vogpae.lift_state(tape, state)
        return float(vogpae.gp_recon_loglik(z0, [tape.leaf(z1v)],
                                            svars).value)

    assert value(np.log(0.2)) < value(np.log(0.1))


def test_gp_recon_matches_dense_mvn_oracle(rng):
    n, d0, d1 = 6, 3, 2
    state = make_state(11, n=n, d0=d0, d1=d1)
    z0 = rng.standard_normal((n, d0))
    z1v = rng.standard_normal((n, d1))
    tape = Tape()
    svars = vogpae.lift_state(tape, state)
    got = float(vogpae.gp_recon_loglik(z0, [tape.leaf(z1v)], svars).value)
    kmat = gp.kernel_matrix(z1v, z1v, state.dec_kernel())
    kn = kmat + state.sigma_v2 * np.eye(n)
    sign, logdet = np.linalg.slogdet(kn)
    inv = np.linalg.inv(kn)
    ref = 0.0
    for dim in range(d0):
        col = z0[:, dim]
        ref += (-0.5 * (logdet + col @ inv @ col + n * np.log(2 * np.pi)))
    assert abs(got - ref) < 1e-9


def test_gp_recon_averages_over_samples(rng):
    n, d0, d1 = 4, 2, 2
    state = make_state(12, n=n, d0=d0, d1=d1)
    z0 = rng.standard_normal((n, d0))
    s1 = rng.standard_normal((n, d1))
    s2 = rng.standard_normal((n, d1))

    def single(zv):
        tape = Tape()
        svars = vogpae.lift_state(tape, state)
        return float(vogpae.gp_recon_loglik(z0, [tape.leaf(zv)],
                                            svars).value)

    tape = Tape()
    svars = vogpae.lift_state(tape, state)
    both = float(vogpae.gp_recon_loglik(
        z0, [tape.leaf(s1), tape.leaf(s2)], svars).value)
    assert abs(both - 0.5 * (single(s1) + single(s2))) < 1e-10


# --------------------------------------------------------------------- KL

def test_kl_unit_prior_zero_at_standard_normal():
    tape = Tape()
    kl = vogpae.kl_to_unit_prior(tape.leaf(np.zeros((3, 2))),
                                 tape.leaf(np.ones((3, 2))))
    assert abs(float(kl.value)) < 1e-12


def test_kl_unit_prior_shifted_mean():
    tape = Tape()
    kl = vogpae.kl_to_unit_prior(tape.leaf(np.ones((1, 4))),
                                 tape.leaf(np.ones((1, 4))))
    assert abs(float(kl.value) - 4 * 0.5) < 1e-12


def test_kl_unit_prior_matches_monte_carlo(rng):
    mean = rng.standard_normal((2, 3))
    var = 0.3 + rng.random((2, 3))
    tape = Tape()
    kl = float(vogpae.kl_to_unit_prior(tape.leaf(mean),
                                       tape.leaf(var)).value)
    m = 10 ** 6
    draws = mean[None] + np.sqrt(var)[None] * rng.standard_normal((m, 2, 3))
    log_q = -0.5 * (np.log(2 * np.pi) + np.log(var)[None]
                    + (draws - mean[None]) ** 2 / var[None])
    log_p = -0.5 * (np.log(2 * np.pi) + draws ** 2)
    per = np.sum(log_q - log_p, axis=(1, 2))
    est, se = float(np.mean(per)), float(np.std(per, ddof=1) / np.sqrt(m))
    assert abs(kl - est) <= 3.0 * se


# -------------------------------------------------------------- prediction

def test_predict_far_low_latent_gives_level_one():
    state = make_state(13, n=4, d1=1, levels=[3])
    state.params["cls.w"] = np.array([[1.0]])
    levels = vogpae.predict_labels(state, np.array([-50.0]))
    assert levels[0] == 1


def test_predict_tie_takes_lower_level():
    state = make_state(14, n=4, d1=1, levels=[2])
    state.params["cls.w"] = np.array([[1.0]])
    state.params["cls.gamma0_q0"] = np.array([0.0])
    state.params["cls.log_sigma"] = np.array(np.log(1e-6))
    # f exactly at the threshold: probabilities tie at 0.5 each
    levels = vogpae.predict_labels(state, np.array([0.0]))
    assert levels[0] == 1


def test_predict_matches_exhaustive_argmax(rng):
    state = make_state(15, n=5, d1=2, levels=[3, 4])
    for _ in range(25):
        z1 = rng.standard_normal(2)
        got = vogpae.predict_labels(state, z1)
        f = z1 @ state.params["cls.w"]
        for q, lq in enumerate([3, 4]):
            probs = vogpae.ordinal_level_probs(
                f[q], state.interior_thresholds(q), state.sigma_o)
            assert got[q] == int(np.argmax(probs)) + 1


def test_encode_new_far_query_returns_zero(rng):
    state = make_state(16, n=4, d0=2)
    state.params["enc.log_ls"] = np.log(np.full(2, 1e-3))
    out = vogpae.encode_new(state, np.array([[80.0, -80.0]]))
    assert np.max(np.abs(out)) < 1e-10


def test_encode_new_training_point_with_tiny_noise(rng):
    state = make_state(17, n=5, d0=2)
    state.params["enc.log_noise"] = np.array(np.log(1e-10))
    out = vogpae.encode_new(state, state.z0[2:3])
    assert np.max(np.abs(out - state.params["M"][2])) < 1e-3


def test_encode_decode_new_match_gp_predict_oracle(rng):
    state = make_state(18, n=6, d0=2, d1=2)
    q = rng.standard_normal((3, 2))
    got = vogpae.encode_new(state, q)
    ref, _ = gp.gp_predict(state.z0, state.params["M"], q,
                           state.enc_kernel(), state.sigma_r2)
    assert np.max(np.abs(got - ref)) < 1e-12
    z1q = rng.standard_normal((3, 2))
    mean, var = vogpae.decode_new(state, z1q)
    ref_m, ref_v = gp.gp_predict(state.params["M"], state.z0, z1q,
                                 state.dec_kernel(), state.sigma_v2)
    assert np.max(np.abs(mean - ref_m)) < 1e-12
    assert np.max(np.abs(var - ref_v)) < 1e-12


# --------------------------------------------------------------- objective

def test_objective_beta_zero_removes_kl_gradient(rng):
    state = make_state(19, n=5, d1=2)
    y = np.column_stack([rng.integers(1, 4, 5), rng.integers(1, 5, 5)])
    eps = rng.standard_normal((1, 5, 2))

    def grads_at(beta):
        tape = Tape()
        svars = vogpae.lift_state(tape, state)
        obj, _ = vogpae.vogpae_objective(svars, state.z0, y, beta, eps,
                                         [3, 4])
        tape.backward(obj)
        return {k: None if v.grad is None else np.asarray(v.grad).copy()
                for k, v in svars.items()}

    g0 = grads_at(0.0)
    g1 = grads_at(1.0)
    changed = any(
        g0[k] is not None and g1[k] is not None
        and not np.allclose(g0[k], g1[k]) for k in g0)
    assert changed  # KL term really contributes somewhere at beta=1


def test_objective_term_sum(rng):
    state = make_state(20, n=5, d1=2)
    y = np.column_stack([rng.integers(1, 4, 5), rng.integers(1, 5, 5)])
    eps = rng.standard_normal((2, 5, 2))
    tape = Tape()
    svars = vogpae.lift_state(tape, state)
    obj, parts = vogpae.vogpae_objective(svars, state.z0, y, 0.7, eps,
                                         [3, 4])
    want = (0.7 * float(parts["l_kl"].value) + float(parts["l_r"].value)
            + float(parts["l_o"].value))
    assert abs(float(obj.value) - want) < 1e-12


def test_objective_eps_shape_check(rng):
    state = make_state(21, n=4, d1=2)
    y = np.column_stack([rng.integers(1, 4, 4), rng.integers(1, 5, 4)])
    tape = Tape()
    svars = vogpae.lift_state(tape, state)
    with pytest.raises(ShapeError):
        vogpae.vogpae_objective(svars, state.z0, y, 0.5,
                                rng.standard_normal((4, 2)), [3, 4])


def test_objective_finite_difference(rng):
    state = make_state(22, n=4, d0=2, d1=2, levels=[3])
    y = rng.integers(1, 4, (4, 1))
    eps = rng.standard_normal((1, 4, 2))
    names = sorted(state.params)
    arrays = [state.params[k].copy() for k in names]

    def value_fn(arrs):
        st = vogpae.VogpaeState(
            params={k: a for k, a in zip(names, arrs)},
            z0=state.z0, levels=state.levels, d1=state.d1)
        tape = Tape()
        svars = vogpae.lift_state(tape, st)
        obj, _ = vogpae.vogpae_objective(svars, st.z0, y, 0.4, eps, [3])
        return float(np.asarray(obj.value).reshape(()))

    tape = Tape()
    svars = vogpae.lift_state(tape, state)
    obj, _ = vogpae.vogpae_objective(svars, state.z0, y, 0.4, eps, [3])
    tape.backward(obj)
    analytic = [np.zeros_like(arrays[i]) if svars[k].grad is None
                else np.asarray(svars[k].grad) for i, k in enumerate(names)]
    numeric = fd_gradient(value_fn, arrays)
    assert max_rel_error(analytic, numeric) < 1e-5
