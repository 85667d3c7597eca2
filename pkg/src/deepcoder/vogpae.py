"""Variational ordinal Gaussian-process autoencoder (the bottom coder).

The coder sits on top of the VC-AE latent codes Z_0.  A GP decoder with
an ARD RBF kernel explains Z_0 from a second latent layer Z_1; the
variational posterior over Z_1 is built from the leave-one-out GP
predictor over the variational means M, giving per point

    q(z_1i) = N(loo_mean_i, S_i + loo_var_i I).

An ordinal probit head (shared projection w_o per output, noise sigma_o,
monotone thresholds) supplies the label term.  The objective is

    beta * L_kl + L_r + L_o

where L_kl is the negated KL to the unit prior, L_r the GP
reconstruction log-density of Z_0, and L_o the ordinal log-likelihood,
all maximized.

Positive scalars (kernel amplitudes, lengthscales, noises, sigma_o) are
stored as logs; threshold monotonicity is structural: interior
thresholds are the first threshold plus cumulated softplus increments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special as _sp

from . import autodiff as ad
from . import gp
from .autodiff import Tape, Var
from .errors import InvalidArgumentError, NumericalError, ShapeError

LOG_2PI = float(np.log(2.0 * np.pi))
# sentinel standing in for +/- infinite outer thresholds; wide enough that
# gauss_cdf saturates to exactly 0.0 / 1.0 in float64
BIG_THRESHOLD = 1e10
PROB_FLOOR = 1e-12


@dataclass
class VogpaeState:
    """All trainable parameters plus the cached Z_0 inputs of the subset.

    params keys:
      M             [n, d1]   variational means
      log_S         [n, d1]   log of per-point diagonal variances
      dec.log_sf2   ()        decoder kernel signal variance (log)
      dec.log_ls    [d1]      decoder kernel lengthscales (log)
      dec.log_noise ()        sigma_v^2 (log)
      enc.log_sf2   ()        encoder kernel signal variance (log)
      enc.log_ls    [d0]      encoder kernel lengthscales (log)
      enc.log_noise ()        sigma_r^2 (log)
      cls.w         [d1, Q]   ordinal projections
      cls.log_sigma ()        sigma_o (log)
      cls.gamma0_q{q}  (1,)   first interior threshold, output q
      cls.delta_q{q}   [L_q - 2]  unconstrained increments, output q
    """

    params: dict[str, np.ndarray]
    z0: np.ndarray
    levels: list[int]
    d1: int

    @property
    def n(self) -> int:
        return self.z0.shape[0]

    @property
    def d0(self) -> int:
        return self.z0.shape[1]

    def dec_kernel(self) -> gp.RbfArdKernel:
        return gp.RbfArdKernel(float(self.params["dec.log_sf2"]),
                               self.params["dec.log_ls"])

    def enc_kernel(self) -> gp.RbfArdKernel:
        return gp.RbfArdKernel(float(self.params["enc.log_sf2"]),
                               self.params["enc.log_ls"])

    @property
    def sigma_v2(self) -> float:
        return float(np.exp(self.params["dec.log_noise"]))

    @property
    def sigma_r2(self) -> float:
        return float(np.exp(self.params["enc.log_noise"]))

    @property
    def sigma_o(self) -> float:
        return float(np.exp(self.params["cls.log_sigma"]))

    def interior_thresholds(self, q: int) -> np.ndarray:
        g0 = self.params[f"cls.gamma0_q{q}"]
        deltas = self.params[f"cls.delta_q{q}"]
        return np.concatenate([g0, g0[0] + np.cumsum(np.logaddexp(0.0, deltas))])


def _median_distance(x: np.ndarray) -> float:
    """Median pairwise euclidean distance over a bounded subsample."""
    step = max(1, x.shape[0] // 256)
    sub = x[::step][:256]
    d2 = np.sum((sub[:, None, :] - sub[None, :, :]) ** 2, axis=-1)
    upper = d2[np.triu_indices(sub.shape[0], 1)]
    return float(np.sqrt(np.median(upper))) if upper.size else 0.0


def _pca_scores(z0: np.ndarray, d1: int) -> np.ndarray | None:
    """Principal-component scores of z0, scaled so the top component has
    unit variance; None when the inputs are (numerically) constant."""
    n = z0.shape[0]
    centered = z0 - z0.mean(axis=0)
    u, s, _ = np.linalg.svd(centered, full_matrices=False)
    top_std = s[0] / np.sqrt(n - 1)
    if not np.isfinite(top_std) or top_std < 1e-8:
        return None
    keep = min(d1, s.size)
    scores = np.zeros((n, d1))
    scores[:, :keep] = u[:, :keep] * (s[:keep] / s[0])
    return scores * np.sqrt(n - 1)


def init_vogpae_state(z0: np.ndarray, levels: list[int], d1: int,
                      rng: np.random.Generator) -> VogpaeState:
    """Fresh state: latent means seeded from the inputs, S = 1, noises
    0.1, thresholds at standard normal quantiles, kernel lengthscales
    matched to the point clouds they operate on.

    M starts at the principal-component scores of z0 (plus a small
    N(0, 0.1^2) draw that also fills dimensions beyond the input rank).
    A structureless draw alone cannot train: pairwise distances of an
    i.i.d. cloud in d1 dimensions concentrate, so the leave-one-out
    smoother that defines the posterior means returns everything to the
    grand mean regardless of lengthscale, and gradients through it carry
    no per-point signal. Component scores give M a low-dimensional spread
    the kernel can localize, which is what the smoother needs. Both
    kernels start at the median pairwise distance of their input cloud so
    that no off-diagonal entry underflows at the first step.
    """
    z0 = np.ascontiguousarray(np.atleast_2d(np.asarray(z0, dtype=np.float64)))
    n, d0 = z0.shape
    if n < 2:
        raise InvalidArgumentError("need at least 2 subset points")
    noise0 = 0.1
    m0 = rng.normal(0.0, 0.1, size=(n, d1))
    scores = _pca_scores(z0, d1)
    if scores is not None:
        m0 = m0 + scores
    dec_ls = _median_distance(m0)
    if dec_ls < 1e-8:
        dec_ls = 1.0
    enc_ls = _median_distance(z0)
    if enc_ls < 1e-8:
        enc_ls = 1.0  # degenerate inputs: any scale works equally badly
    params: dict[str, np.ndarray] = {
        "M": m0,
        "log_S": np.zeros((n, d1)),
        "dec.log_sf2": np.asarray(0.0),
        "dec.log_ls": np.full(d1, np.log(dec_ls)),
        "dec.log_noise": np.asarray(np.log(noise0)),
        "enc.log_sf2": np.asarray(0.0),
        "enc.log_ls": np.full(d0, np.log(enc_ls)),
        "enc.log_noise": np.asarray(np.log(noise0)),
        "cls.w": rng.normal(0.0, 0.1, size=(d1, len(levels))),
        "cls.log_sigma": np.asarray(0.0),
    }
    for q, lq in enumerate(levels):
        if lq < 2:
            raise InvalidArgumentError(f"output {q}: needs >= 2 levels")
        quantiles = _sp.ndtri(np.arange(1, lq) / lq)
        params[f"cls.gamma0_q{q}"] = quantiles[:1].copy()
        diffs = np.diff(quantiles)
        # invert softplus so the cumulated increments land on the quantiles
        params[f"cls.delta_q{q}"] = np.log(np.expm1(diffs)) if diffs.size \
            else np.zeros(0)
    return VogpaeState(params=params, z0=z0, levels=list(levels), d1=d1)


# ----------------------------------------------------------- plain queries


def variational_posterior(
        state: VogpaeState) -> tuple[np.ndarray, np.ndarray]:
    """Per-point posterior (q_mean [n,d1], q_var [n,d1]).

    Means come from the leave-one-out GP over the variational means M
    under the decoder kernel; variances add S_i to the LOO variance.
    """
    m = state.params["M"]
    kmat = gp.kernel_matrix(m, m, state.dec_kernel())
    factor = gp.CholFactor(kmat + state.sigma_v2 * np.eye(state.n))
    loo_mean, loo_var = gp.loo_posterior(factor, m)
    q_var = np.exp(state.params["log_S"]) + loo_var[:, None]
    return loo_mean, q_var


def ordinal_level_probs(f: float, gamma_interior: np.ndarray,
                        sigma_o: float) -> np.ndarray:
    """P(level = s | f) for s = 1..L as differences of normal CDFs."""
    gamma_interior = np.asarray(gamma_interior, dtype=np.float64)
    if gamma_interior.ndim != 1:
        raise ShapeError("interior thresholds must be a vector")
    if np.any(np.diff(gamma_interior) <= 0.0):
        raise InvalidArgumentError("thresholds must increase strictly")
    if sigma_o <= 0.0:
        raise InvalidArgumentError(f"sigma_o must be positive, got {sigma_o}")
    edges = np.concatenate([[-np.inf], gamma_interior, [np.inf]])
    cdf = 0.5 * _sp.erfc(-(edges - f) / (sigma_o * np.sqrt(2.0)))
    return np.diff(cdf)


def predict_labels(state: VogpaeState, z1_star: np.ndarray) -> np.ndarray:
    """Most probable level per output; ties resolve to the lower level."""
    z1_star = np.asarray(z1_star, dtype=np.float64).reshape(-1)
    if z1_star.shape[0] != state.d1:
        raise ShapeError(f"z1 has {z1_star.shape[0]} dims, expected {state.d1}")
    f = z1_star @ state.params["cls.w"]
    out = np.empty(len(state.levels), dtype=np.int64)
    for q in range(len(state.levels)):
        probs = ordinal_level_probs(float(f[q]),
                                    state.interior_thresholds(q),
                                    state.sigma_o)
        out[q] = int(np.argmax(probs)) + 1
    return out


def encode_new(state: VogpaeState, z0_star: np.ndarray) -> np.ndarray:
    """GP posterior mean of Z_1 at new Z_0 points, [m, d1]."""
    z0_star = np.atleast_2d(np.asarray(z0_star, dtype=np.float64))
    mean, _ = gp.gp_predict(state.z0, state.params["M"], z0_star,
                            state.enc_kernel(), state.sigma_r2)
    return mean


def decode_new(state: VogpaeState,
               z1_star: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """GP predictive of Z_0 at new Z_1 points: (mean [m, d0], var [m])."""
    z1_star = np.atleast_2d(np.asarray(z1_star, dtype=np.float64))
    return gp.gp_predict(state.params["M"], state.z0, z1_star,
                         state.dec_kernel(), state.sigma_v2)


# ------------------------------------------------------- objective (taped)


def _interior_thresholds_var(v: dict[str, Var], q: int,
                             lq: int) -> Var:
    """[L_q - 1] strictly increasing interior thresholds on the tape."""
    g0 = v[f"cls.gamma0_q{q}"]
    if lq == 2:
        return g0
    steps = ad.cumsum(ad.softplus(v[f"cls.delta_q{q}"]))
    return ad.concat([g0, ad.add(ad.reshape(g0, (1,)), steps)])


def ordinal_loglik(z1_samples: list[Var], y: np.ndarray,
                   v: dict[str, Var], levels: list[int]) -> Var:
    """Monte-Carlo ordinal log-likelihood, summed over points and outputs.

    Each level probability is a difference of two normal CDFs whose
    arguments use sentinel outer thresholds wide enough to saturate, so
    probabilities per point telescope to exactly one.  Log terms are
    clamped at log(1e-12).
    """
    y = np.asarray(y, dtype=np.int64)
    n = y.shape[0]
    if y.ndim != 2 or y.shape[1] != len(levels):
        raise ShapeError(f"labels must be [n,{len(levels)}], got {y.shape}")
    inv_sigma = ad.exp(ad.neg(v["cls.log_sigma"]))
    per_sample = []
    for z1 in z1_samples:
        f = ad.matmul(z1, v["cls.w"])
        total = None
        for q, lq in enumerate(levels):
            yq = y[:, q]
            if np.any(yq < 1) or np.any(yq > lq):
                raise InvalidArgumentError(
                    f"output {q}: labels must lie in 1..{lq}")
            interior = _interior_thresholds_var(v, q, lq)
            edges = ad.concat([np.asarray([-BIG_THRESHOLD]), interior,
                               np.asarray([BIG_THRESHOLD])])
            hi = ad.take(edges, yq)
            lo = ad.take(edges, yq - 1)
            fq = ad.take(f, np.arange(n, dtype=np.int64) * len(levels) + q)
            p_hi = ad.gauss_cdf(ad.mul(ad.sub(hi, fq), inv_sigma))
            p_lo = ad.gauss_cdf(ad.mul(ad.sub(lo, fq), inv_sigma))
            logp = ad.log(ad.clamp_min(ad.sub(p_hi, p_lo), PROB_FLOOR))
            term = ad.sum(logp)
            total = term if total is None else ad.add(total, term)
        per_sample.append(total)
    acc = per_sample[0]
    for t in per_sample[1:]:
        acc = ad.add(acc, t)
    return ad.mul(acc, 1.0 / len(z1_samples))


def gp_recon_loglik(z0: np.ndarray, z1_samples: list[Var],
                    v: dict[str, Var]) -> Var:
    """Mean over samples of sum_d log N(z_0^d | 0, K(Z_1) + sigma_v^2 I).

    K is the decoder kernel evaluated on the sampled Z_1; each latent
    input dimension d contributes one multivariate normal log-density
    sharing that gram matrix.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    n, d0 = z0.shape
    zzt = z0 @ z0.T
    per_sample = []
    for z1 in z1_samples:
        kmat = gp.rbf_kernel(z1, z1, v["dec.log_sf2"], v["dec.log_ls"])
        kn = gp.add_diag(kmat, ad.exp(v["dec.log_noise"]))
        kinv = gp.psd_inverse(kn)
        quad = ad.sum(ad.mul(kinv, zzt))
        ld = gp.psd_logdet(kn)
        ll = ad.mul(ad.add(ad.add(ad.mul(ld, float(d0)), quad),
                           n * d0 * LOG_2PI), -0.5)
        per_sample.append(ll)
    acc = per_sample[0]
    for t in per_sample[1:]:
        acc = ad.add(acc, t)
    return ad.mul(acc, 1.0 / len(z1_samples))


def kl_to_unit_prior(q_mean: Var, q_var: Var) -> Var:
    """KL( N(q_mean, diag(q_var)) || N(0, I) ), summed; always >= 0."""
    inner = ad.sub(ad.add(q_var, ad.square(q_mean)),
                   ad.add(ad.log(q_var), 1.0))
    return ad.mul(ad.sum(inner), 0.5)


def taped_posterior(v: dict[str, Var], n: int) -> tuple[Var, Var]:
    """The leave-one-out variational posterior, recorded on the tape."""
    m = v["M"]
    kmat = gp.rbf_kernel(m, m, v["dec.log_sf2"], v["dec.log_ls"])
    kn = gp.add_diag(kmat, ad.exp(v["dec.log_noise"]))
    kinv = gp.psd_inverse(kn)
    diag_idx = np.arange(n, dtype=np.int64) * (n + 1)
    d = ad.take(kinv, diag_idx)
    if np.any(d.value <= 0.0) or not np.all(np.isfinite(d.value)):
        raise NumericalError("degenerate precision diagonal in posterior")
    loo_var = ad.div(1.0, d)
    km = ad.matmul(kinv, m)
    loo_mean = ad.sub(m, ad.div(km, ad.reshape(d, (n, 1))))
    q_var = ad.add(ad.exp(v["log_S"]), ad.reshape(loo_var, (n, 1)))
    return loo_mean, q_var


def vogpae_objective(state_vars: dict[str, Var], z0: np.ndarray,
                     y: np.ndarray, beta: float, eps: np.ndarray,
                     levels: list[int]) -> tuple[Var, dict[str, Var]]:
    """Warm-up weighted bound beta*L_kl + L_r + L_o over the subset.

    state_vars are the VogpaeState params lifted onto one tape.  eps is
    [samples, n, d1] fixed noise for the reparameterized draws.  Terms
    are per-point means; parts returns the three of them.
    """
    if not 0.0 <= beta <= 1.0:
        raise InvalidArgumentError(f"beta must lie in [0,1], got {beta}")
    z0 = np.asarray(z0, dtype=np.float64)
    n = z0.shape[0]
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim != 3 or eps.shape[1] != n:
        raise ShapeError(f"eps must be [samples, {n}, d1], got {eps.shape}")

    q_mean, q_var = taped_posterior(state_vars, n)
    std = ad.sqrt(q_var)
    z1_samples = [ad.add(q_mean, ad.mul(std, eps[s]))
                  for s in range(eps.shape[0])]

    l_kl = ad.mul(ad.neg(kl_to_unit_prior(q_mean, q_var)), 1.0 / n)
    l_r = ad.mul(gp_recon_loglik(z0, z1_samples, state_vars), 1.0 / n)
    l_o = ad.mul(ordinal_loglik(z1_samples, y, state_vars, levels), 1.0 / n)
    obj = ad.add(ad.add(ad.mul(l_kl, beta), l_r), l_o)
    return obj, {"l_kl": l_kl, "l_r": l_r, "l_o": l_o}


def lift_state(tape: Tape, state: VogpaeState) -> dict[str, Var]:
    """Put every parameter tensor on the tape; returns name -> Var."""
    return {name: tape.leaf(arr) for name, arr in state.params.items()}
