"""Gaussian process primitives: ARD kernel, robust Cholesky, posterior
prediction, leave-one-out posterior, and differentiable matrix ops.

Two entry styles coexist on purpose.  The plain functions
(kernel_matrix, gp_predict, loo_posterior) compute with raw arrays and
serve prediction paths and test oracles.  The tape ops (rbf_kernel,
psd_inverse, psd_logdet) record the same math onto an autodiff tape for
training objectives.  Tests pit both routes against each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import autodiff as ad
from . import kernels as _k
from .autodiff import Tape, Var
from .errors import NumericalError, ShapeError

# escalation schedule for diagonal jitter when a Cholesky attempt fails
JITTER_LADDER = (0.0, 1e-10, 1e-6, 1e-4)


@dataclass
class RbfArdKernel:
    """Squared-exponential kernel with one lengthscale per input dimension.

    Hyperparameters are stored as unconstrained logs so optimizers can
    move freely; the positive values are exposed as properties.
    """

    log_sf2: float
    log_ls: np.ndarray

    def __post_init__(self):
        self.log_ls = np.atleast_1d(np.asarray(self.log_ls, dtype=np.float64))
        if self.log_ls.ndim != 1:
            raise ShapeError("log_ls must be a vector")
        self.log_sf2 = float(self.log_sf2)

    @property
    def sf2(self) -> float:
        return float(np.exp(self.log_sf2))

    @property
    def ls(self) -> np.ndarray:
        return np.exp(self.log_ls)

    @staticmethod
    def default(dim: int) -> "RbfArdKernel":
        return RbfArdKernel(log_sf2=0.0, log_ls=np.zeros(dim))


@dataclass
class NoiseModel:
    """Observation noise variances for the two GP directions.

    sigma_r2 rides on the latent-to-label map, sigma_v2 on the
    label-to-latent reconstruction map.  Both must stay positive.
    """

    sigma_r2: float
    sigma_v2: float

    def __post_init__(self):
        if not (self.sigma_r2 > 0.0 and self.sigma_v2 > 0.0):
            raise NumericalError(
                f"noise variances must be positive, got "
                f"({self.sigma_r2}, {self.sigma_v2})")


def kernel_matrix(a: np.ndarray, b: np.ndarray,
                  kernel: RbfArdKernel) -> np.ndarray:
    """Gram matrix K[i,j] = k(a_i, b_j) for the ARD RBF kernel."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"kernel inputs must be [n,d],[m,d]; "
                         f"got {a.shape}, {b.shape}")
    if a.shape[1] != self_dim(kernel):
        raise ShapeError(
            f"kernel has {self_dim(kernel)} lengthscales, inputs have "
            f"{a.shape[1]} dims")
    return _k.rbf_forward(a, b, kernel.sf2, kernel.ls)


def self_dim(kernel: RbfArdKernel) -> int:
    return kernel.log_ls.shape[0]


class CholFactor:
    """Cholesky factor of a symmetric PSD matrix with jitter escalation.

    Attempts the factorization with increasing diagonal jitter (0, 1e-10,
    1e-6, 1e-4) and keeps the first level that succeeds.  The jitter that
    was actually applied is recorded so callers can log or test it.
    """

    def __init__(self, mat: np.ndarray):
        mat = np.asarray(mat, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ShapeError(f"need a square matrix, got {mat.shape}")
        if not np.all(np.isfinite(mat)):
            raise NumericalError("matrix contains non-finite entries")
        n = mat.shape[0]
        eye = np.eye(n)
        last_err: Exception | None = None
        for jitter in JITTER_LADDER:
            try:
                self.L = np.linalg.cholesky(mat + jitter * eye)
                self.jitter = jitter
                self.n = n
                self._inv: np.ndarray | None = None
                return
            except np.linalg.LinAlgError as err:
                last_err = err
        raise NumericalError(
            f"Cholesky failed at all jitter levels {JITTER_LADDER}: {last_err}")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve (A + jitter I) x = rhs."""
        return cho_solve((self.L, True), np.asarray(rhs, dtype=np.float64))

    def logdet(self) -> float:
        return float(2.0 * np.sum(np.log(np.diag(self.L))))

    def inverse(self) -> np.ndarray:
        if self._inv is None:
            self._inv = self.solve(np.eye(self.n))
        return self._inv

    def half_solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve L x = rhs (useful for quadratic forms)."""
        return solve_triangular(self.L, rhs, lower=True)


def chol_solve(factor: CholFactor, rhs: np.ndarray) -> np.ndarray:
    return factor.solve(rhs)


def gp_predict(train_in: np.ndarray, train_out: np.ndarray,
               test_in: np.ndarray, kernel: RbfArdKernel,
               noise: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact GP posterior at test points under a zero mean function.

    Parameters
    ----------
    train_in : [n, d] inputs, train_out : [n, p] targets (p columns share
    the kernel), test_in : [m, d], noise : positive observation variance.

    Returns
    -------
    mean : [m, p] posterior means.
    var : [m] posterior predictive variance (shared across columns),
        including the observation noise, always positive.
    """
    if noise <= 0.0:
        raise NumericalError(f"noise variance must be positive, got {noise}")
    train_out = np.atleast_2d(np.asarray(train_out, dtype=np.float64))
    if train_out.shape[0] != train_in.shape[0]:
        raise ShapeError("train_in and train_out disagree on n")
    kmat = kernel_matrix(train_in, train_in, kernel)
    factor = CholFactor(kmat + noise * np.eye(train_in.shape[0]))
    alpha = factor.solve(train_out)
    ks = kernel_matrix(test_in, train_in, kernel)
    mean = ks @ alpha
    half = factor.half_solve(ks.T)
    quad = np.einsum("nm,nm->m", half, half)
    var = np.maximum(kernel.sf2 - quad, 0.0) + noise
    return mean, var


def loo_posterior(factor: CholFactor,
                  targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form leave-one-out posterior from one factorization.

    For K the factored gram (noise included) and M the [n, p] targets:

        loo_mean_i  = M_i - (K^-1 M)_i / (K^-1)_ii
        loo_var_i   = 1 / (K^-1)_ii

    which equals refitting the GP with point i removed, at cubic cost
    once instead of n times.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if targets.shape[0] != factor.n:
        raise ShapeError("targets row count must match the factored matrix")
    kinv = factor.inverse()
    d = np.diag(kinv).copy()
    if not np.all(np.isfinite(d)) or np.any(d <= 0.0):
        raise NumericalError("degenerate precision diagonal in LOO posterior")
    mean = targets - (kinv @ targets) / d[:, None]
    var = 1.0 / d
    return mean, var


# ------------------------------------------------------------- tape ops


def rbf_kernel(a, b, log_sf2, log_ls) -> Var:
    """Differentiable ARD RBF gram matrix.

    Any argument may be a Var or a constant.  Passing the same Var as both
    a and b yields the symmetric gram with gradients accumulated from both
    roles.  Hyperparameter gradients arrive in log space, matching storage.
    """
    tape = ad._tape_of(a, b, log_sf2, log_ls)
    a, b = ad._lift(tape, a), ad._lift(tape, b)
    log_sf2, log_ls = ad._lift(tape, log_sf2), ad._lift(tape, log_ls)
    av, bv = a.value, b.value
    sf2 = float(np.exp(log_sf2.value))
    ls = np.exp(np.atleast_1d(log_ls.value))
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise ShapeError(f"rbf_kernel inputs must be [n,d],[m,d]; "
                         f"got {av.shape}, {bv.shape}")
    if ls.shape[0] != av.shape[1]:
        raise ShapeError("lengthscale count must match input dim")
    kmat = _k.rbf_forward(av, bv, sf2, ls)

    def pullback(g):
        g = np.ascontiguousarray(g)
        da, db, dlog_sf2, dlog_ls = _k.rbf_backward(g, kmat, av, bv, ls)
        return (da, db,
                np.asarray(dlog_sf2).reshape(log_sf2.value.shape),
                dlog_ls.reshape(log_ls.value.shape))

    return tape._record(kmat, (a.slot, b.slot, log_sf2.slot, log_ls.slot),
                        pullback)


def add_diag(mat: Var, scalar) -> Var:
    """mat + s * I for a square matrix and a (possibly Var) scalar."""
    tape = mat.tape
    scalar = ad._lift(tape, scalar)
    mv, sv = mat.value, scalar.value
    if mv.ndim != 2 or mv.shape[0] != mv.shape[1]:
        raise ShapeError("add_diag needs a square matrix")
    n = mv.shape[0]
    y = mv + float(sv) * np.eye(n)
    return tape._record(
        y, (mat.slot, scalar.slot),
        lambda g: (g, np.asarray(np.trace(g)).reshape(sv.shape)))


def psd_inverse(mat: Var) -> Var:
    """Inverse of a symmetric PSD matrix through its Cholesky factor.

    Pullback: dA = -A^-T g A^-T, using the symmetry of the inverse.
    The jitter actually applied shows up in the forward value, keeping
    forward and backward consistent with each other.
    """
    factor = CholFactor(mat.value)
    inv = factor.inverse()
    return mat.tape._record(
        inv, (mat.slot,),
        lambda g: (-(inv @ g @ inv),))


def psd_logdet(mat: Var) -> Var:
    """log det of a symmetric PSD matrix; pullback is g * A^-1."""
    factor = CholFactor(mat.value)
    val = np.asarray(factor.logdet())
    return mat.tape._record(
        val, (mat.slot,),
        lambda g: (float(g) * factor.inverse(),))


def gp_marginal_loglik(train_in: np.ndarray, targets: np.ndarray,
                       kernel: RbfArdKernel, noise: float,
                       grad: bool = False):
    """Zero-mean GP log marginal likelihood of [n, p] targets, columns iid.

    With grad=True also returns the gradient w.r.t.
    (log_sf2, log_ls..., log_noise) by recording the computation on a
    throwaway tape.  Used to fit recognition-direction hyperparameters.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    n, p = targets.shape
    tape = Tape()
    v_log_sf2 = tape.leaf(kernel.log_sf2)
    v_log_ls = tape.leaf(kernel.log_ls)
    v_log_noise = tape.leaf(np.log(noise))
    kmat = rbf_kernel(train_in, train_in, v_log_sf2, v_log_ls)
    kn = add_diag(kmat, ad.exp(v_log_noise))
    kinv = psd_inverse(kn)
    quad = ad.sum(ad.mul(kinv, ad.matmul(tape.leaf(targets),
                                         tape.leaf(targets.T))))
    ld = psd_logdet(kn)
    const = n * p * np.log(2.0 * np.pi)
    ll = ad.mul(ad.add(ad.add(ad.mul(ld, float(p)), quad), const), -0.5)
    if not grad:
        return float(ll.value)
    tape.backward(ll)
    g = np.concatenate([
        np.atleast_1d(v_log_sf2.grad if v_log_sf2.grad is not None else 0.0),
        np.atleast_1d(v_log_ls.grad if v_log_ls.grad is not None
                      else np.zeros_like(kernel.log_ls)),
        np.atleast_1d(v_log_noise.grad if v_log_noise.grad is not None
                      else 0.0),
    ])
    return float(ll.value), g
