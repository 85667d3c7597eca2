"""Shared helpers: finite-difference oracles and tiny model builders."""

from __future__ import annotations

import numpy as np
import pytest

from deepcoder import vcae
from deepcoder.autodiff import Tape


def fd_gradient(value_fn, arrays: list[np.ndarray],
                h: float = 1e-6) -> list[np.ndarray]:
    """Central finite differences of value_fn w.r.t. every array entry.

    value_fn takes the (mutated in place) list and returns a float.
    The step is scaled by the entry magnitude so large and small
    coordinates see comparable relative perturbations.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat_a = a.reshape(-1)
        flat_g = g.reshape(-1)
        for j in range(flat_a.size):
            orig = flat_a[j]
            step = h * max(1.0, abs(orig))
            flat_a[j] = orig + step
            fp = value_fn(arrays)
            flat_a[j] = orig - step
            fm = value_fn(arrays)
            flat_a[j] = orig
            flat_g[j] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def max_rel_error(analytic: list[np.ndarray], numeric: list[np.ndarray],
                  floor: float = 1e-2) -> float:
    """Worst elementwise |a-n| / max(|a|+|n|, floor) over all tensors."""
    worst = 0.0
    for ga, gf in zip(analytic, numeric):
        denom = np.maximum(np.abs(ga) + np.abs(gf), floor)
        worst = max(worst, float(np.max(np.abs(ga - gf) / denom)))
    return worst


def tiny_arch(levels=None, latent: int = 2) -> vcae.VcaeArchitecture:
    """Smallest pooled architecture that exercises every layer type."""
    arch = vcae.VcaeArchitecture(
        in_channels=1, in_height=4, in_width=4,
        stages=[vcae.ConvStage(filters=2, kernel=3, pool=True)],
        fc_layers=1, fc_width=4, latent=latent)
    arch.validate()
    return arch


def tiny_vcae(seed: int, n: int = 3, levels=None, latent: int = 2):
    """(arch, params, x, y, prior, eps, levels) for a random tiny model."""
    levels = levels or [3, 3]
    rng = np.random.default_rng(seed)
    arch = tiny_arch(levels, latent)
    params = vcae.init_vcae_params(arch, levels, rng)
    x = rng.random((n, 1, 4, 4))
    y = np.column_stack([rng.integers(1, lq + 1, size=n) for lq in levels])
    prior = vcae.GaussianPrior(rng.standard_normal((n, latent)),
                               0.5 + rng.random((n, latent)))
    eps = rng.standard_normal((n, latent))
    return arch, params, x, y, prior, eps, levels


def taped_value_and_grads(build_objective, arrays: list[np.ndarray],
                          names: list[str] | None = None):
    """Run build_objective on fresh leaves; return (value, grads list).

    build_objective(tape, list_of_Vars) -> scalar Var.
    Missing gradients come back as zeros (constant-w.r.t. inputs).
    """
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = build_objective(tape, leaves)
    tape.backward(out)
    grads = []
    for leaf, arr in zip(leaves, arrays):
        g = leaf.grad
        grads.append(np.zeros_like(arr) if g is None else np.asarray(g))
    return float(np.asarray(out.value).reshape(())), grads


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
