"""Analytic integrals over normalized solid-harmonic Gaussians.

A shell of degree l and exponent alpha centred at C is
``N(l, alpha) * S_lm(r - C) * exp(-alpha |r - C|^2)`` with ``S_lm`` the
Racah-normalized solid harmonics of :mod:`unite.o3`. Two-centre overlaps go
through Cartesian Obara-Saika recursion followed by the monomial-to-harmonic
transform; one-centre products use the real Gaunt factor times a Gamma-function
radial integral. Every routine takes displacements, never absolute positions.
"""
import math
from functools import lru_cache

import numpy as np
from scipy.special import gamma as gamma_fn

from unite import o3


def radial_moment(power: int, exponent: float) -> float:
    """Integral of r^power * exp(-exponent r^2) over r in [0, inf)."""
    half = 0.5 * (power + 1)
    return float(gamma_fn(half) / (2.0 * exponent ** half))


def shell_norm(l: int, exponent: float) -> float:
    """Constant making the shell functions unit-normalized."""
    angular = 4.0 * math.pi / (2 * l + 1)
    return 1.0 / math.sqrt(angular * radial_moment(2 * l + 2, 2.0 * exponent))


def _overlap_1d(la: int, lb: int, a: float, b: float, displacement: np.ndarray) -> np.ndarray:
    """Obara-Saika table S[i, j, axis] for 1D Cartesian Gaussian factors.

    ``displacement`` is B - A per axis.
    """
    p = a + b
    mu = a * b / p
    pa = b / p * displacement
    pb = -a / p * displacement
    table = np.zeros((la + 1, lb + 1, 3))
    table[0, 0] = math.sqrt(math.pi / p) * np.exp(-mu * displacement ** 2)
    half_p = 0.5 / p
    for i in range(la + 1):
        for j in range(lb + 1):
            if i == 0 and j == 0:
                continue
            if i > 0:
                value = pa * table[i - 1, j]
                if i > 1:
                    value = value + (i - 1) * half_p * table[i - 2, j]
                if j > 0:
                    value = value + j * half_p * table[i - 1, j - 1]
            else:
                value = pb * table[i, j - 1]
                if j > 1:
                    value = value + (j - 1) * half_p * table[i, j - 2]
            table[i, j] = value
    return table


def shell_overlap(la: int, alpha: float, lb: int, beta: float, displacement) -> np.ndarray:
    """Overlap block <a, m_a | b, m_b> of shape (2la+1, 2lb+1); ``displacement`` = centre_b - centre_a."""
    displacement = np.asarray(displacement, dtype=np.float64)
    exps_a, coeffs_a = o3._rsh_polynomial(la)
    exps_b, coeffs_b = o3._rsh_polynomial(lb)
    table = _overlap_1d(la, lb, alpha, beta, displacement)
    cart = np.ones((exps_a.shape[0], exps_b.shape[0]))
    for axis in range(3):
        cart = cart * table[exps_a[:, axis][:, None], exps_b[:, axis][None, :], axis]
    return shell_norm(la, alpha) * shell_norm(lb, beta) * (coeffs_a @ cart @ coeffs_b.T)


def evaluate_shell(l: int, exponent: float, offsets: np.ndarray) -> np.ndarray:
    """Shell values at ``offsets`` = points - centre, shape (..., 2l+1)."""
    offsets = np.asarray(offsets, dtype=np.float64)
    r2 = np.sum(offsets * offsets, axis=-1, keepdims=True)
    return shell_norm(l, exponent) * o3.solid_harmonics(l, offsets) * np.exp(-exponent * r2)


def shell_integral(l: int, exponent: float) -> np.ndarray:
    """Integral of each shell component over all space; only l = 0 survives."""
    out = np.zeros(2 * l + 1)
    if l == 0:
        out[0] = shell_norm(0, exponent) * (math.pi / exponent) ** 1.5
    return out


@lru_cache(maxsize=None)
def gaunt_block(l1: int, l2: int, l: int) -> np.ndarray:
    """Real Gaunt integrals G[m1, m2, m] over the unit sphere."""
    block = np.zeros((2 * l1 + 1, 2 * l2 + 1, 2 * l + 1))
    if (l1 + l2 + l) % 2 == 0 and abs(l1 - l2) <= l <= l1 + l2:
        table = o3.default_cg_table(max(o3.L_MAX, l1 + l2, l))
        block = 4.0 * math.pi / (2 * l + 1) * o3.complex_cg(l1, 0, l2, 0, l, 0) * table.block(l1, l2, l)
    block = np.array(block)
    block.setflags(write=False)
    return block


def onsite_three_index(la: int, alpha: float, lb: int, beta: float, l: int, gamma: float) -> np.ndarray:
    """One-centre integral of two AO shells and one auxiliary shell, shape (2la+1, 2lb+1, 2l+1)."""
    angular = gaunt_block(la, lb, l)
    if not angular.any():
        return np.zeros_like(angular)
    radial = radial_moment(la + lb + l + 2, alpha + beta + gamma)
    norm = shell_norm(la, alpha) * shell_norm(lb, beta) * shell_norm(l, gamma)
    return norm * radial * angular
