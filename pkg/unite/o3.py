"""O(3) algebra: real spherical harmonics, Clebsch-Gordan tables and Wigner-D matrices.

Conventions used everywhere in the package:

* Real spherical harmonics are the Racah-normalized closed forms built from
  binomial sums over Cartesian monomials (Y_00 = 1, Y_10 = z/r). Components are
  ordered m = -l..l, so degree 1 reads (y, z, x).
* Complex harmonics carry the Condon-Shortley phase. The real basis is
  obtained with the unitary ``real_from_complex(l)``:
  m < 0: i/sqrt(2) (Y^m - (-1)^m Y^-m); m = 0: Y^0; m > 0: 1/sqrt(2) (Y^-m + (-1)^m Y^m).
  Every consumer (CG tables, Gaunt integrals) goes through this one matrix.
"""
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from unite.errors import DomainError, UnsupportedDegreeError

logger = logging.getLogger(__name__)

L_MAX = 4
ORTHOGONALITY_TOL = 1e-10


@dataclass(frozen=True)
class Irrep:
    """O(3) irreducible representation labelled by degree and parity."""

    l: int
    p: int

    def __post_init__(self):
        if self.l < 0:
            raise DomainError(f"degree must be non-negative, got {self.l}")
        if self.p not in (1, -1):
            raise DomainError(f"parity must be +1 or -1, got {self.p}")

    @property
    def dim(self) -> int:
        return 2 * self.l + 1

    def compose(self, other: "Irrep", l: int) -> "Irrep":
        """Irrep obtained by coupling ``self`` and ``other`` into degree ``l``."""
        return Irrep(l, self.p * other.p * (-1) ** (self.l + other.l + l))


# ---------------------------------------------------------------------------
# Real spherical harmonics
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _rsh_polynomial(l: int) -> Tuple[np.ndarray, np.ndarray]:
    """Monomial exponents (K, 3) and coefficients (2l+1, K) of the degree-l solid harmonics."""
    monomials = [(px, py, l - px - py) for px in range(l, -1, -1) for py in range(l - px + 1)]
    column = {mono: k for k, mono in enumerate(monomials)}
    coeffs = np.zeros((2 * l + 1, len(monomials)))
    for m in range(-l, l + 1):
        am = abs(m)
        vm2 = 0 if m >= 0 else 1
        norm = math.sqrt(2 * math.factorial(l + am) * math.factorial(l - am) / (2 if m == 0 else 1))
        norm /= 2 ** am * math.factorial(l)
        for t in range((l - am) // 2 + 1):
            for u in range(t + 1):
                for k in range((am - vm2) // 2 + 1):
                    v2 = vm2 + 2 * k
                    c = Fraction((-1) ** (t + k), 4 ** t)
                    c *= math.comb(l, t) * math.comb(l - t, am + t) * math.comb(t, u) * math.comb(am, v2)
                    if c == 0:
                        continue
                    mono = (2 * t + am - 2 * u - v2, 2 * u + v2, l - 2 * t - am)
                    coeffs[m + l, column[mono]] += float(c) * norm
    exponents = np.array(monomials, dtype=np.int64).reshape(-1, 3)
    exponents.setflags(write=False)
    coeffs.setflags(write=False)
    return exponents, coeffs


def solid_harmonics(l: int, xyz: np.ndarray) -> np.ndarray:
    """Evaluate r^l Y_lm(r/|r|) for every m at points ``xyz`` (..., 3) -> (..., 2l+1)."""
    exponents, coeffs = _rsh_polynomial(l)
    xyz = np.asarray(xyz, dtype=np.float64)
    monos = np.ones(xyz.shape[:-1] + (exponents.shape[0],))
    for axis in range(3):
        monos = monos * xyz[..., axis:axis + 1] ** exponents[:, axis]
    return monos @ coeffs.T


def spherical_harmonics(l: int, vectors: np.ndarray, l_max: int = L_MAX) -> np.ndarray:
    """Real spherical harmonics of degree ``l`` for each row of ``vectors``.

    Args:
        l: Degree, at most ``l_max``.
        vectors: Array (..., 3) of non-zero vectors; only directions matter.
        l_max: Largest supported degree.

    Returns:
        Array (..., 2l+1) ordered m = -l..l.
    """
    if l < 0 or l > l_max:
        raise UnsupportedDegreeError(f"degree {l} outside 0..{l_max}")
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DomainError("spherical harmonics are undefined for a zero-length vector")
    return solid_harmonics(l, vectors / norms)


def real_spherical_harmonic(l: int, m: int, r, l_max: int = L_MAX) -> float:
    """Single real spherical harmonic value Y_lm(r/|r|)."""
    if abs(m) > l:
        raise DomainError(f"order {m} outside -{l}..{l}")
    return float(spherical_harmonics(l, np.asarray(r, dtype=np.float64), l_max)[..., m + l])


# ---------------------------------------------------------------------------
# Clebsch-Gordan coefficients
# ---------------------------------------------------------------------------

def _fact(n: int) -> int:
    return math.factorial(n)


@lru_cache(maxsize=None)
def complex_cg(j1: int, m1: int, j2: int, m2: int, j: int, m: int) -> float:
    """Condon-Shortley Clebsch-Gordan coefficient <j1 m1; j2 m2 | j m> (Racah's formula)."""
    if m1 + m2 != m or not (abs(j1 - j2) <= j <= j1 + j2):
        return 0.0
    if abs(m1) > j1 or abs(m2) > j2 or abs(m) > j:
        return 0.0
    prefactor = Fraction(
        (2 * j + 1) * _fact(j + j1 - j2) * _fact(j - j1 + j2) * _fact(j1 + j2 - j),
        _fact(j1 + j2 + j + 1),
    )
    prefactor *= (
        _fact(j + m) * _fact(j - m) * _fact(j1 - m1) * _fact(j1 + m1) * _fact(j2 - m2) * _fact(j2 + m2)
    )
    total = Fraction(0)
    k_min = max(0, j2 - j - m1, j1 + m2 - j)
    k_max = min(j1 + j2 - j, j1 - m1, j2 + m2)
    for k in range(k_min, k_max + 1):
        denom = (
            _fact(k) * _fact(j1 + j2 - j - k) * _fact(j1 - m1 - k) * _fact(j2 + m2 - k)
            * _fact(j - j2 + m1 + k) * _fact(j - j1 - m2 + k)
        )
        total += Fraction((-1) ** k, denom)
    return math.sqrt(prefactor) * float(total)


@lru_cache(maxsize=None)
def real_from_complex(l: int) -> np.ndarray:
    """Unitary U with real_harmonics = U @ complex_harmonics (rows real m, columns complex m)."""
    u = np.zeros((2 * l + 1, 2 * l + 1), dtype=np.complex128)
    s = 1.0 / math.sqrt(2.0)
    for m in range(-l, l + 1):
        row = m + l
        if m < 0:
            u[row, l + m] = 1j * s
            u[row, l - m] = -1j * s * (-1) ** m
        elif m == 0:
            u[row, l] = 1.0
        else:
            u[row, l - m] = s
            u[row, l + m] = s * (-1) ** m
    u.setflags(write=False)
    return u


def _real_cg_block(l1: int, l2: int, l: int) -> np.ndarray:
    complex_block = np.zeros((2 * l1 + 1, 2 * l2 + 1, 2 * l + 1))
    for m1 in range(-l1, l1 + 1):
        for m2 in range(-l2, l2 + 1):
            m = m1 + m2
            if abs(m) <= l:
                complex_block[m1 + l1, m2 + l2, m + l] = complex_cg(l1, m1, l2, m2, l, m)
    u1, u2, u = real_from_complex(l1), real_from_complex(l2), real_from_complex(l)
    block = np.einsum("am,bn,ck,mnk->abc", u1.conj(), u2.conj(), u, complex_block)
    # Pure real for even l1+l2+l, pure imaginary otherwise.
    return np.ascontiguousarray(block.real if (l1 + l2 + l) % 2 == 0 else block.imag)


class CgTable:
    """Dense real-basis SO(3) Clebsch-Gordan blocks for all degrees up to ``l_max``.

    Blocks are indexed (l1, l2, l) and have shape (2l1+1, 2l2+1, 2l+1). The table
    is built once and is read-only afterwards.
    """

    def __init__(self, l_max: int = 2 * L_MAX):
        self.l_max = l_max
        self._blocks: Dict[Tuple[int, int, int], np.ndarray] = {}
        for l1 in range(l_max + 1):
            for l2 in range(l_max + 1):
                for l in range(abs(l1 - l2), min(l1 + l2, l_max) + 1):
                    block = _real_cg_block(l1, l2, l)
                    block.setflags(write=False)
                    self._blocks[(l1, l2, l)] = block
        logger.debug(f"CgTable built with {len(self._blocks)} blocks up to l_max={l_max}")

    def _check(self, *degrees: int) -> None:
        for d in degrees:
            if d < 0 or d > self.l_max:
                raise UnsupportedDegreeError(f"degree {d} outside 0..{self.l_max}")

    def block(self, l1: int, l2: int, l: int) -> np.ndarray:
        """CG block for (l1, l2) -> l; zeros outside the triangle rule."""
        self._check(l1, l2, l)
        found = self._blocks.get((l1, l2, l))
        if found is None:
            return np.zeros((2 * l1 + 1, 2 * l2 + 1, 2 * l + 1))
        return found

    def paths(self, l1: int, l2: int) -> Iterator[int]:
        """Output degrees allowed by the triangle rule and the table bound."""
        for l in range(abs(l1 - l2), min(l1 + l2, self.l_max) + 1):
            yield l

    def coefficient(self, l1: int, m1: int, l2: int, m2: int, l: int, m: int) -> float:
        if abs(m1) > l1 or abs(m2) > l2 or abs(m) > l:
            return 0.0
        return float(self.block(l1, l2, l)[m1 + l1, m2 + l2, m + l])

    def perturbed(self, key: Tuple[int, int, int], index: Tuple[int, int, int], factor: float) -> "CgTable":
        """Copy of the table with one entry scaled; used to prove the check harness is sensitive."""
        clone = object.__new__(CgTable)
        clone.l_max = self.l_max
        clone._blocks = dict(self._blocks)
        block = np.array(self._blocks[key])
        block[index] *= factor
        block.setflags(write=False)
        clone._blocks[key] = block
        return clone


@lru_cache(maxsize=4)
def default_cg_table(l_max: int = 2 * L_MAX) -> CgTable:
    return CgTable(l_max)


def cg_so3(l1: int, m1: int, l2: int, m2: int, l: int, m: int, table: Optional[CgTable] = None) -> float:
    """Real-basis SO(3) Clebsch-Gordan coefficient C^{lm}_{l1m1;l2m2}."""
    table = table or default_cg_table()
    return table.coefficient(l1, m1, l2, m2, l, m)


def cg_o3(
    l1: int, p1: int, m1: int,
    l2: int, p2: int, m2: int,
    l: int, p: int, m: int,
    table: Optional[CgTable] = None,
) -> float:
    """O(3) coupling coefficient: the SO(3) value when parity is conserved, else exactly 0."""
    if p1 * p2 * p != (-1) ** (l1 + l2 + l):
        return 0.0
    return cg_so3(l1, m1, l2, m2, l, m, table)


# ---------------------------------------------------------------------------
# Wigner-D matrices
# ---------------------------------------------------------------------------

def check_rotation(rotation: np.ndarray, tol: float = ORTHOGONALITY_TOL) -> np.ndarray:
    """Validate a proper rotation matrix and return it as a float64 array."""
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape != (3, 3):
        raise DomainError(f"rotation must be 3x3, got shape {rotation.shape}")
    if np.max(np.abs(rotation @ rotation.T - np.eye(3))) > tol:
        raise DomainError("rotation matrix is not orthogonal")
    if abs(np.linalg.det(rotation) - 1.0) > tol:
        raise DomainError("rotation matrix must have determinant +1")
    return rotation


@lru_cache(maxsize=None)
def _sample_directions(l: int) -> np.ndarray:
    rng = np.random.default_rng(7919 + l)
    points = rng.normal(size=(2 * (2 * l + 1) + 3, 3))
    points /= np.linalg.norm(points, axis=1, keepdims=True)
    points.setflags(write=False)
    return points


def wigner_d(l: int, rotation: np.ndarray, l_max: int = 2 * L_MAX) -> np.ndarray:
    """Real Wigner-D matrix of degree ``l`` with Y_l(R r) = D Y_l(r).

    The matrix is the least-squares solution of the sampled identity over a
    fixed set of generic unit vectors, so it matches the harmonics above by
    construction.
    """
    rotation = check_rotation(rotation)
    if l < 0 or l > l_max:
        raise UnsupportedDegreeError(f"degree {l} outside 0..{l_max}")
    if l == 0:
        return np.ones((1, 1))
    points = _sample_directions(l)
    y = solid_harmonics(l, points)
    y_rot = solid_harmonics(l, points @ rotation.T)
    d_transposed, *_ = np.linalg.lstsq(y, y_rot, rcond=None)
    return d_transposed.T


def wigner_d_blocks(rotation: np.ndarray, l_max: int) -> List[np.ndarray]:
    """Wigner-D matrices for degrees 0..l_max."""
    return [wigner_d(l, rotation, max(l_max, 1)) for l in range(l_max + 1)]


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed proper rotation."""
    return Rotation.random(random_state=rng).as_matrix()


def gaunt_real(l1: int, m1: int, l2: int, m2: int, l: int, m: int, table: Optional[CgTable] = None) -> float:
    """Integral of three Racah-normalized real harmonics over the unit sphere.

    Equals 4*pi/(2l+1) * <l1 0; l2 0 | l 0> * C^{lm}_{l1m1;l2m2}; vanishes when
    l1+l2+l is odd.
    """
    if (l1 + l2 + l) % 2 == 1 or not (abs(l1 - l2) <= l <= l1 + l2):
        return 0.0
    table = table or default_cg_table(max(L_MAX, l1 + l2, l))
    return 4.0 * math.pi / (2 * l + 1) * complex_cg(l1, 0, l2, 0, l, 0) * table.coefficient(l1, m1, l2, m2, l, m)
