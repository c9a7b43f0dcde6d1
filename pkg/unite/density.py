"""Electron densities expanded in the auxiliary Gaussian basis.

Coefficients are stored per atom in the order degree, shell, m (the order of
``AuxBasisSpec.shells``), which is also the order the density head emits.
"""
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse

from unite.basis import AOBasis
from unite.errors import DomainError, FeaturizationError
from unite.featurizer import AuxBasisSpec, Geometry, MeanFieldState, aux_overlap
from unite.integrals import evaluate_shell, shell_integral, shell_overlap

logger = logging.getLogger(__name__)

GRID_SPACING = 0.2
GRID_PADDING = 4.0
DENSITY_CUTOFF = 1e-5
EVALUATION_CHUNK = 8192
AVERAGING_CONVENTIONS = ("molecule", "electron")


def aux_layout(aux: AuxBasisSpec) -> List[Tuple[int, float, slice]]:
    """(l, exponent, slice into the per-atom coefficient vector) for every aux shell."""
    layout, start = [], 0
    for l, _, gamma in aux.shells():
        layout.append((l, gamma, slice(start, start + 2 * l + 1)))
        start += 2 * l + 1
    return layout


@dataclass(frozen=True)
class DensityCoeffs:
    """Per-atom density-fitting coefficients, shape (n_atoms, aux.functions_per_atom)."""

    atomic_numbers: Tuple[int, ...]
    values: np.ndarray
    aux: AuxBasisSpec = field(default_factory=AuxBasisSpec)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        expected = (len(self.atomic_numbers), self.aux.functions_per_atom)
        if values.shape != expected:
            raise DomainError(f"density coefficients have shape {values.shape}, expected {expected}")
        object.__setattr__(self, "atomic_numbers", tuple(int(z) for z in self.atomic_numbers))
        object.__setattr__(self, "values", values)

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    @classmethod
    def from_flat(cls, atomic_numbers: Sequence[int], flat, aux: Optional[AuxBasisSpec] = None) -> "DensityCoeffs":
        aux = aux or AuxBasisSpec()
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != len(atomic_numbers) * aux.functions_per_atom:
            raise DomainError(f"{flat.size} coefficients do not fit {len(atomic_numbers)} atoms")
        return cls(tuple(atomic_numbers), flat.reshape(len(atomic_numbers), -1), aux)

    def scaled(self, factor: float) -> "DensityCoeffs":
        return DensityCoeffs(self.atomic_numbers, factor * self.values, self.aux)


def density_evaluate(coeffs: DensityCoeffs, coords: np.ndarray, points: np.ndarray,
                     chunk: int = EVALUATION_CHUNK) -> np.ndarray:
    """rho(r) = sum over atoms and aux functions of d * chi(r - x_A), at each of ``points`` (N, 3)."""
    coords = np.asarray(coords, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(points)):
        raise DomainError("grid points must be finite")
    layout = aux_layout(coeffs.aux)
    out = np.zeros(len(points))
    for start in range(0, len(points), chunk):
        block = points[start:start + chunk]
        values = np.zeros(len(block))
        for atom, centre in enumerate(coords):
            offsets = block - centre
            d = coeffs.values[atom]
            for l, gamma, sl in layout:
                if d[sl].any():
                    values += evaluate_shell(l, gamma, offsets) @ d[sl]
        out[start:start + chunk] = values
    return out


def integrate_coefficients(coeffs: DensityCoeffs) -> float:
    """Analytic integral of the expanded density; only s functions contribute."""
    total = 0.0
    for l, gamma, sl in aux_layout(coeffs.aux):
        if l == 0:
            total += float(shell_integral(0, gamma)[0] * coeffs.values[:, sl].sum())
    return total


def density_overlap_matrix(
    geometry: Geometry,
    aux: Optional[AuxBasisSpec] = None,
    sparse: bool = False,
    flush: float = 1e-12,
):
    """Overlap S^rho between all aux functions of a molecule.

    Entries below ``flush`` are dropped. Returns a dense array, or a
    ``scipy.sparse.coo_matrix`` when ``sparse`` is set.
    """
    aux = aux or AuxBasisSpec()
    layout = aux_layout(aux)
    width = aux.functions_per_atom
    n = geometry.n_atoms * width
    s = np.zeros((n, n))
    for a in range(geometry.n_atoms):
        for b in range(a, geometry.n_atoms):
            displacement = geometry.coords[b] - geometry.coords[a]
            for i, (la, ga, sa) in enumerate(layout):
                rows = slice(a * width + sa.start, a * width + sa.stop)
                for j, (lb, gb, sb) in enumerate(layout):
                    if a == b and j < i:
                        continue
                    cols = slice(b * width + sb.start, b * width + sb.stop)
                    block = shell_overlap(la, ga, lb, gb, displacement)
                    s[rows, cols] = block
                    s[cols, rows] = block.T
    s[np.abs(s) < flush] = 0.0
    if sparse:
        return scipy.sparse.coo_matrix(s)
    return s


@lru_cache(maxsize=None)
def _default_element_tables(z: int):
    return aux_overlap(z, AuxBasisSpec())


@lru_cache(maxsize=1)
def _default_onsite_factor():
    return scipy.linalg.cho_factor(onsite_aux_gram(AuxBasisSpec()))


def onsite_aux_gram(aux: AuxBasisSpec) -> np.ndarray:
    """One-centre overlap of the aux functions of a single atom."""
    return density_overlap_matrix(Geometry((1,), np.zeros((1, 3)), charge=1), aux)


def fit_onsite_density(state: MeanFieldState, basis: AOBasis, aux: Optional[AuxBasisSpec] = None) -> DensityCoeffs:
    """Project each atom's on-site density 2 P_AA onto that atom's aux functions.

    Solves S_A d_A = <chi | rho_AA> per atom, with the projections built from
    the three-index on-site overlaps.
    """
    use_default = aux is None
    try:
        factor = _default_onsite_factor() if use_default else scipy.linalg.cho_factor(onsite_aux_gram(aux))
    except np.linalg.LinAlgError as e:
        raise FeaturizationError(f"aux one-centre overlap is not positive definite: {e}") from e
    aux = aux or AuxBasisSpec()
    rows = []
    for atom, z in enumerate(basis.atomic_numbers):
        sl = basis.atom_slice(atom)
        onsite = 2.0 * state.density[sl, sl]
        tables = _default_element_tables(z) if use_default else aux_overlap(z, aux)
        projections = [np.einsum("ij,ijnm->nm", onsite, table).reshape(-1) for _, table in sorted(tables.items())]
        rows.append(scipy.linalg.cho_solve(factor, np.concatenate(projections)))
    return DensityCoeffs(tuple(basis.atomic_numbers), np.array(rows), aux)


@dataclass(frozen=True)
class Grid:
    """Rectilinear voxel grid; points run with z fastest, then y, then x."""

    origin: np.ndarray
    spacing: float
    shape: Tuple[int, int, int]

    @property
    def n_points(self) -> int:
        return int(np.prod(self.shape))

    @property
    def weight(self) -> float:
        return self.spacing ** 3

    @property
    def axes(self) -> np.ndarray:
        return self.spacing * np.eye(3)

    def points(self) -> np.ndarray:
        ix, iy, iz = np.meshgrid(*(np.arange(n) for n in self.shape), indexing="ij")
        steps = np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)
        return self.origin + self.spacing * steps


def rectilinear_grid(coords: np.ndarray, spacing: float = GRID_SPACING, padding: float = GRID_PADDING) -> Grid:
    """Grid covering the atoms plus ``padding`` Bohr on every side."""
    if spacing <= 0.0:
        raise DomainError(f"grid spacing must be positive, got {spacing}")
    coords = np.asarray(coords, dtype=np.float64)
    low = coords.min(axis=0) - padding
    high = coords.max(axis=0) + padding
    shape = tuple(int(math.ceil((hi - lo) / spacing)) + 1 for lo, hi in zip(low, high))
    return Grid(low, float(spacing), shape)


def epsilon_rho(reference: np.ndarray, predicted: np.ndarray, weights=1.0, cutoff: Optional[float] = None) -> float:
    """Relative L1 density error in percent: 100 * int|rho - rho_hat| / int|rho|.

    Points where the reference falls below ``cutoff`` are excluded from both integrals.

    Raises:
        DomainError: If the grids differ or the reference integrates to zero.
    """
    reference = np.asarray(reference, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if reference.shape != predicted.shape:
        raise DomainError(f"density samples differ in shape: {reference.shape} vs {predicted.shape}")
    weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), reference.shape)
    if cutoff is not None:
        mask = reference >= cutoff
        reference, predicted, weights = reference[mask], predicted[mask], weights[mask]
    norm = float(np.sum(weights * np.abs(reference)))
    if norm == 0.0:
        raise DomainError("reference density integrates to zero")
    return 100.0 * float(np.sum(weights * np.abs(reference - predicted))) / norm


def average_epsilon_rho(values: Sequence[float], n_electrons: Sequence[int], convention: str = "molecule") -> float:
    """Dataset average of per-molecule errors, either plain or weighted by electron count."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DomainError("no density errors to average")
    if convention == "molecule":
        return float(values.mean())
    if convention == "electron":
        counts = np.asarray(n_electrons, dtype=np.float64)
        return float(np.sum(values * counts) / np.sum(counts))
    raise DomainError(f"unknown averaging convention {convention!r}; expected one of {AVERAGING_CONVENTIONS}")


def molecule_epsilon_rho(
    reference: DensityCoeffs,
    predicted: DensityCoeffs,
    geometry: Geometry,
    spacing: float = GRID_SPACING,
    cutoff: Optional[float] = DENSITY_CUTOFF,
) -> float:
    """epsilon_rho of two coefficient sets evaluated on the molecule's voxel grid."""
    grid = rectilinear_grid(geometry.coords, spacing)
    points = grid.points()
    ref = density_evaluate(reference, geometry.coords, points)
    pred = density_evaluate(predicted, geometry.coords, points)
    logger.debug(f"Evaluated densities on {grid.n_points} grid points (spacing {spacing})")
    return epsilon_rho(ref, pred, grid.weight, cutoff)
