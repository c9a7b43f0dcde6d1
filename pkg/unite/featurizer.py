"""Toy tight-binding featurizer producing the AO input channels of the network.

A one-shot extended-Hückel model with a Mulliken charge correction replaces a
real semi-empirical code. Everything is a function of relative geometry only,
so the channels rotate block-wise with the molecule and are unchanged by
translations.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy.spatial.distance import pdist

from unite import o3
from unite.basis import AOBasis, NBodyTensor, check_permutation, element_spec
from unite.errors import DomainError, FeaturizationError
from unite.integrals import onsite_three_index, shell_overlap
from unite.settings import FeaturizerSettings

logger = logging.getLogger(__name__)

MIN_DISTANCE = 0.1
MAX_CONDITION = 1e10
DEGENERACY_TOL = 1e-8


@dataclass(frozen=True)
class ToyParameters:
    """Constants of the toy Hamiltonian (artifact values, not fitted).

    ``charge_energy`` adds 0.5 * hardness * sum(q_A^2) to the energy; the
    reference model that labels toy datasets turns it on.
    """

    hueckel_k: float = 1.75
    hardness: float = 0.4
    charge_energy: bool = False


FEATURIZER_PARAMETERS = ToyParameters()
REFERENCE_PARAMETERS = ToyParameters(hueckel_k=1.9, charge_energy=True)


@dataclass(frozen=True)
class Geometry:
    """Atomic numbers, coordinates in Bohr and total charge of one molecule."""

    atomic_numbers: Tuple[int, ...]
    coords: np.ndarray
    charge: int = 0

    def __post_init__(self):
        numbers = tuple(int(z) for z in self.atomic_numbers)
        coords = np.array(self.coords, dtype=np.float64).reshape(-1, 3) if len(numbers) else np.zeros((0, 3))
        if coords.shape != (len(numbers), 3):
            raise DomainError(f"expected {len(numbers)} coordinates, got shape {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise DomainError("coordinates must be finite")
        for z in numbers:
            element_spec(z)
        if len(numbers) > 1:
            closest = float(pdist(coords).min())
            if closest < MIN_DISTANCE:
                raise DomainError(f"atoms closer than {MIN_DISTANCE} Bohr (closest pair {closest:.3g})")
        coords.setflags(write=False)
        object.__setattr__(self, "atomic_numbers", numbers)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "charge", int(self.charge))

    @property
    def n_atoms(self) -> int:
        return len(self.atomic_numbers)

    @property
    def n_electrons(self) -> int:
        return sum(self.atomic_numbers) - self.charge

    def translated(self, shift) -> "Geometry":
        return Geometry(self.atomic_numbers, self.coords + np.asarray(shift, dtype=np.float64), self.charge)

    def rotated(self, rotation: np.ndarray) -> "Geometry":
        rotation = o3.check_rotation(rotation)
        return Geometry(self.atomic_numbers, self.coords @ rotation.T, self.charge)

    def inverted(self) -> "Geometry":
        return Geometry(self.atomic_numbers, -self.coords, self.charge)

    def permuted(self, sigma: Sequence[int]) -> "Geometry":
        """Atom A of this geometry becomes atom sigma[A]."""
        sigma = check_permutation(sigma, self.n_atoms)
        inverse = np.argsort(sigma)
        return Geometry(tuple(self.atomic_numbers[i] for i in inverse), self.coords[inverse], self.charge)

    def displaced(self, atom: int, axis: int, step: float) -> "Geometry":
        coords = np.array(self.coords)
        coords[atom, axis] += step
        return Geometry(self.atomic_numbers, coords, self.charge)

    def combined(self, other: "Geometry", shift=(0.0, 0.0, 0.0)) -> "Geometry":
        """Disjoint union with ``other`` translated by ``shift``."""
        coords = np.concatenate([self.coords, other.coords + np.asarray(shift, dtype=np.float64)])
        return Geometry(self.atomic_numbers + other.atomic_numbers, coords, self.charge + other.charge)


@dataclass(frozen=True)
class AuxBasisSpec:
    """Auxiliary Gaussian exponents per degree, each shell unit-normalized."""

    exponents: Dict[int, Tuple[float, ...]] = field(default_factory=lambda: default_aux_exponents())

    def __post_init__(self):
        for l, values in self.exponents.items():
            values = np.asarray(values, dtype=np.float64)
            if np.any(values <= 0.0):
                raise DomainError(f"aux exponents for l={l} must be positive")
            if np.any(np.diff(values) >= 0.0):
                raise DomainError(f"aux exponents for l={l} must strictly decrease")

    @property
    def l_max(self) -> int:
        return max(self.exponents)

    def count(self, l: int) -> int:
        return len(self.exponents.get(l, ()))

    @property
    def functions_per_atom(self) -> int:
        return sum(len(v) * (2 * l + 1) for l, v in self.exponents.items())

    def shells(self) -> List[Tuple[int, int, float]]:
        """(l, n, exponent) in coefficient order: degree, then shell, then m."""
        return [(l, n, g) for l in sorted(self.exponents) for n, g in enumerate(self.exponents[l])]


def default_aux_exponents() -> Dict[int, Tuple[float, ...]]:
    return {
        0: tuple(128.0 * 0.5 ** n for n in range(16)),
        1: tuple(32.0 * 0.25 ** n for n in range(8)),
        2: tuple(4.0 * 0.25 ** n for n in range(4)),
    }


@dataclass
class MeanFieldState:
    """Solution of the toy mean-field problem.

    P is factor-2-free (sum over the n_elec/2 occupied spatial orbitals), so
    trace(P S) = n_elec / 2. Orbital energies are eigenvalues of H; F adds the
    one-shot charge correction on top.
    """

    coefficients: np.ndarray
    energies: np.ndarray
    occupations: np.ndarray
    density: np.ndarray
    fock: np.ndarray
    core: np.ndarray
    overlap: np.ndarray
    charges: np.ndarray
    e_tb: float
    n_electrons: int
    degenerate_frontier: bool = False

    @property
    def n_occupied(self) -> int:
        return self.n_electrons // 2

    @property
    def homo(self) -> float:
        return float(self.energies[self.n_occupied - 1])

    @property
    def lumo(self) -> float:
        if self.n_occupied >= len(self.energies):
            raise FeaturizationError("no virtual orbital; LUMO undefined")
        return float(self.energies[self.n_occupied])

    @property
    def populations(self) -> np.ndarray:
        """Electron population per AO (with the factor 2)."""
        return 2.0 * np.einsum("ij,ji->i", self.density, self.overlap)


def overlap_matrix(geometry: Geometry, basis: Optional[AOBasis] = None, flush: float = 1e-12) -> np.ndarray:
    """AO overlap matrix S; entries below ``flush`` in magnitude are set to exactly 0.

    Raises:
        FeaturizationError: If S is singular or too ill-conditioned.
    """
    basis = basis or AOBasis(geometry.atomic_numbers)
    s = np.zeros((basis.dim, basis.dim))
    shells = list(basis.iter_shells())
    for i, (atom_a, _, shell_a, sl_a) in enumerate(shells):
        for atom_b, _, shell_b, sl_b in shells[i:]:
            displacement = geometry.coords[atom_b] - geometry.coords[atom_a]
            block = shell_overlap(shell_a.l, shell_a.exponent, shell_b.l, shell_b.exponent, displacement)
            s[sl_a, sl_b] = block
            s[sl_b, sl_a] = block.T
    s[np.abs(s) < flush] = 0.0
    if basis.dim:
        eigenvalues = scipy.linalg.eigvalsh(s)
        if eigenvalues[0] <= 0.0 or eigenvalues[-1] / eigenvalues[0] > MAX_CONDITION:
            raise FeaturizationError(
                f"overlap matrix is singular or ill-conditioned (smallest eigenvalue {eigenvalues[0]:.3e})"
            )
    return s


def _core_repulsion(geometry: Geometry) -> float:
    if geometry.n_atoms < 2:
        return 0.0
    z_eff = np.array([element_spec(z).z_eff for z in geometry.atomic_numbers])
    distances = pdist(geometry.coords)
    i, j = np.triu_indices(geometry.n_atoms, k=1)
    return float(np.sum(z_eff[i] * z_eff[j] * np.exp(-distances) / distances))


def mulliken_charges(geometry: Geometry, basis: AOBasis, density: np.ndarray, overlap: np.ndarray) -> np.ndarray:
    populations = 2.0 * np.einsum("ij,ji->i", density, overlap)
    per_atom = np.zeros(geometry.n_atoms)
    np.add.at(per_atom, basis.ao_atoms, populations)
    return np.asarray(geometry.atomic_numbers, dtype=np.float64) - per_atom


def mean_field(
    geometry: Geometry,
    basis: Optional[AOBasis] = None,
    params: ToyParameters = FEATURIZER_PARAMETERS,
    flush: float = 1e-12,
    field: Optional[np.ndarray] = None,
) -> MeanFieldState:
    """Solve the one-shot toy Hamiltonian H C = S C eps and build P, F and E_TB.

    H carries the on-site energies e_m on its diagonal and K/2 (e_m + e_n) S_mn
    elsewhere (extended Hückel).

    Args:
        geometry: Closed-shell molecule.
        basis: AO layout; built from the geometry when omitted.
        params: Hamiltonian constants.
        flush: Overlap entries below this magnitude are zeroed.
        field: Optional uniform electric field (a.u.), coupled through AO centres.

    Returns:
        The mean-field state.

    Raises:
        FeaturizationError: Odd electron count, too many electrons for the basis,
            or an eigen-solver failure.
    """
    basis = basis or AOBasis(geometry.atomic_numbers)
    n_elec = geometry.n_electrons
    if n_elec % 2 == 1:
        raise FeaturizationError(f"odd electron count {n_elec}; only closed shells are supported")
    if n_elec <= 0:
        raise FeaturizationError(f"molecule has no electrons (count {n_elec})")
    n_occ = n_elec // 2
    if n_occ > basis.dim:
        raise FeaturizationError(f"{n_elec} electrons do not fit into {basis.dim} orbitals")

    s = overlap_matrix(geometry, basis, flush)
    onsite = np.concatenate([np.full(spec.size, spec.onsite_energy) for _, _, spec, _ in basis.iter_shells()])
    h = 0.5 * params.hueckel_k * (onsite[:, None] + onsite[None, :]) * s
    np.fill_diagonal(h, onsite)
    if field is not None:
        centre_potential = (geometry.coords @ np.asarray(field, dtype=np.float64))[basis.ao_atoms]
        h = h + 0.5 * (centre_potential[:, None] + centre_potential[None, :]) * s
    try:
        energies, coefficients = scipy.linalg.eigh(h, s)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise FeaturizationError(f"generalized eigenproblem failed: {e}") from e

    occupations = np.zeros(basis.dim)
    occupations[:n_occ] = 1.0
    occupied = coefficients[:, :n_occ]
    density = occupied @ occupied.T
    density = 0.5 * (density + density.T)

    charges = mulliken_charges(geometry, basis, density, s)
    potential = params.hardness * charges[basis.ao_atoms]
    fock = h + 0.5 * (potential[:, None] + potential[None, :]) * s

    e_tb = 2.0 * float(np.sum(energies[:n_occ])) + _core_repulsion(geometry)
    if params.charge_energy:
        e_tb += 0.5 * params.hardness * float(np.sum(charges ** 2))

    degenerate = n_occ < basis.dim and abs(energies[n_occ] - energies[n_occ - 1]) < DEGENERACY_TOL
    if degenerate:
        logger.warning(f"Degenerate frontier orbitals (HOMO {energies[n_occ - 1]:.8f}, LUMO {energies[n_occ]:.8f})")

    return MeanFieldState(
        coefficients=coefficients,
        energies=energies,
        occupations=occupations,
        density=density,
        fock=fock,
        core=h,
        overlap=s,
        charges=charges,
        e_tb=e_tb,
        n_electrons=n_elec,
        degenerate_frontier=bool(degenerate),
    )


def energy_weighted_density(state: MeanFieldState, betas: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Hole and particle energy-weighted density matrices, one per beta.

    D_h(beta) = sum_i C_i C_i^T exp(-beta (eps_HOMO - eps_i)) n_i and
    D_p(beta) = sum_a C_a C_a^T exp(-beta (eps_a - eps_LUMO)) (1 - n_a).

    Returns:
        Two arrays of shape (len(betas), n_ao, n_ao).
    """
    if state.n_occupied < 1:
        raise FeaturizationError("HOMO undefined without occupied orbitals")
    if state.n_occupied >= len(state.energies):
        raise FeaturizationError("particle density undefined: no virtual orbitals")
    c = state.coefficients
    eps = state.energies
    n = state.occupations
    betas = np.asarray(betas, dtype=np.float64)
    hole_gap = np.clip(state.homo - eps, 0.0, None)
    particle_gap = np.clip(eps - state.lumo, 0.0, None)
    hole_w = np.exp(-betas[:, None] * hole_gap[None, :]) * n[None, :]
    particle_w = np.exp(-betas[:, None] * particle_gap[None, :]) * (1.0 - n)[None, :]
    d_h = np.einsum("mi,bi,ni->bmn", c, hole_w, c)
    d_p = np.einsum("ma,ba,na->bmn", c, particle_w, c)
    return 0.5 * (d_h + d_h.transpose(0, 2, 1)), 0.5 * (d_p + d_p.transpose(0, 2, 1))


def aux_overlap(element: int, aux: Optional[AuxBasisSpec] = None) -> Dict[int, np.ndarray]:
    """On-site three-index overlaps Q[l] of shape (n_ao, n_ao, n_aux_l, 2l+1) for one element."""
    aux = aux or AuxBasisSpec()
    shells = element_spec(element).shells
    n_ao = sum(s.size for s in shells)
    starts = np.concatenate([[0], np.cumsum([s.size for s in shells])])
    tables = {}
    for l in sorted(aux.exponents):
        table = np.zeros((n_ao, n_ao, aux.count(l), 2 * l + 1))
        for n, gamma in enumerate(aux.exponents[l]):
            for i, sa in enumerate(shells):
                for j, sb in enumerate(shells):
                    block = onsite_three_index(sa.l, sa.exponent, sb.l, sb.exponent, l, gamma)
                    table[starts[i]:starts[i + 1], starts[j]:starts[j + 1], n, :] = block
        tables[l] = table
    return tables


def channel_names(settings: FeaturizerSettings) -> Tuple[str, ...]:
    names = ["F", "P", "H", "S"]
    if settings.fmo_features:
        names += [f"D_h({b:g})" for b in settings.betas]
        names += [f"D_p({b:g})" for b in settings.betas]
    return tuple(names)


def featurize(
    geometry: Geometry,
    settings: Optional[FeaturizerSettings] = None,
    params: ToyParameters = FEATURIZER_PARAMETERS,
) -> Tuple[NBodyTensor, MeanFieldState]:
    """Build the channel stack (F, P, H, S[, D_h, D_p]) for one molecule.

    Returns:
        The N-body tensor and the mean-field state carrying E_TB.
    """
    settings = settings or FeaturizerSettings()
    basis = AOBasis(geometry.atomic_numbers)
    state = mean_field(geometry, basis, params, settings.flush_threshold)
    stack = [state.fock, state.density, state.core, state.overlap]
    if settings.fmo_features:
        d_h, d_p = energy_weighted_density(state, settings.betas)
        stack.extend(d_h)
        stack.extend(d_p)
    data = np.array(stack)
    data[np.abs(data) < settings.flush_threshold] = 0.0
    logger.debug(f"Featurized {geometry.n_atoms} atoms into {len(stack)} channels of dimension {basis.dim}")
    return NBodyTensor(channel_names(settings), data, basis), state
