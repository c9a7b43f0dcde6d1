"""Random small closed-shell molecules labelled by the reference toy model.

Labels come from ``REFERENCE_PARAMETERS``, which differ from the featurizer's
Hamiltonian, so a delta-learning model has a non-zero residual to fit.
"""
import logging
from typing import Dict, List, Optional, Sequence

import numpy as np

from unite.basis import ELEMENTS, AOBasis
from unite.density import fit_onsite_density
from unite.errors import DomainError, FeaturizationError
from unite.featurizer import REFERENCE_PARAMETERS, Geometry, MeanFieldState, ToyParameters, mean_field
from unite.tools.dataset_tool import MoleculeRecord
from unite.training import STENCIL

logger = logging.getLogger(__name__)

BOND_RANGE = (2.0, 2.8)
MIN_SEPARATION = 1.8
CONFORMER_SIGMA = 0.05
FIELD_STEP = 1e-3
FORCE_STEP = 0.01
MAX_ATTEMPTS = 200

# Heavy elements are drawn less often than hydrogen.
ELEMENT_WEIGHTS: Dict[int, float] = {1: 4.0, 6: 2.0, 7: 1.0, 8: 1.0, 9: 0.5, 16: 0.5, 17: 0.5}


def random_geometry(rng: np.random.Generator, n_atoms: int) -> Geometry:
    """Grow a molecule atom by atom, each new atom bonded to a random earlier one.

    A trailing hydrogen is added when the electron count would be odd.
    """
    weights = np.array([ELEMENT_WEIGHTS[z] for z in ELEMENTS])
    numbers = [int(z) for z in rng.choice(ELEMENTS, size=n_atoms, p=weights / weights.sum())]
    if sum(numbers) % 2:
        numbers.append(1)
    coords = [np.zeros(3)]
    while len(coords) < len(numbers):
        anchor = coords[rng.integers(len(coords))]
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        candidate = anchor + rng.uniform(*BOND_RANGE) * direction
        if min(np.linalg.norm(candidate - c) for c in coords) >= MIN_SEPARATION:
            coords.append(candidate)
    return Geometry(tuple(numbers), np.array(coords))


def conformer(geometry: Geometry, rng: np.random.Generator, sigma: float = CONFORMER_SIGMA) -> Geometry:
    coords = geometry.coords + rng.normal(scale=sigma, size=geometry.coords.shape)
    return Geometry(geometry.atomic_numbers, coords, geometry.charge)


def mulliken_dipole(geometry: Geometry, state: MeanFieldState) -> np.ndarray:
    return state.charges @ geometry.coords


def reference_forces(geometry: Geometry, params: ToyParameters = REFERENCE_PARAMETERS,
                     step: float = FORCE_STEP) -> np.ndarray:
    """-dE/dx of the reference energy by the same 5-point stencil the model uses."""
    basis = AOBasis(geometry.atomic_numbers)
    forces = np.zeros((geometry.n_atoms, 3))
    for atom in range(geometry.n_atoms):
        for axis in range(3):
            total = sum(
                weight * mean_field(geometry.displaced(atom, axis, k * step), basis, params).e_tb
                for k, weight in STENCIL
            )
            forces[atom, axis] = -total / (12.0 * step)
    return forces


def polarizability(geometry: Geometry, params: ToyParameters = REFERENCE_PARAMETERS,
                   step: float = FIELD_STEP) -> float:
    """Isotropic polarizability: mean d(mu_k)/d(field_k) by central differences."""
    basis = AOBasis(geometry.atomic_numbers)
    total = 0.0
    for axis in range(3):
        field = np.zeros(3)
        field[axis] = step
        plus = mulliken_dipole(geometry, mean_field(geometry, basis, params, field=field))
        minus = mulliken_dipole(geometry, mean_field(geometry, basis, params, field=-field))
        total += (plus[axis] - minus[axis]) / (2.0 * step)
    return total / 3.0


def spatial_extent(geometry: Geometry, state: MeanFieldState) -> float:
    """<R^2> of the Mulliken electron populations about their centroid."""
    populations = np.asarray(geometry.atomic_numbers, dtype=np.float64) - state.charges
    centroid = populations @ geometry.coords / populations.sum()
    offsets = geometry.coords - centroid
    return float(np.sum(populations * np.sum(offsets * offsets, axis=1)))


def reference_labels(geometry: Geometry, params: ToyParameters = REFERENCE_PARAMETERS,
                     with_forces: bool = True, with_density: bool = True) -> Dict[str, object]:
    """Every label key the dataset format knows, computed from the reference model.

    Raises:
        FeaturizationError: If the molecule has no virtual orbital or the solve fails.
    """
    basis = AOBasis(geometry.atomic_numbers)
    state = mean_field(geometry, basis, params)
    labels: Dict[str, object] = {
        "energy_hartree": state.e_tb,
        "dipole_au": mulliken_dipole(geometry, state).tolist(),
        "polarizability_au": polarizability(geometry, params),
        "homo_hartree": state.homo,
        "lumo_hartree": state.lumo,
        "gap_hartree": state.lumo - state.homo,
        "r2_au": spatial_extent(geometry, state),
    }
    if with_forces:
        labels["forces_hartree_per_bohr"] = reference_forces(geometry, params).tolist()
    if with_density:
        labels["density_coeffs"] = fit_onsite_density(state, basis).values.tolist()
    return labels


def make_toy_dataset(
    n_molecules: int,
    seed: int = 0,
    atoms_range: Sequence[int] = (2, 4),
    conformers: int = 1,
    with_forces: bool = True,
    with_density: bool = True,
    params: Optional[ToyParameters] = None,
) -> List[MoleculeRecord]:
    """Generate ``n_molecules`` molecules, each with ``conformers`` perturbed geometries.

    Molecules the toy model cannot solve (no virtual orbital, ill-conditioned
    overlap) are redrawn.
    """
    params = params or REFERENCE_PARAMETERS
    rng = np.random.default_rng(seed)
    records: List[MoleculeRecord] = []
    for index in range(n_molecules):
        for attempt in range(MAX_ATTEMPTS):
            base = random_geometry(rng, int(rng.integers(atoms_range[0], atoms_range[1] + 1)))
            geometries = [base] + [conformer(base, rng) for _ in range(conformers - 1)]
            try:
                batch = [
                    MoleculeRecord.from_geometry(
                        g, reference_labels(g, params, with_forces, with_density), molecule_id=f"toy-{index}"
                    )
                    for g in geometries
                ]
            except (FeaturizationError, DomainError) as e:
                logger.debug(f"Redrawing toy molecule {index} (attempt {attempt}): {e}")
                continue
            records.extend(batch)
            break
        else:
            raise FeaturizationError(f"could not draw a solvable toy molecule after {MAX_ATTEMPTS} attempts")
    logger.info(f"Generated {n_molecules} toy molecules ({len(records)} geometries)")
    return records
