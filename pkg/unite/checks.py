"""Named property suites behind ``unite check``.

Each suite returns a :class:`SuiteReport` of cases with the largest observed
deviation and the tolerance it was held to.
"""
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from unite import o3
from unite.basis import rotate_tensor
from unite.errors import DomainError, FeaturizationError, UnknownSuiteError
from unite.featurizer import Geometry, featurize
from unite.graph import MoleculeFeatures, collate
from unite.layers import EquivariantRep
from unite.model import UniteModel
from unite.settings import FeaturizerSettings, HeadSettings, ModelSettings
from unite.toy_data import random_geometry
from unite.training import backward, smooth_l1

logger = logging.getLogger(__name__)

SUITES = ("cg", "equivariance", "gradcheck", "extensivity", "scaling")
FAR_SHIFT = 1000.0
CHAIN_UNITS = (8, 16, 32, 64)
SCALING_EXPONENT = 1.7
INJECTED_BUG_FACTOR = 1.01
INJECTED_BUG_PATH = (1, 1, 2)


@dataclass
class CaseResult:
    case: str
    max_deviation: float
    tolerance: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.max_deviation = float(self.max_deviation)
        self.passed = bool(self.max_deviation <= self.tolerance)


@dataclass
class SuiteReport:
    suite: str
    cases: List[CaseResult] = field(default_factory=list)
    table: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)

    def add(self, case: str, deviation: float, tolerance: float) -> CaseResult:
        result = CaseResult(case, deviation, tolerance)
        self.cases.append(result)
        level = logging.INFO if result.passed else logging.WARNING
        logger.log(level, f"[{self.suite}] {case}: deviation={result.max_deviation:.3e} tolerance={tolerance:.1e}")
        return result

    def to_dict(self) -> Dict[str, Any]:
        out = {"suite": self.suite, "cases": [asdict(c) for c in self.cases], "passed": self.passed}
        if self.table:
            out["table"] = self.table
        return out


def injected_bug_table() -> o3.CgTable:
    """CG table with its largest (1, 1) -> 2 entry scaled by 1.01."""
    table = o3.default_cg_table()
    block = table.block(*INJECTED_BUG_PATH)
    index = np.unravel_index(int(np.argmax(np.abs(block))), block.shape)
    return table.perturbed(INJECTED_BUG_PATH, tuple(int(i) for i in index), INJECTED_BUG_FACTOR)


def _random_model(settings: ModelSettings, seed: int, cg_table: Optional[o3.CgTable] = None,
                  head: str = "energy", n_channels: int = 4) -> UniteModel:
    torch.manual_seed(seed)
    model = UniteModel(settings, HeadSettings(kind=head), n_channels, cg_table=cg_table)
    model.eval()
    return model


def _features(geometry: Geometry, settings: Optional[FeaturizerSettings] = None) -> MoleculeFeatures:
    tensor, state = featurize(geometry, settings)
    return MoleculeFeatures(tensor, geometry, state.e_tb)


def _rep(model: UniteModel, geometry: Geometry) -> EquivariantRep:
    with torch.no_grad():
        return model.net(collate([_features(geometry)]))


def _rep_deviation(a: EquivariantRep, b: EquivariantRep) -> float:
    return max(float(torch.max(torch.abs(a[k] - b[k]))) if a[k].numel() else 0.0 for k in a.keys())


def _solvable_geometries(rng: np.random.Generator, count: int, atoms=(3, 8)) -> List[Geometry]:
    out = []
    while len(out) < count:
        geometry = random_geometry(rng, int(rng.integers(atoms[0], atoms[1] + 1)))
        try:
            featurize(geometry)
        except (FeaturizationError, DomainError) as e:
            logger.debug(f"Skipping unsolvable random molecule: {e}")
            continue
        out.append(geometry)
    return out


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

def cg_suite(scale: float = 1.0, seed: int = 0, trials: int = 1000, table: Optional[o3.CgTable] = None) -> SuiteReport:
    """CG orthogonality, CG equivariance, RSH closure and the Wigner-D homomorphism."""
    report = SuiteReport("cg")
    table = table or o3.default_cg_table()
    rng = np.random.default_rng(seed)

    worst = 0.0
    for l1 in range(table.l_max + 1):
        for l2 in range(table.l_max + 1):
            columns = [table.block(l1, l2, l).reshape(-1, 2 * l + 1) for l in table.paths(l1, l2)]
            stacked = np.concatenate(columns, axis=1)
            gram = stacked.T @ stacked
            worst = max(worst, float(np.max(np.abs(gram - np.eye(gram.shape[0])))))
    report.add(f"orthogonality l<={table.l_max}", worst, 1e-12 * scale)

    worst = 0.0
    rotation = o3.random_rotation(rng)
    d = o3.wigner_d_blocks(rotation, table.l_max)
    for l1 in range(o3.L_MAX + 1):
        for l2 in range(o3.L_MAX + 1):
            for l in table.paths(l1, l2):
                c = table.block(l1, l2, l)
                left = np.einsum("abm,ai,bj->ijm", c, d[l1], d[l2])
                right = np.einsum("mk,ijk->ijm", d[l], c)
                worst = max(worst, float(np.max(np.abs(left - right))))
    report.add("cg equivariance", worst, 1e-10 * scale)

    worst = 0.0
    for _ in range(trials):
        rotation = o3.random_rotation(rng)
        l = int(rng.integers(0, o3.L_MAX + 1))
        r = rng.normal(size=3)
        r /= np.linalg.norm(r)
        rotated = o3.spherical_harmonics(l, (rotation @ r)[None])[0]
        expected = o3.wigner_d(l, rotation) @ o3.spherical_harmonics(l, r[None])[0]
        worst = max(worst, float(np.max(np.abs(rotated - expected))))
    report.add(f"rsh closure ({trials} trials)", worst, 1e-10 * scale)

    worst = 0.0
    for _ in range(20):
        r1, r2 = o3.random_rotation(rng), o3.random_rotation(rng)
        for l in range(o3.L_MAX + 1):
            composed = o3.wigner_d(l, r1 @ r2)
            worst = max(worst, float(np.max(np.abs(composed - o3.wigner_d(l, r1) @ o3.wigner_d(l, r2)))))
    report.add("wigner-d homomorphism", worst, 1e-10 * scale)
    return report


def equivariance_suite(
    scale: float = 1.0,
    seed: int = 0,
    n_molecules: int = 20,
    n_transforms: int = 5,
    settings: Optional[ModelSettings] = None,
    inject_bug: bool = False,
) -> SuiteReport:
    """Input-level and end-to-end symmetry laws of a randomly initialized model."""
    report = SuiteReport("equivariance")
    rng = np.random.default_rng(seed)
    settings = (settings or ModelSettings()).model_copy(update={"zero_init_gates": False})
    table = injected_bug_table() if inject_bug else None
    model = _random_model(settings, seed, table)
    geometries = _solvable_geometries(rng, n_molecules)

    worst = {"input rotation": 0.0, "rotation": 0.0, "parity": 0.0, "permutation": 0.0, "translation": 0.0}
    for geometry in geometries:
        tensor, _ = featurize(geometry)
        base = _rep(model, geometry)
        for _ in range(n_transforms):
            rotation = o3.random_rotation(rng)
            rotated = geometry.rotated(rotation)
            rotated_tensor, _ = featurize(rotated)
            expected_tensor = rotate_tensor(tensor, rotation)
            worst["input rotation"] = max(
                worst["input rotation"], float(np.max(np.abs(rotated_tensor.data - expected_tensor.data)))
            )
            worst["rotation"] = max(worst["rotation"], _rep_deviation(_rep(model, rotated), base.rotate(rotation)))
            sigma = rng.permutation(geometry.n_atoms)
            worst["permutation"] = max(
                worst["permutation"], _rep_deviation(_rep(model, geometry.permuted(sigma)), base.permute(sigma))
            )
            shift = rng.integers(-16, 17, size=3) / 4.0
            worst["translation"] = max(worst["translation"], _rep_deviation(_rep(model, geometry.translated(shift)), base))
        worst["parity"] = max(worst["parity"], _rep_deviation(_rep(model, geometry.inverted()), base.invert()))

    tolerances = {"input rotation": 1e-9, "rotation": 1e-8, "parity": 1e-8, "permutation": 1e-10, "translation": 1e-10}
    for case, value in worst.items():
        report.add(case, value, tolerances[case] * scale)
    return report


GRADCHECK_HEADS = ("energy", "dipole", "polarizability", "homo", "gap", "r2", "density")


def _gradcheck_head(report: SuiteReport, head: str, scale: float, seed: int, step: float,
                    entries_per_tensor: Optional[int]) -> None:
    rng = np.random.default_rng(seed)
    settings = ModelSettings.small().model_copy(update={"zero_init_gates": False})
    model = _random_model(settings, seed, head=head)
    model.train()
    batch = collate([_features(g) for g in _solvable_geometries(rng, 2, atoms=(2, 3))])
    with torch.no_grad():
        prediction = model(batch)
    target = prediction + torch.from_numpy(rng.normal(scale=0.3, size=tuple(prediction.shape)))

    def loss_value() -> torch.Tensor:
        return smooth_l1(model(batch), target)

    grads = backward(model, loss_value())
    for name, param in model.named_parameters():
        worst = 0.0
        flat = param.data.view(-1)
        if entries_per_tensor is None or entries_per_tensor >= flat.numel():
            picks = np.arange(flat.numel())
        else:
            picks = rng.choice(flat.numel(), size=entries_per_tensor, replace=False)
        for index in picks:
            original = float(flat[index])
            with torch.no_grad():
                flat[index] = original + step
                plus = float(loss_value())
                flat[index] = original - step
                minus = float(loss_value())
                flat[index] = original
            numeric = (plus - minus) / (2.0 * step)
            analytic = float(grads[name].view(-1)[index])
            worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-4))
        report.add(f"{head} {name} ({len(picks)} entries)", worst, 1e-5 * scale)


def gradcheck_suite(
    scale: float = 1.0,
    seed: int = 0,
    step: float = 1e-5,
    entries_per_tensor: Optional[int] = None,
    heads: Sequence[str] = GRADCHECK_HEADS,
) -> SuiteReport:
    """Autograd parameter gradients against central finite differences on the small model.

    Every entry of every parameter tensor is perturbed unless ``entries_per_tensor``
    caps the count, and each head kind in ``heads`` is checked on its own model.
    """
    report = SuiteReport("gradcheck")
    for head in heads:
        _gradcheck_head(report, head, scale, seed, step, entries_per_tensor)
    return report


def far_dimer(geometry: Geometry, shift: float = FAR_SHIFT) -> Geometry:
    return geometry.combined(geometry, (shift, 0.0, 0.0))


def extensivity_suite(scale: float = 1.0, seed: int = 0, n_molecules: int = 5,
                      settings: Optional[ModelSettings] = None) -> SuiteReport:
    """Extensive heads double and intensive heads stay put under far-separated duplication."""
    report = SuiteReport("extensivity")
    rng = np.random.default_rng(seed)
    settings = (settings or ModelSettings.small()).model_copy(update={"zero_init_gates": False})
    geometries = _solvable_geometries(rng, n_molecules, atoms=(2, 5))
    for head, factor, tol in (("energy", 2.0, 1e-8), ("polarizability", 2.0, 1e-8), ("homo", 1.0, 1e-8)):
        model = _random_model(settings, seed, head=head)
        worst = 0.0
        for geometry in geometries:
            with torch.no_grad():
                single = float(model(collate([_features(geometry)]))[0])
                double = float(model(collate([_features(far_dimer(geometry))]))[0])
            worst = max(worst, abs(double - factor * single))
        report.add(f"{head} duplication", worst, tol * scale)
    return report


def hydrogen_chain(units: int, bond: float = 1.4, spacing: float = 4.0) -> Geometry:
    coords = []
    for k in range(units):
        coords.append([k * spacing, 0.0, 0.0])
        coords.append([k * spacing + bond, 0.0, 0.0])
    return Geometry((1,) * (2 * units), np.array(coords))


def scaling_suite(scale: float = 1.0, seed: int = 0, units: Sequence[int] = CHAIN_UNITS,
                  repeats: int = 3, settings: Optional[ModelSettings] = None) -> SuiteReport:
    """Forward wall time on hydrogen chains; the fitted power-law exponent must stay below 1.7."""
    report = SuiteReport("scaling")
    model = _random_model(settings or ModelSettings.small(), seed)
    atoms, seconds = [], []
    for n in units:
        batch = collate([_features(hydrogen_chain(n))])
        timings = []
        for _ in range(repeats):
            start = time.perf_counter()
            with torch.no_grad():
                model(batch)
            timings.append(time.perf_counter() - start)
        atoms.append(batch.n_atoms)
        seconds.append(float(np.median(timings)))
        report.table.append({"units": n, "atoms": batch.n_atoms, "pairs": batch.n_pairs, "seconds": seconds[-1]})
    exponent = float(np.polyfit(np.log(atoms), np.log(seconds), 1)[0])
    report.add("power-law exponent", exponent, SCALING_EXPONENT)
    return report


SUITE_RUNNERS: Dict[str, Callable[..., SuiteReport]] = {
    "cg": cg_suite,
    "equivariance": equivariance_suite,
    "gradcheck": gradcheck_suite,
    "extensivity": extensivity_suite,
    "scaling": scaling_suite,
}


def run_suite(name: str, scale: float = 1.0, seed: int = 0, **options) -> SuiteReport:
    """Run one named suite.

    Raises:
        UnknownSuiteError: If ``name`` is not a known suite.
    """
    runner = SUITE_RUNNERS.get(name)
    if runner is None:
        raise UnknownSuiteError(f"unknown check suite {name!r}; expected one of {', '.join(SUITES)}")
    logger.info(f"Running check suite {name}")
    report = runner(scale=scale, seed=seed, **options)
    logger.info(f"Suite {name}: {'passed' if report.passed else 'FAILED'}")
    return report
