"""Losses, Adam, learning-rate schedules, finite-difference forces and the training loop."""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse
import torch
import torch.nn as nn
import torch.nn.functional as F

from unite.basis import ELEMENTS, element_index
from unite.density import density_overlap_matrix
from unite.errors import DomainError, TrainingError
from unite.featurizer import Geometry, featurize
from unite.graph import GraphBatch, MoleculeFeatures, collate
from unite.model import UniteModel
from unite.settings import FeaturizerSettings, OptimizerConfig, RunSettings, TrainingSettings

logger = logging.getLogger(__name__)

# (offset in steps, weight) of the 5-point first-derivative stencil, denominator 12 h.
STENCIL: Tuple[Tuple[int, float], ...] = ((-2, 1.0), (-1, -8.0), (1, 8.0), (2, -1.0))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def smooth_l1(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean Huber loss with the transition at 1."""
    return F.smooth_l1_loss(pred, target, reduction="mean", beta=1.0)


def to_torch_overlap(matrix) -> torch.Tensor:
    """Dense array or scipy sparse matrix -> float64 torch tensor (sparse COO when given sparse)."""
    if scipy.sparse.issparse(matrix):
        coo = matrix.tocoo()
        indices = torch.from_numpy(np.vstack([coo.row, coo.col]).astype(np.int64))
        values = torch.from_numpy(coo.data.astype(np.float64))
        return torch.sparse_coo_tensor(indices, values, coo.shape).coalesce()
    return torch.as_tensor(np.asarray(matrix), dtype=torch.float64)


def check_overlap(s_rho: torch.Tensor) -> None:
    """Raise DomainError unless ``s_rho`` is symmetric positive definite."""
    dense = s_rho.to_dense() if s_rho.is_sparse else s_rho
    if dense.dim() != 2 or dense.shape[0] != dense.shape[1]:
        raise DomainError(f"density overlap must be square, got shape {tuple(dense.shape)}")
    if not torch.allclose(dense, dense.T, rtol=0.0, atol=1e-12):
        raise DomainError("density overlap is not symmetric")
    _, info = torch.linalg.cholesky_ex(dense)
    if int(info) != 0:
        raise DomainError("density overlap is not positive definite")


def density_loss(d: torch.Tensor, d_hat: torch.Tensor, s_rho: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Analytic L2 density error (d - d_hat)^T S^rho (d - d_hat); S^rho may be sparse COO.

    Raises:
        DomainError: If ``check`` is set and S^rho is not symmetric positive definite.
    """
    if check:
        check_overlap(s_rho)
    diff = (d - d_hat).reshape(-1)
    if s_rho.is_sparse:
        projected = torch.sparse.mm(s_rho, diff.unsqueeze(1)).squeeze(1)
    else:
        projected = s_rho @ diff
    return diff @ projected


def pair_partners(molecule_ids: Sequence[str], rng: np.random.Generator) -> np.ndarray:
    """For each entry, a uniformly drawn index sharing its molecule id (itself included)."""
    groups: Dict[str, List[int]] = {}
    for i, key in enumerate(molecule_ids):
        groups.setdefault(key, []).append(i)
    return np.array([rng.choice(groups[key]) for key in molecule_ids], dtype=np.int64)


def geometry_pair_loss(
    energies: torch.Tensor,
    predictions: torch.Tensor,
    molecule_ids: Sequence[str],
    rng: np.random.Generator,
    c_g: float = 10.0,
) -> torch.Tensor:
    """L(E, E_pred) + c_g L(dE, dE_pred) with differences over randomly paired conformers."""
    partners = torch.from_numpy(pair_partners(molecule_ids, rng))
    delta_true = energies - energies[partners]
    delta_pred = predictions - predictions[partners]
    return smooth_l1(predictions, energies) + c_g * smooth_l1(delta_pred, delta_true)


def energy_force_loss(
    energies: torch.Tensor,
    predictions: torch.Tensor,
    forces: torch.Tensor,
    predicted_forces: torch.Tensor,
    c_e: float = 1.0,
    c_f: float = 1000.0,
) -> torch.Tensor:
    return c_e * smooth_l1(predictions, energies) + c_f * smooth_l1(predicted_forces, forces)


# ---------------------------------------------------------------------------
# Gradients and optimizer
# ---------------------------------------------------------------------------

def backward(model: nn.Module, loss: torch.Tensor) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss`` for every named parameter.

    Raises:
        TrainingError: If any gradient is non-finite; names the parameter.
    """
    model.zero_grad(set_to_none=True)
    loss.backward()
    grads = {}
    for name, param in model.named_parameters():
        grad = param.grad if param.grad is not None else torch.zeros_like(param)
        if not torch.all(torch.isfinite(grad)):
            raise TrainingError("non-finite gradient", parameter=name)
        grads[name] = grad.detach().clone()
    return grads


@dataclass
class AdamState:
    step: int = 0
    first: Dict[str, torch.Tensor] = field(default_factory=dict)
    second: Dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(
    params: Dict[str, torch.Tensor],
    grads: Dict[str, torch.Tensor],
    state: AdamState,
    config: OptimizerConfig,
    lr: float,
) -> AdamState:
    """One bias-corrected Adam update applied in place to ``params``."""
    state.step += 1
    correction1 = 1.0 - config.beta1 ** state.step
    correction2 = 1.0 - config.beta2 ** state.step
    with torch.no_grad():
        for name, param in params.items():
            grad = grads[name]
            m = state.first.setdefault(name, torch.zeros_like(param))
            v = state.second.setdefault(name, torch.zeros_like(param))
            m.mul_(config.beta1).add_((1.0 - config.beta1) * grad)
            v.mul_(config.beta2).add_((1.0 - config.beta2) * grad * grad)
            m_hat = m / correction1
            v_hat = v / correction2
            param.sub_(lr * m_hat / (torch.sqrt(v_hat) + config.eps))
    return state


def warmup_cosine_lr(epoch: int, total_epochs: int, warmup_epochs: int, max_lr: float) -> float:
    """Linear warmup to ``max_lr`` then cosine annealing reaching 0 at the last epoch."""
    if epoch < warmup_epochs:
        return max_lr * (epoch + 1) / warmup_epochs
    span = max(1, total_epochs - 1 - warmup_epochs)
    progress = min(1.0, (epoch - warmup_epochs) / span)
    return 0.5 * max_lr * (1.0 + math.cos(math.pi * progress))


def step_decay_lr(epoch: int, total_epochs: int, max_lr: float, factor: float = 0.5, fraction: float = 0.2) -> float:
    interval = max(1, int(round(fraction * total_epochs)))
    return max_lr * factor ** (epoch // interval)


def learning_rate(epoch: int, settings: TrainingSettings) -> float:
    opt = settings.optimizer
    if opt.schedule == "step_decay":
        return step_decay_lr(epoch, settings.epochs, opt.max_lr, opt.decay_factor, opt.decay_fraction)
    return warmup_cosine_lr(epoch, settings.epochs, opt.warmup_epochs, opt.max_lr)


# ---------------------------------------------------------------------------
# Finite-difference forces
# ---------------------------------------------------------------------------

def stencil_geometries(geometry: Geometry, step: float = 0.01) -> List[Geometry]:
    """Displaced geometries ordered by atom, axis, stencil point."""
    return [
        geometry.displaced(atom, axis, k * step)
        for atom in range(geometry.n_atoms)
        for axis in range(3)
        for k, _ in STENCIL
    ]


def stencil_features(
    geometry: Geometry, settings: Optional[FeaturizerSettings] = None, step: float = 0.01
) -> List[MoleculeFeatures]:
    """Featurize every stencil geometry; FeaturizationError propagates from any point."""
    out = []
    for displaced in stencil_geometries(geometry, step):
        tensor, state = featurize(displaced, settings)
        out.append(MoleculeFeatures(tensor, displaced, state.e_tb))
    return out


def forces_from_energies(energies: torch.Tensor, n_atoms: int, step: float) -> torch.Tensor:
    """-dE/dx from stencil energies laid out as ``stencil_geometries`` orders them."""
    weights = torch.tensor([w for _, w in STENCIL], dtype=energies.dtype)
    gradient = (energies.reshape(n_atoms, 3, len(STENCIL)) * weights).sum(dim=-1) / (12.0 * step)
    return -gradient


def model_forces(model: UniteModel, stencils: Sequence[Sequence[MoleculeFeatures]], step: float) -> List[torch.Tensor]:
    """Differentiable stencil forces for several molecules from one collated forward pass."""
    flat = [features for stencil in stencils for features in stencil]
    energies = model(collate(flat))
    out, start = [], 0
    for stencil in stencils:
        n = len(stencil)
        out.append(forces_from_energies(energies[start:start + n], n // (3 * len(STENCIL)), step))
        start += n
    return out


def fd_forces(
    model: UniteModel,
    geometry: Geometry,
    settings: Optional[FeaturizerSettings] = None,
    step: float = 0.01,
    features: Optional[Sequence[MoleculeFeatures]] = None,
) -> np.ndarray:
    """Forces (n_atoms, 3) in Hartree/Bohr of the frozen model by the 5-point stencil.

    The energy includes E_TB whenever the model was built for delta learning.
    """
    features = features if features is not None else stencil_features(geometry, settings, step)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            forces = model_forces(model, [features], step)[0]
    finally:
        model.train(was_training)
    return forces.numpy()


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    """One featurized training record with its label."""

    features: MoleculeFeatures
    target: np.ndarray
    molecule_id: str = ""
    forces: Optional[np.ndarray] = None
    stencil: Optional[List[MoleculeFeatures]] = None
    density_overlap: Optional[torch.Tensor] = None
    line: Optional[int] = None

    @property
    def n_atoms(self) -> int:
        return self.features.geometry.n_atoms


def make_sample(
    geometry: Geometry,
    target,
    settings: RunSettings,
    molecule_id: str = "",
    forces=None,
    line: Optional[int] = None,
) -> Sample:
    """Featurize ``geometry`` plus whatever the configured loss needs (stencil features, S^rho)."""
    tensor, state = featurize(geometry, settings.featurizer)
    sample = Sample(
        features=MoleculeFeatures(tensor, geometry, state.e_tb),
        target=np.asarray(target, dtype=np.float64),
        molecule_id=molecule_id or f"record-{line}",
        forces=None if forces is None else np.asarray(forces, dtype=np.float64),
        line=line,
    )
    loss_kind = settings.training.loss.kind
    if loss_kind == "energy_force":
        sample.stencil = stencil_features(geometry, settings.featurizer, settings.training.force_step)
    if loss_kind == "density":
        overlap = to_torch_overlap(density_overlap_matrix(geometry, sparse=True))
        try:
            check_overlap(overlap)
        except DomainError as e:
            raise DomainError(f"record {line}: {e}") from e
        sample.density_overlap = overlap
    return sample


def element_counts(samples: Sequence[Sample]) -> np.ndarray:
    counts = np.zeros((len(samples), len(ELEMENTS)))
    for i, sample in enumerate(samples):
        for z in sample.features.geometry.atomic_numbers:
            counts[i, element_index(z)] += 1
    return counts


def stack_targets(samples: Sequence[Sample], kind: str) -> torch.Tensor:
    """Per-molecule labels as (M,) or (M, 3); density labels concatenated per atom."""
    arrays = [s.target for s in samples]
    if kind == "density":
        return torch.from_numpy(np.concatenate([a.reshape(s.n_atoms, -1) for a, s in zip(arrays, samples)]))
    if kind == "dipole":
        return torch.from_numpy(np.array(arrays).reshape(-1, 3))
    return torch.from_numpy(np.array(arrays, dtype=np.float64).reshape(-1))


def split_predictions(prediction: torch.Tensor, batch: GraphBatch, kind: str) -> List[np.ndarray]:
    values = prediction.detach().numpy()
    if kind == "density":
        sizes = batch.atoms_per_molecule().numpy()
        return np.split(values, np.cumsum(sizes)[:-1])
    return [values[i] for i in range(batch.n_mols)]


def predict_features(
    model: UniteModel, features: Sequence[MoleculeFeatures], batch_size: int = 8
) -> List[np.ndarray]:
    """Eval-mode predictions, one array per molecule, in input order."""
    kind = model.head_settings.kind
    was_training = model.training
    model.eval()
    out: List[np.ndarray] = []
    try:
        with torch.no_grad():
            for start in range(0, len(features), batch_size):
                batch = collate(features[start:start + batch_size])
                out.extend(split_predictions(model(batch), batch, kind))
    finally:
        model.train(was_training)
    return out


def mean_absolute_error(predictions: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> float:
    if not predictions:
        return float("nan")
    diff = np.concatenate([np.ravel(p) - np.ravel(t) for p, t in zip(predictions, targets)])
    return float(np.mean(np.abs(diff)))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_mae: float

    def log_line(self) -> str:
        return f"epoch={self.epoch} lr={self.lr:.6e} train_loss={self.train_loss:.10e} val_mae={self.val_mae:.10e}"


@dataclass
class TrainingResult:
    history: List[EpochRecord]
    step_losses: List[float]
    best_epoch: int
    best_val_mae: float
    train_indices: List[int]
    val_indices: List[int]


class Trainer:
    """Mini-batch Adam training of a UniteModel on prepared samples.

    ``on_improvement(model, record)`` is called whenever the validation MAE
    reaches a new minimum; the training log is appended to ``log_path``.
    """

    def __init__(
        self,
        model: UniteModel,
        settings: RunSettings,
        on_improvement: Optional[Callable[[UniteModel, EpochRecord], None]] = None,
        log_path: Optional[Path] = None,
    ):
        self.model = model
        self.settings = settings
        self.training = settings.training
        self.kind = settings.head.kind
        self.on_improvement = on_improvement
        self.log_path = Path(log_path) if log_path else None
        self.rng = np.random.default_rng(self.training.seed)
        self.adam = AdamState()

    def split(self, samples: Sequence[Sample]) -> Tuple[List[int], List[int]]:
        order = self.rng.permutation(len(samples))
        n_val = int(round(self.training.validation_fraction * len(samples)))
        n_val = min(n_val, len(samples) - 1)
        return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())

    def initialize_biases(self, samples: Sequence[Sample]) -> None:
        counts = element_counts(samples)
        if self.kind == "density":
            targets = np.zeros(len(samples))
        else:
            targets = np.array([np.ravel(s.target)[0] if s.target.size == 1 else 0.0 for s in samples])
            if self.settings.training.loss.delta_learning:
                targets = targets - np.array([s.features.e_tb for s in samples])
        self.model.head.initialize_bias(counts, targets)

    def batch_loss(self, samples: Sequence[Sample]) -> torch.Tensor:
        loss_config = self.training.loss
        batch = collate([s.features for s in samples])
        prediction = self.model(batch)
        target = stack_targets(samples, self.kind)
        if loss_config.kind == "plain":
            return smooth_l1(prediction, target)
        if loss_config.kind == "geometry_pair":
            ids = [s.molecule_id for s in samples]
            return geometry_pair_loss(target, prediction, ids, self.rng, loss_config.c_g)
        if loss_config.kind == "energy_force":
            self.model.eval()
            try:
                predicted = model_forces(self.model, [s.stencil for s in samples], self.training.force_step)
            finally:
                self.model.train()
            forces = torch.from_numpy(np.concatenate([s.forces for s in samples]))
            return energy_force_loss(
                target, prediction, forces, torch.cat(predicted), loss_config.c_e, loss_config.c_f
            )
        sizes = batch.atoms_per_molecule().tolist()
        per_mol = zip(torch.split(target, sizes), torch.split(prediction, sizes), samples)
        losses = [density_loss(d, d_hat, s.density_overlap, check=False) for d, d_hat, s in per_mol]
        return torch.stack(losses).mean()

    def validation_mae(self, samples: Sequence[Sample]) -> float:
        predictions = predict_features(self.model, [s.features for s in samples], self.training.batch_size)
        return mean_absolute_error(predictions, [s.target for s in samples])

    def fit(self, samples: Sequence[Sample]) -> TrainingResult:
        """Train for the configured number of epochs.

        Raises:
            DomainError: If there are no samples.
            TrainingError: If a gradient becomes non-finite.
        """
        if not samples:
            raise DomainError("no training samples")
        self._check_labels(samples)
        train_idx, val_idx = self.split(samples)
        train = [samples[i] for i in train_idx]
        val = [samples[i] for i in val_idx] or train
        self.initialize_biases(train)
        params = dict(self.model.named_parameters())
        history: List[EpochRecord] = []
        step_losses: List[float] = []
        best_epoch, best_mae = -1, math.inf
        logger.info(f"Training on {len(train)} samples, validating on {len(val_idx)}")

        for epoch in range(self.training.epochs):
            lr = learning_rate(epoch, self.training)
            self.model.train()
            order = self.rng.permutation(len(train))
            epoch_losses = []
            for start in range(0, len(order), self.training.batch_size):
                chunk = [train[i] for i in order[start:start + self.training.batch_size]]
                loss = self.batch_loss(chunk)
                grads = backward(self.model, loss)
                adam_step(params, grads, self.adam, self.training.optimizer, lr)
                step_losses.append(float(loss.detach()))
                epoch_losses.append(step_losses[-1])
            record = EpochRecord(epoch, lr, float(np.mean(epoch_losses)), self.validation_mae(val))
            history.append(record)
            self._log(record)
            if record.val_mae < best_mae:
                best_epoch, best_mae = epoch, record.val_mae
                if self.on_improvement is not None:
                    self.on_improvement(self.model, record)

        return TrainingResult(history, step_losses, best_epoch, best_mae, train_idx, val_idx)

    def _check_labels(self, samples: Sequence[Sample]) -> None:
        if self.training.loss.kind == "energy_force":
            for s in samples:
                if s.forces is None or s.stencil is None:
                    raise TrainingError(f"record at line {s.line} has no force labels")
        if self.training.loss.kind == "density":
            for s in samples:
                if s.density_overlap is None:
                    raise TrainingError(f"record at line {s.line} has no density overlap")

    def _log(self, record: EpochRecord) -> None:
        line = record.log_line()
        logger.info(line)
        if self.log_path is not None:
            with self.log_path.open("a") as f:
                f.write(line + "\n")
