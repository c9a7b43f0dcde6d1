"""Readout heads mapping final representations to molecular properties."""
import logging
import math
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn as nn

from unite.basis import ELEMENTS
from unite.errors import DomainError, MissingParameterError
from unite.featurizer import AuxBasisSpec
from unite.graph import GraphBatch
from unite.layers import EquivariantRep, IrrepKey

logger = logging.getLogger(__name__)

CENTROID_TOL = 1e-8

# l = 1 components are stored as (y, z, x); this reorders them to (x, y, z).
YZX_TO_XYZ = [2, 0, 1]


def molecule_sum(values: torch.Tensor, batch: GraphBatch) -> torch.Tensor:
    """Sum per-atom values (A, ...) into per-molecule values (M, ...)."""
    out = torch.zeros((batch.n_mols,) + tuple(values.shape[1:]), dtype=values.dtype)
    return out.index_add(0, batch.mol_index, values)


def _linear(n_in: int, n_out: int = 1) -> nn.Linear:
    layer = nn.Linear(n_in, n_out, bias=False, dtype=torch.float64)
    nn.init.normal_(layer.weight, std=1.0 / math.sqrt(n_in))
    return layer


class ElementBias(nn.Module):
    """Per-element offsets b_z with a record of which elements have a fitted value."""

    def __init__(self, name: str):
        super().__init__()
        self.name = name
        self.bias = nn.Parameter(torch.zeros(len(ELEMENTS), dtype=torch.float64))
        self.register_buffer("known", torch.ones(len(ELEMENTS), dtype=torch.bool))

    def forward(self, batch: GraphBatch) -> torch.Tensor:
        missing = ~self.known[batch.elements]
        if torch.any(missing):
            atom = int(torch.nonzero(missing)[0, 0])
            raise MissingParameterError(self.name, batch.atomic_numbers[atom])
        return self.bias[batch.elements]

    def fit(self, counts: np.ndarray, targets: np.ndarray) -> None:
        """Least-squares fit of targets on element counts (M, n_elements); unseen elements become unknown."""
        seen = counts.sum(axis=0) > 0
        solution = np.zeros(len(ELEMENTS))
        if seen.any():
            solution[seen], *_ = np.linalg.lstsq(counts[:, seen], targets, rcond=None)
        with torch.no_grad():
            self.bias.copy_(torch.from_numpy(solution))
            self.known.copy_(torch.from_numpy(seen))
        logger.info(f"Fitted {self.name} for elements {[ELEMENTS[i] for i in np.flatnonzero(seen)]}")

    def fill(self, value: float, seen: np.ndarray) -> None:
        with torch.no_grad():
            self.bias.fill_(float(value))
            self.known.copy_(torch.from_numpy(np.asarray(seen, dtype=bool)))


class Head(nn.Module):
    """Common interface: forward(h, batch) -> per-molecule tensor."""

    extensive = True

    def __init__(self, channels: Dict[IrrepKey, int], eps: float = 0.1):
        super().__init__()
        self.channels = dict(channels)
        self.total = sum(self.channels.values())
        self.eps = eps

    def initialize_bias(self, counts: np.ndarray, targets: np.ndarray) -> None:
        """Seed per-element biases from training labels; heads without biases ignore it."""

    def zero_init(self) -> None:
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()


class EnergyHead(Head):
    """y = sum_A W_o |h_A| + b_{z_A}."""

    def __init__(self, channels: Dict[IrrepKey, int], eps: float = 0.1):
        super().__init__(channels, eps)
        self.w_o = _linear(self.total)
        self.bias = ElementBias("energy bias")

    def atom_energies(self, h: EquivariantRep, batch: GraphBatch) -> torch.Tensor:
        return self.w_o(h.norms(self.eps)).squeeze(-1) + self.bias(batch)

    def forward(self, h: EquivariantRep, batch: GraphBatch) -> torch.Tensor:
        return molecule_sum(self.atom_energies(h, batch), batch)

    def initialize_bias(self, counts: np.ndarray, targets: np.ndarray) -> None:
        self.bias.fit(counts, targets)


def _compensate(values: torch.Tensor, batch: GraphBatch) -> torch.Tensor:
    """Subtract each molecule's mean so per-molecule sums vanish."""
    counts = batch.atoms_per_molecule().to(values.dtype)
    mean = molecule_sum(values, batch) / counts.reshape((-1,) + (1,) * (values.dim() - 1))
    return values - mean[batch.mol_index]


class DipoleHead(Head):
    """Charge-compensated atomic charges plus atomic dipoles."""

    def __init__(self, channels: Dict[IrrepKey, int], eps: float = 0.1):
        super().__init__(channels, eps)
        self.w_charge = _linear(self.channels[(0, 1)])
        self.w_dipole = _linear(self.channels[(1, 1)])
        self.bias = ElementBias("charge bias")

    def charges(self, h: EquivariantRep, batch: GraphBatch) -> torch.Tensor:
        raw = self.w_charge(h[(0, 1)][:, :, 0]).squeeze(-1) + self.bias(batch)
        return _compensate(raw, batch)

    def atomic_dipoles(self, h: EquivariantRep) -> torch.Tensor:
        return torch.einsum("n,anx->ax", self.w_dipole.weight[0], h[(1, 1)])[:, YZX_TO_XYZ]

    def forward(self, h: EquivariantRep, batch: GraphBatch) -> torch.Tensor:
        q = self.charges(h, batch)
        return molecule_sum(batch.positions * q.unsqueeze(-1) + self.atomic_dipoles(h), batch)


class PolarizabilityHead(Head):
    """Isotropic polarizability sum_A (alpha_A + x_A . p_A) with compensated p."""

    def __init__(self, channels: Dict[IrrepKey, int], eps: float = 0.1):
        super().__init__(channels, eps)
        self.w_alpha = _linear(self.channels[(0, 1)])
        self.w_vector = _linear(self.channels[(1, 1)])
        self.bias = ElementBias("polarizability bias")

    def vectors(self, h: EquivariantRep, batch: GraphBatch) -> torch.Tensor:
        raw = torch.einsum("n,anx->ax", self.w_vector.weight[0], h[(1, 1)])[:, YZX_TO_XYZ]
        return _compensate(raw, batch)

    def forward(self, h: EquivariantRep, batch: GraphBatch) -> torch.Tensor:
        alpha = self.w_alpha(h[(0, 1)][:, :, 0]).squeeze(-1) + self.bias(batch)
        p = self.vectors(h, batch)
        return molecule_sum(alpha + (batch.positions * p).sum(dim=-1), batch)

    def initialize_bias(self, counts: np.ndarray, targets: np.ndarray) -> None:
        self.bias.fit(counts, targets)


class MOHead(Head):
    """Attention-pooled intensive property (orbital energies).

    ``attention_kind="exponential"`` normalizes exp(W_a |h_A|) per molecule;
    ``"linear"`` divides W_a |h_A| by its molecular sum.
    """

    extensive = False

    def __init__(self, channels: Dict[IrrepKey, int], eps: float = 0.1, attention_kind: str = "exponential"):
        super().__init__(channels, eps)
        if attention_kind not in ("linear", "exponential"):
            raise ValueError(f"unknown attention kind {attention_kind!r}")
        self.attention_kind = attention_kind
        self.w_attention = _linear(self.total)
        self.w_o = _linear(self.total)
        self.bias = ElementBias("orbital bias")

    def attention(self, norms: torch.Tensor, batch: GraphBatch) -> torch.Tensor:
        scores = self.w_attention(norms).squeeze(-1)
        if self.attention_kind == "exponential":
            peak = torch.full((batch.n_mols,), -math.inf, dtype=scores.dtype)
            peak = peak.scatter_reduce(0, batch.mol_index, scores.detach(), reduce="amax")
            weights = torch.exp(scores - peak[batch.mol_index])
        else:
            weights = scores
        total = molecule_sum(weights, batch)
        if self.attention_kind == "linear" and torch.any(total <= 0):
            raise DomainError("linear attention normalizer is not positive")
        return weights / total[batch.mol_index]

    def forward(self, h: EquivariantRep, batch: GraphBatch) -> torch.Tensor:
        norms = h.norms(self.eps)
        values = self.w_o(norms).squeeze(-1) + self.bias(batch)
        return molecule_sum(self.attention(norms, batch) * values, batch)

    def initialize_bias(self, counts: np.ndarray, targets: np.ndarray) -> None:
        self.bias.fill(float(np.mean(targets)), counts.sum(axis=0) > 0)


class GapHead(Head):
    """Predicted LUMO minus predicted HOMO from two attention pools."""

    extensive = False

    def __init__(self, channels: Dict[IrrepKey, int], eps: float = 0.1, attention_kind: str = "exponential"):
        super().__init__(channels, eps)
        self.homo = MOHead(channels, eps, attention_kind)
        self.lumo = MOHead(channels, eps, attention_kind)

    def forward(self, h: EquivariantRep, batch: GraphBatch) -> torch.Tensor:
        return self.lumo(h, batch) - self.homo(h, batch)

    def initialize_bias(self, counts: np.ndarray, targets: np.ndarray) -> None:
        seen = counts.sum(axis=0) > 0
        self.homo.bias.fill(0.0, seen)
        self.lumo.bias.fill(float(np.mean(targets)), seen)


class R2Head(Head):
    """Electronic spatial extent about the charge-weighted centroid."""

    def __init__(self, channels: Dict[IrrepKey, int], eps: float = 0.1):
        super().__init__(channels, eps)
        self.w_charge = _linear(self.channels[(0, 1)])
        self.w_dipole = _linear(self.channels[(1, 1)])
        self.w_spread = _linear(self.channels[(0, 1)])
        self.charge_bias = ElementBias("r2 charge bias")
        self.spread_bias = ElementBias("r2 spread bias")

    def forward(self, h: EquivariantRep, batch: GraphBatch) -> torch.Tensor:
        scalars = h[(0, 1)][:, :, 0]
        q = self.w_charge(scalars).squeeze(-1) + self.charge_bias(batch)
        mu = torch.einsum("n,anx->ax", self.w_dipole.weight[0], h[(1, 1)])[:, YZX_TO_XYZ]
        spread = self.w_spread(scalars).squeeze(-1) + self.spread_bias(batch)
        total = molecule_sum(q, batch)
        if torch.any(total.abs() < CENTROID_TOL):
            raise DomainError("total r2 charge is too close to zero to define a centroid")
        centroid = molecule_sum(batch.positions * q.unsqueeze(-1) + mu, batch) / total.unsqueeze(-1)
        offset = batch.positions - centroid[batch.mol_index]
        return molecule_sum((offset * offset).sum(dim=-1) * q + spread, batch)

    def initialize_bias(self, counts: np.ndarray, targets: np.ndarray) -> None:
        seen = counts.sum(axis=0) > 0
        self.charge_bias.fill(1.0, seen)
        self.spread_bias.fit(counts, targets)


class DensityHead(Head):
    """Per-atom density-fitting coefficients d_A = W^d_{z_A, l} h_{A, l, +1}, shape (A, n_aux_functions)."""

    def __init__(self, channels: Dict[IrrepKey, int], eps: float = 0.1, aux: Optional[AuxBasisSpec] = None):
        super().__init__(channels, eps)
        self.aux = aux or AuxBasisSpec()
        self.degrees = sorted(self.aux.exponents)
        self.weights = nn.ParameterDict({
            str(l): nn.Parameter(
                torch.randn(len(ELEMENTS), self.aux.count(l), self.channels[(l, 1)], dtype=torch.float64)
                / math.sqrt(self.channels[(l, 1)])
            )
            for l in self.degrees
        })
        self.register_buffer("known", torch.ones(len(ELEMENTS), dtype=torch.bool))

    def forward(self, h: EquivariantRep, batch: GraphBatch) -> torch.Tensor:
        missing = ~self.known[batch.elements]
        if torch.any(missing):
            raise MissingParameterError("density weights", batch.atomic_numbers[int(torch.nonzero(missing)[0, 0])])
        parts = []
        for l in self.degrees:
            coeffs = torch.einsum("akn,anx->akx", self.weights[str(l)][batch.elements], h[(l, 1)])
            parts.append(coeffs.reshape(batch.n_atoms, -1))
        return torch.cat(parts, dim=1)

    def initialize_bias(self, counts: np.ndarray, targets: np.ndarray) -> None:
        with torch.no_grad():
            self.known.copy_(torch.from_numpy(counts.sum(axis=0) > 0))


def build_head(kind: str, channels: Dict[IrrepKey, int], eps: float = 0.1, attention_kind: str = "exponential") -> Head:
    if kind == "energy":
        return EnergyHead(channels, eps)
    if kind == "dipole":
        return DipoleHead(channels, eps)
    if kind == "polarizability":
        return PolarizabilityHead(channels, eps)
    if kind in ("homo", "lumo"):
        return MOHead(channels, eps, attention_kind)
    if kind == "gap":
        return GapHead(channels, eps, attention_kind)
    if kind == "r2":
        return R2Head(channels, eps)
    if kind == "density":
        return DensityHead(channels, eps)
    raise DomainError(f"unknown head kind {kind!r}")
