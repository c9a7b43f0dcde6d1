"""Collation of featurized molecules into one padded, disjoint-union batch.

Every atom's AO block is padded to the largest per-element AO count so that
diagonal blocks, pair blocks and gather maps have fixed trailing shapes. Only
atom pairs with a non-zero block in some channel become edges.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch

from unite import o3
from unite.basis import (
    AO_L_MAX,
    NBodyTensor,
    element_index,
    element_spec,
    max_atom_aos,
    max_atom_shells,
    max_shells_per_degree,
)
from unite.errors import DomainError
from unite.featurizer import Geometry

logger = logging.getLogger(__name__)

LOG_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class ElementLayout:
    """Index maps between an element's padded AO vector and the matching feature vector.

    The feature vector concatenates, for l = 0..2, an (M_l, 2l+1) block; one
    trailing slot is the zero sentinel padded AOs gather from.
    """

    ao_to_feature: np.ndarray
    feature_to_ao: Dict[int, np.ndarray]
    shell_membership: np.ndarray


@lru_cache(maxsize=None)
def feature_offsets() -> Tuple[Dict[int, int], int]:
    m_l = max_shells_per_degree()
    offsets, total = {}, 0
    for l in range(AO_L_MAX + 1):
        offsets[l] = total
        total += m_l[l] * (2 * l + 1)
    return offsets, total


@lru_cache(maxsize=None)
def element_layout(z: int) -> ElementLayout:
    n_pad, s_pad = max_atom_aos(), max_atom_shells()
    offsets, sentinel = feature_offsets()
    m_l = max_shells_per_degree()
    ao_to_feature = np.full(n_pad, sentinel, dtype=np.int64)
    feature_to_ao = {l: np.full((m_l[l], 2 * l + 1), n_pad, dtype=np.int64) for l in range(AO_L_MAX + 1)}
    membership = np.zeros((s_pad, n_pad))
    start = 0
    for k, shell in enumerate(element_spec(z).shells):
        for m in range(shell.size):
            feature = offsets[shell.l] + (shell.n - 1) * shell.size + m
            ao_to_feature[start + m] = feature
            feature_to_ao[shell.l][shell.n - 1, m] = start + m
        membership[k, start:start + shell.size] = 1.0
        start += shell.size
    return ElementLayout(ao_to_feature, feature_to_ao, membership)


@dataclass(frozen=True)
class MoleculeFeatures:
    """One featurized molecule ready for collation."""

    tensor: NBodyTensor
    geometry: Geometry
    e_tb: float = 0.0


@dataclass
class GraphBatch:
    """Disjoint union of molecules as padded torch tensors (float64).

    Attributes:
        elements: (A,) row of each atom in per-element tables.
        positions: (A, 3) coordinates in Bohr.
        mol_index: (A,) molecule of each atom.
        diag_blocks: (A, C, P, P) on-site blocks.
        pair_src, pair_dst: (E,) edge endpoints; messages flow src -> dst.
        pair_blocks: (E, C, P, P) block T_{src, dst}.
        pair_log_norms: (E, C, S, S) log Frobenius norms of shell-pair sub-blocks.
        pair_shell_mask: (E, S, S) which shell pairs exist.
        pair_harmonics: degree -> (E, 2l+1) Y_l of the unit vector dst -> src.
        ao_to_feature: (A, P) gather index into the matching feature vector.
        feature_to_ao: degree -> (A, M_l, 2l+1) gather index into the padded AO vector.
        e_tb: (n_mols,) toy tight-binding energies.
    """

    elements: torch.Tensor
    positions: torch.Tensor
    mol_index: torch.Tensor
    n_mols: int
    diag_blocks: torch.Tensor
    pair_src: torch.Tensor
    pair_dst: torch.Tensor
    pair_blocks: torch.Tensor
    pair_log_norms: torch.Tensor
    pair_shell_mask: torch.Tensor
    pair_harmonics: Dict[int, torch.Tensor]
    ao_to_feature: torch.Tensor
    feature_to_ao: Dict[int, torch.Tensor]
    e_tb: torch.Tensor
    atomic_numbers: Tuple[int, ...]

    @property
    def n_atoms(self) -> int:
        return int(self.elements.shape[0])

    @property
    def n_pairs(self) -> int:
        return int(self.pair_src.shape[0])

    @property
    def n_channels(self) -> int:
        return int(self.diag_blocks.shape[1])

    def atoms_per_molecule(self) -> torch.Tensor:
        return torch.bincount(self.mol_index, minlength=self.n_mols)


def _nonzero_pairs(tensor: NBodyTensor) -> Tuple[np.ndarray, np.ndarray]:
    basis = tensor.basis
    if basis.n_atoms < 2:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    magnitude = np.abs(tensor.data).sum(axis=0)
    starts = basis.offsets[:-1]
    per_atom = np.add.reduceat(np.add.reduceat(magnitude, starts, axis=0), starts, axis=1)
    np.fill_diagonal(per_atom, 0.0)
    src, dst = np.nonzero(per_atom > 0.0)
    return src.astype(np.int64), dst.astype(np.int64)


def _padded_block(tensor: NBodyTensor, a: int, b: int, n_pad: int) -> np.ndarray:
    basis = tensor.basis
    sa, sb = basis.atom_slice(a), basis.atom_slice(b)
    out = np.zeros((tensor.n_channels, n_pad, n_pad))
    out[:, : sa.stop - sa.start, : sb.stop - sb.start] = tensor.data[:, sa, sb]
    return out


def collate(molecules: Sequence[MoleculeFeatures]) -> GraphBatch:
    """Build a GraphBatch from featurized molecules; all must share one channel set.

    Raises:
        DomainError: On mismatched channels, an empty batch or coincident atoms.
    """
    if not molecules:
        raise DomainError("cannot collate an empty batch")
    channels = molecules[0].tensor.channels
    n_pad = max_atom_aos()
    numbers: List[int] = []
    elements, positions, mol_index, diag = [], [], [], []
    src_all, dst_all, blocks = [], [], []
    atom_offset = 0
    for k, mol in enumerate(molecules):
        if mol.tensor.channels != channels:
            raise DomainError(f"molecule {k} has channels {mol.tensor.channels}, expected {channels}")
        if tuple(mol.tensor.basis.atomic_numbers) != tuple(mol.geometry.atomic_numbers):
            raise DomainError(f"molecule {k}: tensor basis and geometry disagree on atoms")
        n = mol.geometry.n_atoms
        numbers.extend(mol.geometry.atomic_numbers)
        elements.extend(element_index(z) for z in mol.geometry.atomic_numbers)
        positions.append(mol.geometry.coords)
        mol_index.extend([k] * n)
        diag.extend(_padded_block(mol.tensor, a, a, n_pad) for a in range(n))
        src, dst = _nonzero_pairs(mol.tensor)
        blocks.extend(_padded_block(mol.tensor, s, d, n_pad) for s, d in zip(src, dst))
        src_all.append(src + atom_offset)
        dst_all.append(dst + atom_offset)
        atom_offset += n

    positions = np.concatenate(positions) if positions else np.zeros((0, 3))
    src = np.concatenate(src_all)
    dst = np.concatenate(dst_all)
    n_channels = len(channels)
    pair_blocks = np.array(blocks).reshape(-1, n_channels, n_pad, n_pad)

    layouts = [element_layout(z) for z in numbers]
    membership = np.array([lay.shell_membership for lay in layouts])
    shells_src, shells_dst = membership[src], membership[dst]
    norms = np.sqrt(np.einsum("esp,ecpq,etq->ecst", shells_src, pair_blocks ** 2, shells_dst))
    log_norms = np.log(np.maximum(norms, LOG_NORM_FLOOR))
    exists_src, exists_dst = shells_src.any(axis=2), shells_dst.any(axis=2)
    shell_mask = exists_src[:, :, None] & exists_dst[:, None, :]

    vectors = positions[src] - positions[dst]
    if len(vectors) and np.any(np.linalg.norm(vectors, axis=1) == 0.0):
        raise DomainError("coincident atoms: inter-atomic direction undefined")
    harmonics = {
        l: torch.from_numpy(o3.spherical_harmonics(l, vectors) if len(vectors) else np.zeros((0, 2 * l + 1)))
        for l in range(AO_L_MAX + 1)
    }

    ao_to_feature = np.array([lay.ao_to_feature for lay in layouts])
    feature_to_ao = {l: torch.from_numpy(np.array([lay.feature_to_ao[l] for lay in layouts])) for l in range(AO_L_MAX + 1)}

    logger.debug(f"Collated {len(molecules)} molecules: {len(numbers)} atoms, {len(src)} pairs")
    return GraphBatch(
        elements=torch.tensor(elements, dtype=torch.long),
        positions=torch.from_numpy(np.array(positions, dtype=np.float64)),
        mol_index=torch.tensor(mol_index, dtype=torch.long),
        n_mols=len(molecules),
        diag_blocks=torch.from_numpy(np.array(diag).reshape(-1, n_channels, n_pad, n_pad)),
        pair_src=torch.from_numpy(src),
        pair_dst=torch.from_numpy(dst),
        pair_blocks=torch.from_numpy(pair_blocks),
        pair_log_norms=torch.from_numpy(log_norms),
        pair_shell_mask=torch.from_numpy(shell_mask),
        pair_harmonics=harmonics,
        ao_to_feature=torch.from_numpy(ao_to_feature),
        feature_to_ao=feature_to_ao,
        e_tb=torch.tensor([float(m.e_tb) for m in molecules], dtype=torch.float64),
        atomic_numbers=tuple(numbers),
    )
