"""Atomic-orbital basis layout and order-2 N-body tensors with their group actions."""
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

from unite import o3
from unite.errors import DomainError, MissingParameterError

logger = logging.getLogger(__name__)

AO_L_MAX = 2
SYMMETRY_TOL = 1e-12


@dataclass(frozen=True)
class ShellSpec:
    """One solid-harmonic Gaussian shell: 2l+1 contiguous AOs ordered m = -l..l.

    ``n`` counts shells of the same degree on an element (1-based) and is the
    index the matching layers gather on.
    """

    n: int
    l: int
    exponent: float
    onsite_energy: float = 0.0

    def __post_init__(self):
        if self.n < 1:
            raise DomainError(f"shell index must be positive, got {self.n}")
        if not 0 <= self.l <= AO_L_MAX:
            raise DomainError(f"shell degree must be within 0..{AO_L_MAX}, got {self.l}")
        if not self.exponent > 0.0:
            raise DomainError(f"shell exponent must be positive, got {self.exponent}")

    @property
    def size(self) -> int:
        return 2 * self.l + 1


@dataclass(frozen=True)
class ElementSpec:
    symbol: str
    shells: Tuple[ShellSpec, ...]
    z_eff: float

    @property
    def n_ao(self) -> int:
        return sum(s.size for s in self.shells)


# Toy minimal basis. Exponents, on-site energies (Hartree) and effective core
# charges are artifact constants of the tight-binding toy, not fitted values.
ELEMENT_TABLE: Dict[int, ElementSpec] = {
    1: ElementSpec("H", (ShellSpec(1, 0, 0.42, -0.50),), 1.0),
    6: ElementSpec("C", (ShellSpec(1, 0, 4.80, -11.30), ShellSpec(2, 0, 0.26, -0.71), ShellSpec(1, 1, 0.24, -0.41)), 4.0),
    7: ElementSpec("N", (ShellSpec(1, 0, 6.90, -15.60), ShellSpec(2, 0, 0.36, -0.95), ShellSpec(1, 1, 0.33, -0.50)), 5.0),
    8: ElementSpec("O", (ShellSpec(1, 0, 9.40, -20.70), ShellSpec(2, 0, 0.48, -1.24), ShellSpec(1, 1, 0.42, -0.63)), 6.0),
    9: ElementSpec("F", (ShellSpec(1, 0, 12.30, -26.40), ShellSpec(2, 0, 0.62, -1.57), ShellSpec(1, 1, 0.53, -0.73)), 7.0),
    16: ElementSpec(
        "S",
        (ShellSpec(1, 0, 8.20, -9.10), ShellSpec(2, 0, 0.52, -0.81), ShellSpec(1, 1, 0.41, -0.44), ShellSpec(1, 2, 0.36, -0.12)),
        6.0,
    ),
    17: ElementSpec(
        "Cl",
        (ShellSpec(1, 0, 9.60, -10.40), ShellSpec(2, 0, 0.61, -0.95), ShellSpec(1, 1, 0.48, -0.52), ShellSpec(1, 2, 0.42, -0.15)),
        7.0,
    ),
}

ELEMENTS: Tuple[int, ...] = tuple(sorted(ELEMENT_TABLE))
SYMBOLS: Dict[str, int] = {spec.symbol: z for z, spec in ELEMENT_TABLE.items()}


def element_spec(z: int) -> ElementSpec:
    try:
        return ELEMENT_TABLE[int(z)]
    except KeyError:
        raise MissingParameterError("element table", int(z)) from None


def element_index(z: int) -> int:
    """Row of element ``z`` in every per-element parameter table."""
    element_spec(z)
    return ELEMENTS.index(int(z))


def max_shells_per_degree() -> Dict[int, int]:
    """M_l: largest number of shells of degree l carried by any element."""
    counts = {l: 0 for l in range(AO_L_MAX + 1)}
    for spec in ELEMENT_TABLE.values():
        for l in counts:
            counts[l] = max(counts[l], sum(1 for s in spec.shells if s.l == l))
    return counts


def max_atom_aos() -> int:
    return max(spec.n_ao for spec in ELEMENT_TABLE.values())


def max_atom_shells() -> int:
    return max(len(spec.shells) for spec in ELEMENT_TABLE.values())


class AOBasis:
    """Flat AO layout for a list of atoms.

    Atom A owns the contiguous range ``atom_slice(A)``; inside it shells follow
    the element table order and each shell spans m = -l..l.
    """

    def __init__(self, atomic_numbers: Sequence[int]):
        self.atomic_numbers: Tuple[int, ...] = tuple(int(z) for z in atomic_numbers)
        self.shells: Tuple[Tuple[ShellSpec, ...], ...] = tuple(element_spec(z).shells for z in self.atomic_numbers)
        sizes = [sum(s.size for s in shells) for shells in self.shells]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.offsets.setflags(write=False)
        self.M_l = max_shells_per_degree()

    def __eq__(self, other) -> bool:
        return isinstance(other, AOBasis) and self.atomic_numbers == other.atomic_numbers

    def __repr__(self) -> str:
        return f"AOBasis(atoms={len(self.atomic_numbers)}, dim={self.dim})"

    @property
    def n_atoms(self) -> int:
        return len(self.atomic_numbers)

    @property
    def dim(self) -> int:
        return int(self.offsets[-1])

    def check_atom(self, atom: int) -> int:
        if not 0 <= atom < self.n_atoms:
            raise DomainError(f"atom index {atom} out of range 0..{self.n_atoms - 1}")
        return atom

    def atom_slice(self, atom: int) -> slice:
        self.check_atom(atom)
        return slice(int(self.offsets[atom]), int(self.offsets[atom + 1]))

    def index(self, atom: int, shell: int, m: int) -> int:
        """Flat AO index of component m of shell number ``shell`` on ``atom``."""
        shells = self.shells[self.check_atom(atom)]
        start = int(self.offsets[atom]) + sum(s.size for s in shells[:shell])
        spec = shells[shell]
        if abs(m) > spec.l:
            raise DomainError(f"order {m} invalid for l={spec.l}")
        return start + m + spec.l

    def iter_shells(self) -> Iterator[Tuple[int, int, ShellSpec, slice]]:
        """Yield (atom, shell number, spec, flat slice) for every shell."""
        for atom, shells in enumerate(self.shells):
            start = int(self.offsets[atom])
            for k, spec in enumerate(shells):
                yield atom, k, spec, slice(start, start + spec.size)
                start += spec.size

    @cached_property
    def ao_degrees(self) -> np.ndarray:
        degrees = np.zeros(self.dim, dtype=np.int64)
        for _, _, spec, sl in self.iter_shells():
            degrees[sl] = spec.l
        return degrees

    @cached_property
    def ao_atoms(self) -> np.ndarray:
        atoms = np.zeros(self.dim, dtype=np.int64)
        for atom in range(self.n_atoms):
            atoms[self.atom_slice(atom)] = atom
        return atoms

    def shell_rotation(self, rotation: np.ndarray) -> np.ndarray:
        """Block-diagonal matrix holding D^l(R) for every shell."""
        blocks = o3.wigner_d_blocks(rotation, AO_L_MAX)
        full = np.zeros((self.dim, self.dim))
        for _, _, spec, sl in self.iter_shells():
            full[sl, sl] = blocks[spec.l]
        return full

    def parity_signs(self) -> np.ndarray:
        return (-1.0) ** self.ao_degrees

    def permutation_index(self, sigma: Sequence[int]) -> Tuple["AOBasis", np.ndarray]:
        """Basis after relabelling atom A as sigma[A], and the AO gather index into the old layout."""
        sigma = check_permutation(sigma, self.n_atoms)
        inverse = np.argsort(sigma)
        new_numbers = [self.atomic_numbers[old] for old in inverse]
        index = np.concatenate(
            [np.arange(self.offsets[old], self.offsets[old + 1]) for old in inverse]
        ) if self.n_atoms else np.zeros(0, dtype=np.int64)
        return AOBasis(new_numbers), index.astype(np.int64)


def check_permutation(sigma: Sequence[int], n: int) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.int64)
    if sigma.shape != (n,) or not np.array_equal(np.sort(sigma), np.arange(n)):
        raise DomainError(f"not a permutation of {n} atoms: {sigma.tolist()}")
    return sigma


@dataclass(frozen=True)
class NBodyTensor:
    """Stack of named symmetric AO matrices sharing one basis.

    ``data`` has shape (channels, dim, dim) and is read-only once constructed.
    """

    channels: Tuple[str, ...]
    data: np.ndarray
    basis: AOBasis = field(compare=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[0] != len(self.channels):
            raise DomainError(f"expected ({len(self.channels)}, n, n) data, got shape {data.shape}")
        if data.shape[1:] != (self.basis.dim, self.basis.dim):
            raise DomainError(f"data dimension {data.shape[1:]} does not match basis dimension {self.basis.dim}")
        scale = max(1.0, float(np.max(np.abs(data)))) if data.size else 1.0
        if data.size and np.max(np.abs(data - data.transpose(0, 2, 1))) > SYMMETRY_TOL * scale:
            raise DomainError("N-body tensor channels must be symmetric")
        data.setflags(write=False)
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "data", data)

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    def channel(self, name: str) -> np.ndarray:
        try:
            return self.data[self.channels.index(name)]
        except ValueError:
            raise KeyError(f"no channel named {name!r}; have {self.channels}") from None

    def _channel_index(self, channel) -> int:
        if isinstance(channel, str):
            return self.channels.index(channel)
        if not 0 <= channel < self.n_channels:
            raise DomainError(f"channel {channel} out of range")
        return int(channel)

    def block_at(self, channel, a: int, b: int) -> np.ndarray:
        """Dense (A, B) atom-pair block of one channel."""
        return self.data[self._channel_index(channel), self.basis.atom_slice(a), self.basis.atom_slice(b)]

    def with_data(self, data: np.ndarray, basis: "AOBasis" = None) -> "NBodyTensor":
        return NBodyTensor(self.channels, data, basis or self.basis)

    def select(self, names: Sequence[str]) -> "NBodyTensor":
        idx = [self.channels.index(n) for n in names]
        return NBodyTensor(tuple(names), self.data[idx], self.basis)


def block_at(tensor: NBodyTensor, channel, a: int, b: int) -> np.ndarray:
    return tensor.block_at(channel, a, b)


def rotate_tensor(tensor: NBodyTensor, rotation: np.ndarray) -> NBodyTensor:
    """Apply D^l(R) . block . D^l'(R)^T to every shell-pair block of every channel."""
    d = tensor.basis.shell_rotation(rotation)
    rotated = np.einsum("ij,cjk,lk->cil", d, tensor.data, d)
    # einsum accumulation can leave asymmetry at the 1e-16 level
    rotated = 0.5 * (rotated + rotated.transpose(0, 2, 1))
    return tensor.with_data(rotated)


def invert_tensor(tensor: NBodyTensor) -> NBodyTensor:
    """Spatial inversion: every shell-pair block picks up (-1)^(l+l')."""
    signs = tensor.basis.parity_signs()
    return tensor.with_data(tensor.data * signs[None, :, None] * signs[None, None, :])


def permute_atoms(tensor: NBodyTensor, sigma: Sequence[int]) -> NBodyTensor:
    """Relabel atom A as sigma[A]: block (sigma A, sigma B) of the result is block (A, B) of the input."""
    basis, index = tensor.basis.permutation_index(sigma)
    return NBodyTensor(tensor.channels, tensor.data[:, index][:, :, index], basis)
