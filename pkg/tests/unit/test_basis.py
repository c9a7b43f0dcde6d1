"""Unit tests for the AO basis layout and N-body tensors."""
import numpy as np
import pytest

from unite.basis import (
    ELEMENTS,
    AOBasis,
    NBodyTensor,
    ShellSpec,
    block_at,
    element_index,
    element_spec,
    invert_tensor,
    max_atom_aos,
    max_shells_per_degree,
    permute_atoms,
    rotate_tensor,
)
from unite.errors import DomainError, MissingParameterError
from unite.featurizer import featurize


@pytest.mark.unit
class TestElementTable:
    """Unit tests for the per-element shell table."""

    def test_hydrogen_has_one_s_shell(self):
        """Test hydrogen carries a single s function."""
        spec = element_spec(1)
        assert spec.symbol == "H"
        assert spec.n_ao == 1

    def test_sulfur_carries_d_shell(self):
        """Test second-row elements reach l = 2."""
        assert max(s.l for s in element_spec(16).shells) == 2
        assert element_spec(16).n_ao == 10
        assert max_atom_aos() == 10

    def test_shells_per_degree(self):
        """Test M_l counts the most shells of each degree on any element."""
        assert max_shells_per_degree() == {0: 2, 1: 1, 2: 1}

    def test_unknown_element(self):
        """Test an untabulated element raises MissingParameterError naming it."""
        with pytest.raises(MissingParameterError) as excinfo:
            element_spec(2)
        assert excinfo.value.element == 2

    def test_element_index_follows_sorted_table(self):
        """Test per-element rows follow increasing atomic number."""
        assert [element_index(z) for z in ELEMENTS] == list(range(len(ELEMENTS)))

    def test_invalid_shell(self):
        """Test shells must have positive exponents and degrees within range."""
        with pytest.raises(DomainError):
            ShellSpec(1, 0, -1.0)
        with pytest.raises(DomainError):
            ShellSpec(1, 3, 1.0)


@pytest.mark.unit
class TestAOBasis:
    """Unit tests for AOBasis."""

    def test_layout(self):
        """Test contiguous per-atom AO ranges in input order."""
        basis = AOBasis((8, 1, 1))
        assert basis.dim == 7
        assert basis.atom_slice(0) == slice(0, 5)
        assert basis.atom_slice(2) == slice(6, 7)
        np.testing.assert_array_equal(basis.ao_atoms, [0, 0, 0, 0, 0, 1, 2])
        np.testing.assert_array_equal(basis.ao_degrees, [0, 0, 1, 1, 1, 0, 0])

    def test_index(self):
        """Test flat index of shell component m on an atom."""
        basis = AOBasis((1, 8))
        assert basis.index(1, 2, -1) == 3
        assert basis.index(1, 2, 1) == 5

    def test_atom_out_of_range(self):
        """Test atom indices are validated."""
        with pytest.raises(DomainError):
            AOBasis((1, 1)).atom_slice(2)

    def test_invalid_order(self):
        """Test |m| > l is rejected."""
        with pytest.raises(DomainError):
            AOBasis((1,)).index(0, 0, 1)

    def test_permutation_index(self):
        """Test relabelled basis and gather index."""
        basis = AOBasis((8, 1))
        new_basis, index = basis.permutation_index([1, 0])
        assert new_basis.atomic_numbers == (1, 8)
        np.testing.assert_array_equal(index, [5, 0, 1, 2, 3, 4])

    def test_invalid_permutation(self):
        """Test non-permutations are rejected."""
        with pytest.raises(DomainError):
            AOBasis((1, 1)).permutation_index([0, 0])


@pytest.mark.unit
class TestNBodyTensor:
    """Unit tests for NBodyTensor and its symmetry actions."""

    def test_rejects_asymmetric(self):
        """Test channels must be symmetric."""
        basis = AOBasis((1, 1))
        with pytest.raises(DomainError):
            NBodyTensor(("X",), np.array([[[0.0, 1.0], [0.0, 0.0]]]), basis)

    def test_rejects_wrong_shape(self):
        """Test data must match the basis dimension."""
        with pytest.raises(DomainError):
            NBodyTensor(("X",), np.zeros((1, 3, 3)), AOBasis((1, 1)))

    def test_read_only(self, water):
        """Test data cannot be modified after construction."""
        tensor, _ = featurize(water)
        with pytest.raises(ValueError):
            tensor.data[0, 0, 0] = 1.0

    def test_block_at(self, water):
        """Test atom-pair blocks have shape (n_ao(A), n_ao(B))."""
        tensor, _ = featurize(water)
        assert block_at(tensor, "S", 0, 1).shape == (5, 1)
        np.testing.assert_array_equal(tensor.block_at(0, 1, 0), tensor.block_at("F", 0, 1).T)

    def test_unknown_channel(self, water):
        """Test unknown channel names raise KeyError."""
        tensor, _ = featurize(water)
        with pytest.raises(KeyError):
            tensor.channel("Q")

    def test_select(self, water):
        """Test channel selection keeps order and data."""
        tensor, _ = featurize(water)
        picked = tensor.select(["S", "F"])
        np.testing.assert_array_equal(picked.data[0], tensor.channel("S"))

    def test_rotation_matches_featurizing_rotated_geometry(self, hydrogen_sulfide, rotation):
        """Test rotate_tensor reproduces features of the rotated molecule."""
        tensor, _ = featurize(hydrogen_sulfide)
        rotated, _ = featurize(hydrogen_sulfide.rotated(rotation))
        np.testing.assert_allclose(rotate_tensor(tensor, rotation).data, rotated.data, atol=1e-9)

    def test_inversion(self, hydrogen_sulfide):
        """Test invert_tensor reproduces features of the inverted molecule."""
        tensor, _ = featurize(hydrogen_sulfide)
        inverted, _ = featurize(hydrogen_sulfide.inverted())
        np.testing.assert_allclose(invert_tensor(tensor).data, inverted.data, atol=1e-10)

    def test_permutation(self, water):
        """Test permute_atoms reproduces features of the relabelled molecule."""
        sigma = [2, 0, 1]
        tensor, _ = featurize(water)
        permuted, _ = featurize(water.permuted(sigma))
        moved = permute_atoms(tensor, sigma)
        assert moved.basis.atomic_numbers == permuted.basis.atomic_numbers
        np.testing.assert_allclose(moved.data, permuted.data, atol=1e-10)
