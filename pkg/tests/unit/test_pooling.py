"""Unit tests for the readout heads."""
import numpy as np
import pytest
import torch

from unite.basis import ELEMENTS, element_index
from unite.errors import DomainError, MissingParameterError
from unite.graph import collate
from unite.pooling import (
    DensityHead,
    DipoleHead,
    ElementBias,
    EnergyHead,
    GapHead,
    MOHead,
    R2Head,
    build_head,
    molecule_sum,
)


def element_counts(*molecules) -> np.ndarray:
    counts = np.zeros((len(molecules), len(ELEMENTS)))
    for row, atoms in enumerate(molecules):
        for z in atoms:
            counts[row, element_index(z)] += 1
    return counts


@pytest.fixture
def water_batch(water, features_of):
    return collate([features_of(water)])


@pytest.fixture
def pair_batch(water, methane, features_of):
    return collate([features_of(water), features_of(methane)])


@pytest.mark.unit
class TestMoleculeSum:
    """Unit tests for per-molecule reduction."""

    def test_counts_atoms(self, pair_batch):
        """Test summing ones counts the atoms of each molecule."""
        ones = torch.ones(pair_batch.n_atoms, dtype=torch.float64)
        assert molecule_sum(ones, pair_batch).tolist() == [3.0, 5.0]

    def test_keeps_trailing_axes(self, pair_batch):
        """Test vector values reduce to (M, 3)."""
        assert molecule_sum(pair_batch.positions, pair_batch).shape == (2, 3)


@pytest.mark.unit
class TestElementBias:
    """Unit tests for per-element offsets."""

    def test_fit_recovers_offsets(self):
        """Test least squares on element counts recovers exact offsets."""
        bias = ElementBias("energy bias")
        counts = element_counts((1, 1), (8, 1, 1))
        bias.fit(counts, np.array([-1.0, -76.0]))
        assert float(bias.bias[element_index(1)]) == pytest.approx(-0.5)
        assert float(bias.bias[element_index(8)]) == pytest.approx(-75.0)

    def test_unseen_element_is_missing(self, methane, features_of):
        """Test elements absent from the fit raise MissingParameterError."""
        bias = ElementBias("energy bias")
        bias.fit(element_counts((1, 1), (8, 1, 1)), np.array([-1.0, -76.0]))
        with pytest.raises(MissingParameterError) as excinfo:
            bias(collate([features_of(methane)]))
        assert excinfo.value.element == 6
        assert excinfo.value.table == "energy bias"


@pytest.mark.unit
class TestEnergyHead:
    """Unit tests for EnergyHead."""

    def test_zero_init(self, channels, random_rep, water_batch):
        """Test a zero-initialized head predicts zero."""
        head = EnergyHead(channels)
        head.zero_init()
        out = head(random_rep(channels, 3), water_batch)
        assert out.shape == (1,)
        assert float(out[0]) == 0.0

    def test_sum_of_atom_energies(self, channels, random_rep, pair_batch):
        """Test molecular energy is the sum of its atoms' energies."""
        head = EnergyHead(channels)
        h = random_rep(channels, 8)
        atoms = head.atom_energies(h, pair_batch)
        torch.testing.assert_close(head(h, pair_batch), torch.stack([atoms[:3].sum(), atoms[3:].sum()]))

    def test_rotation_invariant(self, channels, random_rep, water_batch, rotation):
        """Test energies only see neuron norms."""
        head = EnergyHead(channels)
        h = random_rep(channels, 3)
        torch.testing.assert_close(head(h.rotate(rotation), water_batch), head(h, water_batch))


@pytest.mark.unit
class TestDipoleHead:
    """Unit tests for DipoleHead."""

    def test_charges_are_compensated(self, channels, random_rep, pair_batch):
        """Test atomic charges of each molecule sum to zero."""
        head = DipoleHead(channels)
        q = head.charges(random_rep(channels, 8), pair_batch)
        np.testing.assert_allclose(molecule_sum(q, pair_batch).detach().numpy(), 0.0, atol=1e-12)

    def test_translation_invariant(self, channels, random_rep, water, features_of):
        """Test shifting the molecule leaves the dipole unchanged."""
        head = DipoleHead(channels)
        h = random_rep(channels, 3)
        here = head(h, collate([features_of(water)]))
        there = head(h, collate([features_of(water.translated([2.0, -3.0, 0.5]))]))
        torch.testing.assert_close(there, here)

    def test_rotation_equivariant(self, channels, random_rep, water, features_of, rotation):
        """Test rotating features and geometry rotates the dipole vector."""
        head = DipoleHead(channels)
        h = random_rep(channels, 3)
        mu = head(h, collate([features_of(water)]))[0].detach().numpy()
        turned = head(h.rotate(rotation), collate([features_of(water.rotated(rotation))]))[0].detach().numpy()
        np.testing.assert_allclose(turned, rotation @ mu, atol=1e-10)


@pytest.mark.unit
class TestOrbitalHeads:
    """Unit tests for MOHead and GapHead."""

    @pytest.mark.parametrize("kind", ["exponential", "linear"])
    def test_attention_normalized(self, channels, random_rep, pair_batch, kind):
        """Test attention weights sum to one per molecule."""
        head = MOHead(channels, attention_kind=kind)
        with torch.no_grad():
            head.w_attention.weight.abs_()
        norms = random_rep(channels, 8).norms(0.1)
        weights = head.attention(norms, pair_batch)
        np.testing.assert_allclose(molecule_sum(weights, pair_batch).detach().numpy(), 1.0, rtol=1e-12)

    def test_linear_attention_needs_positive_sum(self, channels, random_rep, water_batch):
        """Test a non-positive linear normalizer raises DomainError."""
        head = MOHead(channels, attention_kind="linear")
        with torch.no_grad():
            head.w_attention.weight.copy_(-head.w_attention.weight.abs())
        with pytest.raises(DomainError):
            head(random_rep(channels, 3), water_batch)

    def test_unknown_attention_kind(self, channels):
        """Test only linear and exponential attention exist."""
        with pytest.raises(ValueError):
            MOHead(channels, attention_kind="softplus")

    def test_gap_is_difference(self, channels, random_rep, water_batch):
        """Test the gap head subtracts its HOMO pool from its LUMO pool."""
        head = GapHead(channels)
        h = random_rep(channels, 3)
        torch.testing.assert_close(head(h, water_batch), head.lumo(h, water_batch) - head.homo(h, water_batch))
        assert not head.extensive


@pytest.mark.unit
class TestR2Head:
    """Unit tests for R2Head."""

    def test_zero_total_charge(self, channels, random_rep, water_batch):
        """Test a vanishing total charge has no centroid."""
        head = R2Head(channels)
        with torch.no_grad():
            head.w_charge.weight.zero_()
        head.charge_bias.fill(0.0, np.ones(len(ELEMENTS), dtype=bool))
        with pytest.raises(DomainError):
            head(random_rep(channels, 3), water_batch)

    def test_translation_invariant(self, channels, random_rep, water, features_of):
        """Test the extent is measured about the molecule's own centroid."""
        head = R2Head(channels)
        head.charge_bias.fill(1.0, np.ones(len(ELEMENTS), dtype=bool))
        h = random_rep(channels, 3)
        here = head(h, collate([features_of(water)]))
        there = head(h, collate([features_of(water.translated([4.0, 1.0, -2.0]))]))
        torch.testing.assert_close(there, here)


@pytest.mark.unit
class TestDensityHead:
    """Unit tests for DensityHead."""

    def test_shape(self, channels, random_rep, water_batch):
        """Test 60 coefficients per atom for the default auxiliary basis."""
        out = DensityHead(channels)(random_rep(channels, 3), water_batch)
        assert out.shape == (3, 60)

    def test_unseen_element(self, channels, random_rep, water_batch):
        """Test elements without trained weights raise MissingParameterError."""
        head = DensityHead(channels)
        head.initialize_bias(element_counts((1, 1)), np.zeros(1))
        with pytest.raises(MissingParameterError):
            head(random_rep(channels, 3), water_batch)


@pytest.mark.unit
class TestBuildHead:
    """Unit tests for build_head."""

    @pytest.mark.parametrize("kind,cls", [("energy", EnergyHead), ("homo", MOHead), ("lumo", MOHead), ("gap", GapHead)])
    def test_kinds(self, channels, kind, cls):
        """Test head kinds map to their classes."""
        assert isinstance(build_head(kind, channels), cls)

    def test_unknown_kind(self, channels):
        """Test unknown kinds raise DomainError."""
        with pytest.raises(DomainError):
            build_head("entropy", channels)
