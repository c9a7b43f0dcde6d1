"""Unit tests for losses, the optimizer, schedules and finite-difference forces."""
import math
from unittest.mock import patch

import numpy as np
import pytest
import scipy.sparse
import torch
import torch.nn as nn

from unite.density import density_overlap_matrix
from unite.errors import DomainError, TrainingError
from unite.model import build_model
from unite.settings import OptimizerConfig, TrainingSettings
from unite.training import (
    STENCIL,
    AdamState,
    Trainer,
    adam_step,
    backward,
    density_loss,
    energy_force_loss,
    fd_forces,
    forces_from_energies,
    geometry_pair_loss,
    learning_rate,
    make_sample,
    mean_absolute_error,
    pair_partners,
    smooth_l1,
    stack_targets,
    stencil_geometries,
    step_decay_lr,
    to_torch_overlap,
    warmup_cosine_lr,
)


def tensor(*values) -> torch.Tensor:
    return torch.tensor(values, dtype=torch.float64)


@pytest.mark.unit
class TestLosses:
    """Unit tests for the loss functions."""

    def test_smooth_l1_branches(self):
        """Test the quadratic branch below 1 and the linear branch above."""
        assert float(smooth_l1(tensor(0.5), tensor(0.0))) == pytest.approx(0.125)
        assert float(smooth_l1(tensor(3.0), tensor(0.0))) == pytest.approx(2.5)

    def test_geometry_pair_without_difference_term(self, rng):
        """Test c_g = 0 reduces to the plain loss."""
        energies, predictions = tensor(1.0, 2.0, 3.0), tensor(1.5, 2.0, 0.0)
        loss = geometry_pair_loss(energies, predictions, ["a", "a", "b"], rng, c_g=0.0)
        assert float(loss) == pytest.approx(float(smooth_l1(predictions, energies)))

    def test_geometry_pair_constant_offset(self, rng):
        """Test a constant prediction offset leaves the difference term at zero."""
        energies = tensor(1.0, 2.0, 3.0, 4.0)
        loss = geometry_pair_loss(energies, energies + 0.5, ["a", "a", "b", "b"], rng, c_g=10.0)
        assert float(loss) == pytest.approx(0.125)

    def test_pair_partners_share_molecule(self, rng):
        """Test partners come from the same molecule and singletons pair with themselves."""
        ids = ["a", "b", "a", "c", "a"]
        partners = pair_partners(ids, rng)
        assert all(ids[p] == ids[i] for i, p in enumerate(partners))
        assert partners[3] == 3

    def test_energy_force_weights(self):
        """Test c_e and c_f scale their terms."""
        loss = energy_force_loss(tensor(0.0), tensor(0.5), tensor(0.0, 0.0), tensor(0.5, 0.5), c_e=2.0, c_f=10.0)
        assert float(loss) == pytest.approx(2.0 * 0.125 + 10.0 * 0.125)


@pytest.mark.unit
class TestDensityLoss:
    """Unit tests for the analytic density loss."""

    def test_sparse_matches_dense(self, h2):
        """Test sparse COO and dense overlaps give the same loss."""
        dense = density_overlap_matrix(h2)
        rng = np.random.default_rng(0)
        d = torch.from_numpy(rng.normal(size=(2, 60)))
        d_hat = torch.from_numpy(rng.normal(size=(2, 60)))
        sparse = to_torch_overlap(scipy.sparse.coo_matrix(dense))
        assert sparse.is_sparse
        torch.testing.assert_close(density_loss(d, d_hat, sparse), density_loss(d, d_hat, to_torch_overlap(dense)))

    def test_zero_for_exact_prediction(self, h2):
        """Test identical coefficients give zero loss."""
        d = torch.ones(2, 60, dtype=torch.float64)
        assert float(density_loss(d, d, to_torch_overlap(density_overlap_matrix(h2)))) == 0.0

    def test_quadratic_form(self):
        """Test the loss is diff^T S diff."""
        s = to_torch_overlap(np.array([[2.0, 0.5], [0.5, 1.0]]))
        assert float(density_loss(tensor(1.0, 1.0), tensor(0.0, 0.0), s)) == pytest.approx(4.0)

    def test_rejects_indefinite_overlap(self):
        """Test a non positive definite overlap raises DomainError when checked."""
        s = to_torch_overlap(np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(DomainError):
            density_loss(tensor(1.0, 0.0), tensor(0.0, 0.0), s, check=True)

    def test_rejects_asymmetric_overlap(self):
        """Test an asymmetric overlap raises DomainError when checked."""
        s = to_torch_overlap(np.array([[1.0, 0.1], [0.0, 1.0]]))
        with pytest.raises(DomainError):
            density_loss(tensor(1.0, 0.0), tensor(0.0, 0.0), s, check=True)

    def test_checks_overlap_by_default(self):
        """Test an indefinite overlap raises DomainError without opting in."""
        s = to_torch_overlap(np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(DomainError):
            density_loss(tensor(1.0, 0.0), tensor(0.0, 0.0), s)


@pytest.mark.unit
class TestOptimizer:
    """Unit tests for gradients and Adam."""

    def test_backward_names_non_finite_parameter(self):
        """Test a NaN gradient raises TrainingError naming the parameter."""
        layer = nn.Linear(2, 1, bias=False, dtype=torch.float64)
        loss = layer.weight.sum() * float("nan")
        with pytest.raises(TrainingError) as excinfo:
            backward(layer, loss)
        assert excinfo.value.parameter == "weight"

    def test_backward_fills_unused_parameters(self):
        """Test parameters outside the graph get zero gradients."""
        layer = nn.Linear(2, 1, dtype=torch.float64)
        grads = backward(layer, layer.weight.sum())
        assert not grads["bias"].any()
        assert torch.all(grads["weight"] == 1.0)

    def test_first_adam_step(self):
        """Test the first bias-corrected step moves by lr * g / (|g| + eps)."""
        param = torch.zeros(2, dtype=torch.float64)
        config = OptimizerConfig()
        state = adam_step({"w": param}, {"w": tensor(1.0, -2.0)}, AdamState(), config, lr=0.1)
        assert state.step == 1
        np.testing.assert_allclose(param.numpy(), [-0.1 / (1.0 + 1e-4), 0.1 * 2.0 / (2.0 + 1e-4)], rtol=1e-12)

    def test_adam_moments_accumulate(self):
        """Test moment estimates decay with beta1 and beta2."""
        param = torch.zeros(1, dtype=torch.float64)
        state = AdamState()
        config = OptimizerConfig()
        for _ in range(2):
            adam_step({"w": param}, {"w": tensor(1.0)}, state, config, lr=0.0)
        assert float(state.first["w"][0]) == pytest.approx(0.1 * 0.9 + 0.1)
        assert float(state.second["w"][0]) == pytest.approx(0.001 * 0.999 + 0.001)
        assert float(param[0]) == 0.0


@pytest.mark.unit
class TestSchedules:
    """Unit tests for learning-rate schedules."""

    def test_warmup_is_linear(self):
        """Test warmup ramps to max_lr."""
        assert warmup_cosine_lr(0, 10, 2, 1.0) == pytest.approx(0.5)
        assert warmup_cosine_lr(1, 10, 2, 1.0) == pytest.approx(1.0)

    def test_cosine_reaches_zero(self):
        """Test annealing starts at max_lr and ends at zero on the last epoch."""
        assert warmup_cosine_lr(2, 10, 2, 1.0) == pytest.approx(1.0)
        assert warmup_cosine_lr(9, 10, 2, 1.0) == pytest.approx(0.0, abs=1e-15)
        rates = [warmup_cosine_lr(e, 10, 2, 1.0) for e in range(2, 10)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_step_decay(self):
        """Test halving every fifth of the run."""
        assert [step_decay_lr(e, 10, 1.0) for e in (0, 1, 2, 9)] == [1.0, 1.0, 0.5, 0.0625]

    def test_learning_rate_dispatch(self):
        """Test the configured schedule is used."""
        decay = OptimizerConfig(schedule="step_decay", max_lr=2.0, warmup_epochs=0)
        settings = TrainingSettings(epochs=10, optimizer=decay)
        assert learning_rate(4, settings) == pytest.approx(0.5)
        assert math.isclose(learning_rate(0, TrainingSettings(epochs=10, optimizer=OptimizerConfig(warmup_epochs=5))),
                            5e-4 / 5)


@pytest.mark.unit
class TestFiniteDifferenceForces:
    """Unit tests for the five-point stencil."""

    def test_stencil_layout(self, water):
        """Test geometries are ordered by atom, axis and stencil point."""
        geometries = stencil_geometries(water, 0.01)
        assert len(geometries) == 3 * 3 * len(STENCIL)
        np.testing.assert_allclose(geometries[0].coords[0], water.coords[0] + [-0.02, 0.0, 0.0])
        np.testing.assert_allclose(geometries[5].coords[0], water.coords[0] + [0.0, -0.01, 0.0])

    def test_exact_for_quartic(self):
        """Test the stencil differentiates polynomials up to degree four exactly."""
        step, x0 = 0.01, 0.5
        energies = torch.zeros(3 * len(STENCIL), dtype=torch.float64)
        for j, (k, _) in enumerate(STENCIL):
            x = x0 + k * step
            energies[j] = x ** 4
        forces = forces_from_energies(energies, 1, step)
        assert float(forces[0, 0]) == pytest.approx(-4.0 * x0 ** 3, rel=1e-10)
        assert not forces[0, 1:].any()

    def test_model_forces_sum_to_zero(self, run_settings_for, water):
        """Test a translation-invariant energy model gives forces summing to zero."""
        torch.manual_seed(0)
        model = build_model(run_settings_for("energy"))
        forces = fd_forces(model, water)
        assert forces.shape == (3, 3)
        np.testing.assert_allclose(forces.sum(axis=0), 0.0, atol=1e-6)

    def test_model_forces_rotate_with_the_molecule(self, run_settings_for, water, rotation):
        """Test forces of the rotated molecule are the rotated forces."""
        torch.manual_seed(0)
        model = build_model(run_settings_for("energy"))
        forces = fd_forces(model, water)
        turned = fd_forces(model, water.rotated(rotation))
        np.testing.assert_allclose(turned, forces @ rotation.T, atol=1e-6)

    def test_restores_training_mode(self, run_settings_for, h2):
        """Test the model returns to training mode after force evaluation."""
        model = build_model(run_settings_for("energy"))
        model.train()
        fd_forces(model, h2)
        assert model.training


@pytest.mark.unit
class TestSamples:
    """Unit tests for sample preparation and targets."""

    def test_make_sample_default_id(self, run_settings_for, water):
        """Test records without a molecule id get one from their line."""
        sample = make_sample(water, -76.0, run_settings_for("energy"), line=4)
        assert sample.molecule_id == "record-4"
        assert sample.stencil is None

    def test_density_sample_has_sparse_overlap(self, run_settings_for, h2):
        """Test density training precomputes S^rho."""
        sample = make_sample(h2, np.zeros(120), run_settings_for("density", "density"))
        assert sample.density_overlap.is_sparse
        assert sample.density_overlap.shape == (120, 120)

    def test_density_sample_rejects_indefinite_overlap(self, run_settings_for, h2):
        """Test a non positive definite S^rho stops sample preparation with the record line."""
        indefinite = scipy.sparse.coo_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))
        with patch("unite.training.density_overlap_matrix", return_value=indefinite):
            with pytest.raises(DomainError, match="record 7: density overlap is not positive definite"):
                make_sample(h2, np.zeros(120), run_settings_for("density", "density"), line=7)

    def test_stack_targets(self, run_settings_for, water, methane):
        """Test dipole labels stack to (M, 3)."""
        settings = run_settings_for("dipole")
        samples = [make_sample(g, [0.0, 0.0, 1.0], settings) for g in (water, methane)]
        assert stack_targets(samples, "dipole").shape == (2, 3)

    def test_mean_absolute_error(self):
        """Test MAE over flattened arrays and NaN for no predictions."""
        assert mean_absolute_error([np.array([1.0, 2.0])], [np.array([0.0, 0.0])]) == pytest.approx(1.5)
        assert math.isnan(mean_absolute_error([], []))


@pytest.mark.unit
class TestTrainerGuards:
    """Unit tests for Trainer input validation."""

    def test_no_samples(self, run_settings_for):
        """Test an empty training set raises DomainError."""
        settings = run_settings_for("energy")
        with pytest.raises(DomainError):
            Trainer(build_model(settings), settings).fit([])

    def test_force_loss_needs_forces(self, run_settings_for, h2):
        """Test energy-force training rejects records without force labels."""
        settings = run_settings_for("energy", "energy_force")
        samples = [make_sample(h2, -1.0, settings, line=1), make_sample(h2, -1.0, settings, line=2)]
        with pytest.raises(TrainingError, match="line 1"):
            Trainer(build_model(settings), settings).fit(samples)

    def test_split_keeps_a_training_sample(self, run_settings_for):
        """Test validation never takes every sample."""
        settings = run_settings_for("energy", validation_fraction=0.9)
        train, val = Trainer(build_model(settings), settings).split(list(range(2)))
        assert len(train) == 1 and len(val) == 1
